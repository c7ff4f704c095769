use crate::error::{shape_mismatch, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct FcCache {
    input: Tensor,
    weight: Tensor,
}

/// `y = W x + b` with `x: D`, `W: N×D`, `b: N`.
pub fn fully_connected(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(Tensor, FcCache)> {
    if x.rank() != 1 || w.rank() != 2 || w.shape()[1] != x.len() || b.shape() != [w.shape()[0]] {
        return Err(shape_mismatch(x.shape(), w.shape()));
    }
    let d = x.len();
    let y: Vec<f64> = w
        .data()
        .chunks_exact(d)
        .zip(b.data())
        .map(|(row, bias)| bias + crate::tensor::dot(row, x.data()))
        .collect();
    Ok((
        Tensor::from_vec(y),
        FcCache {
            input: x.clone(),
            weight: w.clone(),
        },
    ))
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn fully_connected_backward(cache: &FcCache, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let n = cache.weight.shape()[0];
    let d = cache.input.len();
    if grad_out.shape() != [n] {
        return Err(shape_mismatch(grad_out.shape(), &[n]));
    }
    let g = grad_out.data();
    let mut gx = vec![0.0; d];
    let mut gw = vec![0.0; n * d];
    for (i, &gi) in g.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        let row = &cache.weight.data()[i * d..(i + 1) * d];
        crate::tensor::axpy(gi, row, &mut gx);
        crate::tensor::axpy(gi, cache.input.data(), &mut gw[i * d..(i + 1) * d]);
    }
    Ok((
        Tensor::from_vec(gx),
        Tensor::new(&[n, d], gw)?,
        grad_out.clone(),
    ))
}

#[derive(Debug, Clone)]
pub struct GapCache {
    input_shape: [usize; 3],
}

/// Per-channel spatial mean of a `C×H×W` map.
pub fn global_avg_pool(x: &Tensor) -> Result<(Tensor, GapCache)> {
    if x.rank() != 3 {
        return Err(shape_mismatch(x.shape(), &[0, 0, 0]));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hw = (h * w) as f64;
    let y = x
        .data()
        .chunks_exact(h * w)
        .map(|ch| ch.iter().sum::<f64>() / hw)
        .collect();
    Ok((
        Tensor::from_vec(y),
        GapCache {
            input_shape: [c, h, w],
        },
    ))
}

pub fn global_avg_pool_backward(cache: &GapCache, grad_out: &Tensor) -> Result<Tensor> {
    let [c, h, w] = cache.input_shape;
    if grad_out.shape() != [c] {
        return Err(shape_mismatch(grad_out.shape(), &[c]));
    }
    let scale = 1.0 / (h * w) as f64;
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * scale, h * w))
        .collect();
    Tensor::new(&cache.input_shape, data)
}

use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::Tensor;

/// Half-open input range covered by output cell `i` of an adaptive pool.
pub fn pool_cell(i: usize, input: usize, out: usize) -> (usize, usize) {
    (i * input / out, (i + 1) * input / out)
}

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    input_shape: [usize; 3],
    /// flat input index per output element
    argmax: Vec<usize>,
}

/// Adaptive max pool of a `K×H×W` map to `K×S×S`. Ties go to the first element in
/// row-major order.
pub fn max_pool(x: &Tensor, out_size: usize) -> Result<(Tensor, MaxPoolCache)> {
    if x.rank() != 3 {
        return Err(shape_mismatch(x.shape(), &[0, 0, 0]));
    }
    let (k, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if out_size == 0 || out_size > h.min(w) {
        return Err(Error::BadOutputSize {
            out: out_size,
            input: h.min(w),
        });
    }
    let s = out_size;
    let xd = x.data();
    let mut out = Vec::with_capacity(k * s * s);
    let mut argmax = Vec::with_capacity(k * s * s);
    for c in 0..k {
        for i in 0..s {
            let (r0, r1) = pool_cell(i, h, s);
            for j in 0..s {
                let (c0, c1) = pool_cell(j, w, s);
                let mut best = (c * h + r0) * w + c0;
                for r in r0..r1 {
                    for col in c0..c1 {
                        let idx = (c * h + r) * w + col;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(&[k, s, s], out)?,
        MaxPoolCache {
            input_shape: [k, h, w],
            argmax,
        },
    ))
}

pub fn max_pool_backward(cache: &MaxPoolCache, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != cache.argmax.len() {
        return Err(shape_mismatch(grad_out.shape(), &[cache.argmax.len()]));
    }
    let mut gx = Tensor::zeros(&cache.input_shape);
    let d = gx.data_mut();
    for (&idx, &g) in cache.argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(gx)
}

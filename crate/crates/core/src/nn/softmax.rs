use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::Tensor;

/// Numerically stable softmax over the whole slice.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

#[derive(Debug, Clone)]
pub struct SoftmaxCache {
    output: Tensor,
}

impl SoftmaxCache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

/// Softmax over all `H×W` positions of a map.
pub fn softmax2d(m: &Tensor) -> Result<(Tensor, SoftmaxCache)> {
    if m.rank() != 2 {
        return Err(shape_mismatch(m.shape(), &[0, 0]));
    }
    let mut out = m.clone();
    softmax_in_place(out.data_mut());
    Ok((out.clone(), SoftmaxCache { output: out }))
}

/// Jacobian-vector product `p ⊙ (g − ⟨p, g⟩)`.
pub fn softmax2d_backward(cache: &SoftmaxCache, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != cache.output.shape() {
        return Err(shape_mismatch(grad_out.shape(), cache.output.shape()));
    }
    let p = cache.output.data();
    let inner = crate::tensor::dot(p, grad_out.data());
    let data = p
        .iter()
        .zip(grad_out.data())
        .map(|(&pi, &gi)| pi * (gi - inner))
        .collect();
    Tensor::new(cache.output.shape(), data)
}

#[derive(Debug, Clone)]
pub struct CrossEntropyCache {
    probs: Vec<f64>,
    label: usize,
}

impl CrossEntropyCache {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// `−log softmax(logits)[label]`, computed through log-sum-exp.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, CrossEntropyCache)> {
    let n = logits.len();
    if label >= n {
        return Err(Error::LabelOutOfRange { label, classes: n });
    }
    let l = logits.data();
    let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + l.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    let mut probs = l.to_vec();
    softmax_in_place(&mut probs);
    Ok((lse - l[label], CrossEntropyCache { probs, label }))
}

/// Gradient w.r.t. the logits, scaled by the upstream scalar gradient.
pub fn cross_entropy_backward(cache: &CrossEntropyCache, grad_out: f64) -> Tensor {
    let mut g = cache.probs.clone();
    g[cache.label] -= 1.0;
    g.iter_mut().for_each(|v| *v *= grad_out);
    Tensor::from_vec(g)
}

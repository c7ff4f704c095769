//! Training signals for the selection module and the classifier.

use crate::error::{shape_mismatch, Error, Result};
use crate::nn::{
    cross_entropy, cross_entropy_backward, max_pool, max_pool_backward, CrossEntropyCache,
    MaxPoolCache,
};
use crate::tensor::{cosine_similarity, cosine_with_grad, Tensor};

/// Default triplet margin.
pub const TRIPLET_MARGIN: f64 = 1.0;

/// Default pool size for the VI head.
pub const VI_POOL_SIZE: usize = 2;

/// Weights of the VI head: an `S×S` max pool of the part-response maps followed by an
/// `S×S` convolution to `N` scalars, scored under a Gaussian with learnable scale.
#[derive(Debug, Clone, Copy)]
pub struct ViHead<'a> {
    pub pool_size: usize,
    /// `N × K × S × S`
    pub conv_w: &'a Tensor,
    pub conv_b: &'a Tensor,
    /// `log σ`, one per class.
    pub log_sigma: &'a Tensor,
}

#[derive(Debug, Clone)]
pub struct ViCache {
    pool: MaxPoolCache,
    pooled: Tensor,
    conv_w: Tensor,
    residual: Vec<f64>,
    inv_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ViGrads {
    pub m: Tensor,
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub log_sigma: Tensor,
}

/// Gaussian negative log-likelihood of the one-hot label under the head's prediction,
/// without the additive constant: `Σ_n log σ_n + (L_n − μ_n)² / (2σ_n²)`.
pub fn vi_loss(m: &Tensor, label: usize, head: &ViHead<'_>) -> Result<(f64, ViCache)> {
    let n = head.conv_b.len();
    if label >= n {
        return Err(Error::LabelOutOfRange { label, classes: n });
    }
    let (pooled, pool) = max_pool(m, head.pool_size)?;
    if head.conv_w.shape() != [n, pooled.shape()[0], head.pool_size, head.pool_size]
        || head.log_sigma.shape() != [n]
    {
        return Err(shape_mismatch(head.conv_w.shape(), pooled.shape()));
    }
    // an S×S convolution on an S×S input is a dot product per output channel
    let d = pooled.len();
    let mut loss = 0.0;
    let mut residual = Vec::with_capacity(n);
    let mut inv_var = Vec::with_capacity(n);
    for c in 0..n {
        let mu = head.conv_b.data()[c]
            + crate::tensor::dot(&head.conv_w.data()[c * d..(c + 1) * d], pooled.data());
        let target = if c == label { 1.0 } else { 0.0 };
        let log_sigma = head.log_sigma.data()[c];
        let iv = (-2.0 * log_sigma).exp();
        let r = target - mu;
        loss += log_sigma + 0.5 * r * r * iv;
        residual.push(r);
        inv_var.push(iv);
    }
    Ok((
        loss,
        ViCache {
            pool,
            pooled,
            conv_w: head.conv_w.clone(),
            residual,
            inv_var,
        },
    ))
}

pub fn vi_loss_backward(cache: &ViCache, grad_out: f64) -> Result<ViGrads> {
    let n = cache.residual.len();
    let d = cache.pooled.len();
    let mut gw = vec![0.0; n * d];
    let mut gb = vec![0.0; n];
    let mut gls = vec![0.0; n];
    let mut gpool = vec![0.0; d];
    for c in 0..n {
        let (r, iv) = (cache.residual[c], cache.inv_var[c]);
        let gmu = -r * iv * grad_out;
        gb[c] = gmu;
        gls[c] = (1.0 - r * r * iv) * grad_out;
        crate::tensor::axpy(gmu, cache.pooled.data(), &mut gw[c * d..(c + 1) * d]);
        crate::tensor::axpy(gmu, &cache.conv_w.data()[c * d..(c + 1) * d], &mut gpool);
    }
    let gpool = Tensor::new(cache.pooled.shape(), gpool)?;
    Ok(ViGrads {
        m: max_pool_backward(&cache.pool, &gpool)?,
        conv_w: Tensor::new(cache.conv_w.shape(), gw)?,
        conv_b: Tensor::from_vec(gb),
        log_sigma: Tensor::from_vec(gls),
    })
}

/// Per-position cosine similarity between two aligned `C×H×W` maps.
pub fn pixelwise_correlation_map(f_rgb: &Tensor, f_d: &Tensor) -> Result<Tensor> {
    if f_rgb.shape() != f_d.shape() || f_rgb.rank() != 3 {
        return Err(shape_mismatch(f_rgb.shape(), f_d.shape()));
    }
    let (c, h, w) = (f_rgb.shape()[0], f_rgb.shape()[1], f_rgb.shape()[2]);
    let hw = h * w;
    let mut a = vec![0.0; c];
    let mut b = vec![0.0; c];
    let mut out = Vec::with_capacity(hw);
    for pos in 0..hw {
        for ch in 0..c {
            a[ch] = f_rgb.data()[ch * hw + pos];
            b[ch] = f_d.data()[ch * hw + pos];
        }
        out.push(cosine_similarity(&a, &b));
    }
    Tensor::new(&[h, w], out)
}

/// Mean row-wise cosine similarity of two `K×C` matrices, with gradients.
fn row_correlation(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(shape_mismatch(a.shape(), b.shape()));
    }
    let (k, c) = (a.shape()[0], a.shape()[1]);
    let mut total = 0.0;
    let mut ga = Vec::with_capacity(k * c);
    let mut gb = Vec::with_capacity(k * c);
    for (ra, rb) in a.data().chunks_exact(c).zip(b.data().chunks_exact(c)) {
        let (cos, da, db) = cosine_with_grad(ra, rb);
        total += cos;
        ga.extend(da.into_iter().map(|v| v / k as f64));
        gb.extend(db.into_iter().map(|v| v / k as f64));
    }
    Ok((
        total / k as f64,
        Tensor::new(a.shape(), ga)?,
        Tensor::new(a.shape(), gb)?,
    ))
}

/// Mean row-wise cosine similarity of two `K×C` matrices.
pub fn correlation(a: &Tensor, b: &Tensor) -> Result<f64> {
    row_correlation(a, b).map(|(v, _, _)| v)
}

#[derive(Debug, Clone)]
pub struct CorrCache {
    grad_rgb: Tensor,
    grad_d: Tensor,
}

/// `1 − ρ(E_rgb, E_d)`: zero when the two modalities' selected features align.
pub fn multimodal_corr_loss(e_rgb: &Tensor, e_d: &Tensor) -> Result<(f64, CorrCache)> {
    let (rho, ga, gb) = row_correlation(e_rgb, e_d)?;
    Ok((
        1.0 - rho,
        CorrCache {
            grad_rgb: ga.scale(-1.0),
            grad_d: gb.scale(-1.0),
        },
    ))
}

/// Returns `(grad_e_rgb, grad_e_d)`.
pub fn multimodal_corr_loss_backward(cache: &CorrCache, grad_out: f64) -> (Tensor, Tensor) {
    (cache.grad_rgb.scale(grad_out), cache.grad_d.scale(grad_out))
}

#[derive(Debug, Clone)]
pub struct TripletCache {
    active: bool,
    grad_a: Tensor,
    grad_p: Tensor,
    grad_n: Tensor,
}

/// `max{ρ(a, n) − ρ(a, p) + α, 0}`.
pub fn triplet_corr_loss(
    e_a: &Tensor,
    e_p: &Tensor,
    e_n: &Tensor,
    margin: f64,
) -> Result<(f64, TripletCache)> {
    if !(margin >= 0.0) {
        return Err(Error::BadParam(format!("triplet margin {margin}")));
    }
    let (rho_ap, ga_p, gp) = row_correlation(e_a, e_p)?;
    let (rho_an, ga_n, gn) = row_correlation(e_a, e_n)?;
    let value = rho_an - rho_ap + margin;
    let active = value > 0.0;
    Ok((
        value.max(0.0),
        TripletCache {
            active,
            grad_a: ga_n.sub(&ga_p)?,
            grad_p: gp.scale(-1.0),
            grad_n: gn,
        },
    ))
}

/// Returns `(grad_a, grad_p, grad_n)`; all zero when the hinge is inactive.
pub fn triplet_corr_loss_backward(cache: &TripletCache, grad_out: f64) -> (Tensor, Tensor, Tensor) {
    let s = if cache.active { grad_out } else { 0.0 };
    (
        cache.grad_a.scale(s),
        cache.grad_p.scale(s),
        cache.grad_n.scale(s),
    )
}

#[derive(Debug, Clone)]
pub struct AuxCache {
    rgb: CrossEntropyCache,
    d: CrossEntropyCache,
}

/// Cross-entropy of both modality-specific global heads.
pub fn aux_ce_loss(g_rgb_logits: &Tensor, g_d_logits: &Tensor, label: usize) -> Result<(f64, AuxCache)> {
    let (a, rgb) = cross_entropy(g_rgb_logits, label)?;
    let (b, d) = cross_entropy(g_d_logits, label)?;
    Ok((a + b, AuxCache { rgb, d }))
}

pub fn aux_ce_loss_backward(cache: &AuxCache, grad_out: f64) -> (Tensor, Tensor) {
    (
        cross_entropy_backward(&cache.rgb, grad_out),
        cross_entropy_backward(&cache.d, grad_out),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub aux: f64,
    pub vi: f64,
    pub corr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            aux: 1.0,
            vi: 0.1,
            corr: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBundle {
    pub l_cls: f64,
    pub l_aux: f64,
    pub l_vi: f64,
    /// Triplet terms of both modalities plus the cross-modal term.
    pub l_c: f64,
    pub total: f64,
    pub weights: LossWeights,
}

pub fn total_loss(l_cls: f64, l_aux: f64, l_vi: f64, l_c: f64, weights: LossWeights) -> LossBundle {
    LossBundle {
        l_cls,
        l_aux,
        l_vi,
        l_c,
        total: l_cls + weights.aux * l_aux + weights.vi * l_vi + weights.corr * l_c,
        weights,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, rel_err};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn head<'a>(w: &'a Tensor, b: &'a Tensor, ls: &'a Tensor) -> ViHead<'a> {
        ViHead {
            pool_size: 2,
            conv_w: w,
            conv_b: b,
            log_sigma: ls,
        }
    }

    #[test]
    fn vi_perfect_reconstruction_is_zero() {
        let m = Rng::new(1).normal(0.0, 1.0, &[3, 4, 4]).unwrap();
        let w = Tensor::zeros(&[4, 3, 2, 2]);
        let mut b = Tensor::zeros(&[4]);
        b.data_mut()[2] = 1.0;
        let ls = Tensor::zeros(&[4]);
        let (l, _) = vi_loss(&m, 2, &head(&w, &b, &ls)).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn vi_analytic_value() {
        let m = Tensor::zeros(&[1, 2, 2]);
        let w = Tensor::zeros(&[2, 1, 2, 2]);
        let b = Tensor::zeros(&[2]);
        let ls = Tensor::zeros(&[2]);
        let (l, _) = vi_loss(&m, 0, &head(&w, &b, &ls)).unwrap();
        assert_eq!(l, 0.5);
        assert!(matches!(
            vi_loss(&m, 2, &head(&w, &b, &ls)),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn vi_backward_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let m = rng.normal(0.0, 1.0, &[3, 5, 5]).unwrap();
            let w = rng.normal(0.0, 0.5, &[4, 3, 2, 2]).unwrap();
            let b = rng.normal(0.0, 0.5, &[4]).unwrap();
            let ls = rng.normal(0.0, 0.3, &[4]).unwrap();
            let label = rng.below(4);
            let (_, cache) = vi_loss(&m, label, &head(&w, &b, &ls)).unwrap();
            let g = vi_loss_backward(&cache, 1.0).unwrap();
            let f = |m: &Tensor, w: &Tensor, b: &Tensor, ls: &Tensor| {
                vi_loss(m, label, &head(w, b, ls)).unwrap().0
            };
            assert!(rel_err(&g.m, &central_difference(&m, 1e-6, |t| f(t, &w, &b, &ls))) < 1e-4);
            assert!(rel_err(&g.conv_w, &central_difference(&w, 1e-6, |t| f(&m, t, &b, &ls))) < 1e-4);
            assert!(rel_err(&g.conv_b, &central_difference(&b, 1e-6, |t| f(&m, &w, t, &ls))) < 1e-4);
            assert!(rel_err(&g.log_sigma, &central_difference(&ls, 1e-6, |t| f(&m, &w, &b, t))) < 1e-4);
        }
    }

    #[test]
    fn correlation_map_cases() {
        let mut rng = Rng::new(2);
        let f = rng.uniform(0.1, 1.0, &[3, 4, 5]).unwrap();
        let p = pixelwise_correlation_map(&f, &f).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let p = pixelwise_correlation_map(&f, &f.scale(-1.0)).unwrap();
        assert!(p.data().iter().all(|&v| (v + 1.0).abs() < 1e-12));
        let g = rng.normal(0.0, 1.0, &[3, 4, 5]).unwrap();
        let p = pixelwise_correlation_map(&f, &g).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
                for c in 0..3 {
                    let (x, y) = (f.get(&[c, i, j]), g.get(&[c, i, j]));
                    ab += x * y;
                    aa += x * x;
                    bb += y * y;
                }
                assert!((p.get(&[i, j]) - ab / (aa.sqrt() * bb.sqrt())).abs() < 1e-12);
            }
        }
        assert!(pixelwise_correlation_map(&f, &Tensor::zeros(&[3, 4, 4])).is_err());
    }

    #[test]
    fn multimodal_corr_cases() {
        let e = Rng::new(3).normal(0.0, 1.0, &[4, 6]).unwrap();
        assert!(multimodal_corr_loss(&e, &e).unwrap().0.abs() < 1e-12);
        assert!((multimodal_corr_loss(&e, &e.scale(-1.0)).unwrap().0 - 2.0).abs() < 1e-12);
        // a zero row contributes cosine 0 and no gradient
        let mut z = e.clone();
        z.data_mut()[..6].fill(0.0);
        let (l, cache) = multimodal_corr_loss(&z, &e).unwrap();
        assert!((l - 0.25).abs() < 1e-12);
        let (ga, _) = multimodal_corr_loss_backward(&cache, 1.0);
        assert!(ga.data()[..6].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn multimodal_corr_backward_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = Rng::new(30 + seed);
            let a = rng.normal(0.0, 1.0, &[3, 5]).unwrap();
            let b = rng.normal(0.0, 1.0, &[3, 5]).unwrap();
            let (_, cache) = multimodal_corr_loss(&a, &b).unwrap();
            let (ga, gb) = multimodal_corr_loss_backward(&cache, 1.0);
            let fa = central_difference(&a, 1e-6, |t| multimodal_corr_loss(t, &b).unwrap().0);
            let fb = central_difference(&b, 1e-6, |t| multimodal_corr_loss(&a, t).unwrap().0);
            assert!(rel_err(&ga, &fa) < 1e-4);
            assert!(rel_err(&gb, &fb) < 1e-4);
        }
    }

    #[test]
    fn triplet_cases() {
        let a = Rng::new(4).normal(0.0, 1.0, &[3, 4]).unwrap();
        let (l, cache) = triplet_corr_loss(&a, &a, &a.scale(-1.0), 1.0).unwrap();
        assert_eq!(l, 0.0);
        let (ga, gp, gn) = triplet_corr_loss_backward(&cache, 1.0);
        assert!(ga.data().iter().chain(gp.data()).chain(gn.data()).all(|&v| v == 0.0));
        let p = Rng::new(5).normal(0.0, 1.0, &[3, 4]).unwrap();
        let (l, _) = triplet_corr_loss(&a, &p, &p, 0.7).unwrap();
        assert!((l - 0.7).abs() < 1e-12);
        assert!(triplet_corr_loss(&a, &p, &p, -1.0).is_err());
    }

    #[test]
    fn triplet_backward_matches_finite_differences() {
        let mut checked = 0;
        let mut seed = 0;
        while checked < 20 {
            seed += 1;
            let mut rng = Rng::new(500 + seed);
            let a = rng.normal(0.0, 1.0, &[3, 4]).unwrap();
            let p = rng.normal(0.0, 1.0, &[3, 4]).unwrap();
            let n = rng.normal(0.0, 1.0, &[3, 4]).unwrap();
            let (l, cache) = triplet_corr_loss(&a, &p, &n, 1.0).unwrap();
            if l < 1e-3 {
                continue;
            }
            checked += 1;
            let (ga, gp, gn) = triplet_corr_loss_backward(&cache, 1.0);
            let f = |a: &Tensor, p: &Tensor, n: &Tensor| triplet_corr_loss(a, p, n, 1.0).unwrap().0;
            assert!(rel_err(&ga, &central_difference(&a, 1e-6, |t| f(t, &p, &n))) < 1e-4);
            assert!(rel_err(&gp, &central_difference(&p, 1e-6, |t| f(&a, t, &n))) < 1e-4);
            assert!(rel_err(&gn, &central_difference(&n, 1e-6, |t| f(&a, &p, t))) < 1e-4);
        }
    }

    #[test]
    fn aux_cases() {
        let z = Tensor::zeros(&[4]);
        let (l, _) = aux_ce_loss(&z, &z, 1).unwrap();
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);
        let mut s = Tensor::zeros(&[4]);
        s.data_mut()[3] = 1000.0;
        assert!(aux_ce_loss(&s, &s, 3).unwrap().0.abs() < 1e-12);

        let mut rng = Rng::new(6);
        let a = rng.normal(0.0, 1.0, &[5]).unwrap();
        let b = rng.normal(0.0, 1.0, &[5]).unwrap();
        let (_, cache) = aux_ce_loss(&a, &b, 2).unwrap();
        let (ga, gb) = aux_ce_loss_backward(&cache, 1.0);
        assert!(rel_err(&ga, &central_difference(&a, 1e-5, |t| aux_ce_loss(t, &b, 2).unwrap().0)) < 1e-5);
        assert!(rel_err(&gb, &central_difference(&b, 1e-5, |t| aux_ce_loss(&a, t, 2).unwrap().0)) < 1e-5);
    }

    #[test]
    fn total_loss_cases() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, w).total, 0.0);
        assert!((total_loss(1.0, 1.0, 1.0, 1.0, w).total - 2.2).abs() < 1e-12);
        let ablated = LossWeights {
            aux: 1.0,
            vi: 0.0,
            corr: 0.0,
        };
        assert_eq!(total_loss(0.3, 0.4, 9.0, 9.0, ablated).total, 0.3 + 0.4);
    }

    proptest! {
        #[test]
        fn corr_losses_are_bounded(seed in any::<u64>(), margin in 0.0f64..3.0) {
            let mut rng = Rng::new(seed);
            let a = rng.normal(0.0, 1.0, &[4, 3]).unwrap();
            let p = rng.normal(0.0, 1.0, &[4, 3]).unwrap();
            let n = rng.normal(0.0, 1.0, &[4, 3]).unwrap();
            let m = multimodal_corr_loss(&a, &p).unwrap().0;
            prop_assert!((0.0..=2.0 + 1e-12).contains(&m));
            let t = triplet_corr_loss(&a, &p, &n, margin).unwrap().0;
            prop_assert!((0.0..=2.0 + margin + 1e-12).contains(&t));
        }

        #[test]
        fn unit_sigma_vi_is_half_squared_error(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let m = rng.normal(0.0, 1.0, &[2, 4, 4]).unwrap();
            let w = rng.normal(0.0, 1.0, &[3, 2, 2, 2]).unwrap();
            let b = rng.normal(0.0, 1.0, &[3]).unwrap();
            let ls = Tensor::zeros(&[3]);
            let label = rng.below(3);
            let (l, cache) = vi_loss(&m, label, &head(&w, &b, &ls)).unwrap();
            let sq: f64 = cache.residual.iter().map(|r| r * r).sum();
            prop_assert!((l - 0.5 * sq).abs() < 1e-12);
        }

        #[test]
        fn total_is_linear(c in prop::array::uniform4(-5.0f64..5.0), w in prop::array::uniform3(0.0f64..2.0)) {
            let weights = LossWeights { aux: w[0], vi: w[1], corr: w[2] };
            let b = total_loss(c[0], c[1], c[2], c[3], weights);
            prop_assert!((b.total - (c[0] + w[0] * c[1] + w[1] * c[2] + w[2] * c[3])).abs() < 1e-12);
        }
    }
}

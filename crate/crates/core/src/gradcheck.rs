//! Finite-difference gradient checking.

use crate::error::Result;
use crate::model::{
    batch_objective, init_params, mine_triplets, BatchItem, LossTerms, ModelConfig, ModelParams,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Entries whose magnitude is below this are compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Central differences of a scalar function at every entry of `x`.
pub fn central_difference(x: &Tensor, eps: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    out
}

/// Fourth-order five-point differences. A larger step than [`central_difference`] keeps
/// roundoff small on long computations, at the price of a wider window around kinks.
pub fn five_point_difference(x: &Tensor, eps: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let mut at = |d: f64| {
            probe.data_mut()[i] = orig + d;
            f(&probe)
        };
        let v = (-at(2.0 * eps) + 8.0 * at(eps) - 8.0 * at(-eps) + at(-2.0 * eps)) / (12.0 * eps);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = v;
    }
    out
}

/// Largest entry-wise relative error `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

/// Random two-modality batch with labels covering every class when possible.
pub fn random_batch(config: &ModelConfig, size: usize, rng: &mut Rng) -> Result<Vec<(Tensor, Tensor, usize)>> {
    let shape = [config.input_channels, config.input_size.0, config.input_size.1];
    (0..size)
        .map(|i| {
            Ok((
                rng.uniform(0.0, 1.0, &shape)?,
                rng.uniform(0.0, 1.0, &shape)?,
                i % config.num_classes,
            ))
        })
        .collect()
}

/// Compares the analytic gradient of the full batch objective against central
/// differences for every parameter whose path satisfies `select`. Returns the
/// worst relative error per checked parameter.
pub fn model_gradcheck(
    config: &ModelConfig,
    seed: u64,
    batch_size: usize,
    terms: &LossTerms,
    select: impl Fn(&str) -> bool,
) -> Result<Vec<(String, f64)>> {
    let mut rng = Rng::new(seed);
    let mut params = init_params(config, &mut rng)?;
    // move log σ and biases off zero so their gradients are not special-cased
    for (_, p) in params.iter_mut() {
        let noise = rng.uniform(-0.1, 0.1, p.shape())?;
        p.value.add_assign(&noise)?;
    }
    let data = random_batch(config, batch_size, &mut rng)?;
    let labels: Vec<usize> = data.iter().map(|d| d.2).collect();
    let triplets = mine_triplets(&labels, &mut rng);
    let batch: Vec<BatchItem> = data
        .iter()
        .map(|(r, d, l)| BatchItem {
            x_rgb: r,
            x_d: d,
            label: *l,
        })
        .collect();
    params.zero_grad();
    batch_objective(&mut params, config, &batch, &triplets, terms, true)?;
    let paths: Vec<String> = params
        .iter()
        .map(|(k, _)| k.clone())
        .filter(|k| select(k))
        .collect();
    let mut report = Vec::with_capacity(paths.len());
    for path in paths {
        let analytic = params.get(&path)?.grad.clone();
        let value = params.get(&path)?.value.clone();
        let mut probe: ModelParams = params.clone();
        let numeric = central_difference(&value, 1e-6, |v| {
            probe.get_mut(&path).unwrap().value = v.clone();
            batch_objective(&mut probe, config, &batch, &triplets, terms, false)
                .map(|b| b.total)
                .unwrap_or(f64::NAN)
        });
        report.push((path, rel_err(&analytic, &numeric)));
    }
    Ok(report)
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub component: &'static str,
    pub seed: u64,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_err < self.tolerance
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} seed={:<3} rel_err={:.3e} tol={:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.component,
            self.seed,
            self.rel_err,
            self.tolerance
        )
    }
}

const TOL_LINEAR: f64 = 1e-5;
const TOL_NONLINEAR: f64 = 1e-4;
const TOL_MODEL: f64 = 1e-3;
const EPS: f64 = 1e-6;
const EPS_WIDE: f64 = 3e-5;

type Check = fn(u64, SlopeFn) -> Result<f64>;
type SlopeFn = fn(f64, f64) -> f64;

/// Every component check with its tolerance, in report order.
pub fn suite_components() -> Vec<(&'static str, f64, Check)> {
    vec![
        ("tensor.matmul", TOL_LINEAR, checks::matmul as Check),
        ("nn.conv2d", TOL_LINEAR, checks::conv2d),
        ("nn.fully_connected", TOL_LINEAR, checks::fully_connected),
        ("nn.global_avg_pool", TOL_LINEAR, checks::global_avg_pool),
        ("nn.max_pool", TOL_NONLINEAR, checks::max_pool),
        ("nn.softmax2d", TOL_NONLINEAR, checks::softmax2d),
        ("nn.cross_entropy", TOL_NONLINEAR, checks::cross_entropy),
        ("dlfs.group_channel_pool", TOL_LINEAR, checks::group_pool),
        ("dlfs.soft_keypoints", TOL_NONLINEAR, checks::soft_keypoints),
        ("dlfs.bilinear_features", TOL_LINEAR, checks::bilinear_features),
        ("dlfs.bilinear_coords", TOL_NONLINEAR, checks::bilinear_coords),
        ("dlfs.multiscale", TOL_NONLINEAR, checks::dlfs_multiscale),
        ("losses.vi", TOL_NONLINEAR, checks::vi),
        ("losses.multimodal_corr", TOL_NONLINEAR, checks::corr),
        ("losses.triplet_corr", TOL_NONLINEAR, checks::triplet),
        ("losses.aux_ce", TOL_NONLINEAR, checks::aux),
        ("model.l_cls", TOL_MODEL, checks::model_cls),
        ("model.l_aux", TOL_MODEL, checks::model_aux),
        ("model.l_vi", TOL_MODEL, checks::model_vi),
        ("model.l_c", TOL_MODEL, checks::model_corr),
        ("model.total", TOL_MODEL, checks::model_total),
    ]
}

/// Runs every component check for seeds `0..seed_count`.
pub fn gradcheck_suite(seed_count: u64) -> Vec<CheckResult> {
    gradcheck_suite_with_slope(seed_count, crate::dlfs::tent_slope)
}

/// [`gradcheck_suite`] with the bilinear tent derivative replaced by `slope`.
pub fn gradcheck_suite_with_slope(seed_count: u64, slope: SlopeFn) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for (component, tolerance, check) in suite_components() {
        for seed in 0..seed_count {
            let rel_err = check(seed, slope).unwrap_or(f64::INFINITY);
            out.push(CheckResult {
                component,
                seed,
                rel_err,
                tolerance,
            });
        }
    }
    out
}

mod checks {
    use super::*;
    use crate::dlfs::{self, DlfsConfig, PyramidStage, ScaleConfig};
    use crate::losses;
    use crate::nn;

    fn rng(seed: u64, salt: u64) -> Rng {
        Rng::substream(seed, salt)
    }

    fn probe_dot(t: &Tensor, probe: &Tensor) -> f64 {
        t.dot(probe)
    }

    pub fn matmul(seed: u64, _: SlopeFn) -> Result<f64> {
        let mut r = rng(seed, 1);
        let a = r.normal(0.0, 1.0, &[3, 4])?;
        let b = r.normal(0.0, 1.0, &[4, 5])?;
        let p = r.normal(0.0, 1.0, &[3, 5])?;
        // d/dA <P, AB> = P Bᵀ
        let bt = {
            let mut t = Tensor::zeros(&[5, 4]);
            for i in 0..4 {
                for j in 0..5 {
                    t.set(&[j, i], b.get(&[i, j]));
                }
            }
            t
        };
        let analytic = p.matmul(&bt)?;
        let numeric = central_difference(&a, EPS, |x| probe_dot(&x.matmul(&b).unwrap(), &p));
        Ok(rel_err(&analytic, &numeric))
    }

    pub fn conv2d(seed: u64, _: SlopeFn) -> Result<f64> {
        let mut r = rng(seed, 2);
        let x = r.normal(0.0, 1.0, &[2, 6, 7])?;
        let w = r.normal(0.0, 1.0, &[3, 2, 3, 3])?;
        let b = r.normal(0.0, 1.0, &[3])?;
        let (y, cache) = nn::conv2d(&x, &w, &b, 2, 1)?;
        let p = r.normal(0.0, 1.0, y.shape())?;
        let (gx, gw, gb) = nn::conv2d_backward(&cache, &p)?;
        let f = |x: &Tensor, w: &Tensor, b: &Tensor| probe_dot(&nn::conv2d(x, w, b, 2, 1).unwrap().0, &p);
        let nx = central_difference(&x, EPS, |t| f(t, &w, &b));
        let nw = central_difference(&w, EPS, |t| f(&x, t, &b));
        let nb = central_difference(&b, EPS, |t| f(&x, &w, t));
        Ok(rel_err(&gx, &nx).max(rel_err(&gw, &nw)).max(rel_err(&gb, &nb)))
    }

    pub fn fully_connected(seed: u64, _: SlopeFn) -> Result<f64> {
        let mut r = rng(seed, 3);
        let x = r.normal(0.0, 1.0, &[6])?;
        let w = r.normal(0.0, 1.0, &[4, 6])?;
        let b = r.normal(0.0, 1.0, &[4])?;
        let p = r.normal(0.0, 1.0, &[4])?;
        let (_, cache) = nn::fully_connected(&x, &w, &b)?;
        let (gx, gw, gb) = nn::fully_connected_backward(&cache, &p)?;
        let f = |x: &Tensor, w: &Tensor, b: &Tensor| {
            probe_dot(&nn::fully_connected(x, w, b).unwrap().0, &p)
        };
        let nx = central_difference(&x, EPS, |t| f(t, &w, &b));
        let nw = central_difference(&w, EPS, |t| f(&x, t, &b));
        let nb = central_difference(&b, EPS, |t| f(&x, &w, t));
        Ok(rel_err(&gx, &nx).max(rel_err(&gw, &nw)).max(rel_err(&gb, &nb)))
    }

    pub fn global_avg_pool(seed: u64, _: SlopeFn) -> Result<f64> {
        let mut r = rng(seed, 4);
        let x = r.normal(0.0, 1.0, &[3, 4, 5])?;
        let p = r.normal(0.0, 1.0, &[3])?;
        let (_, cache) = nn::global_avg_pool(&x)?;
        let g = nn::global_avg_pool_backward(&cache, &p)?;
        let n = central_difference(&x, EPS, |t| probe_dot(&nn::global_avg_pool(t).unwrap().0, &p));
        Ok(rel_err(&g, &n))
    }

    pub fn max_pool(seed: u64, _: SlopeFn) -> Result<f64> {
        let mut r = rng(seed, 5);
        let x = r.normal(0.0, 1.0, &[2, 7, 7])?;
        let (y, cache) = nn::max_pool(&x, 3)?;
        let p = r.normal(0.0, 1.0, y.shape())?;
        let g = nn::max_pool_backward(&cache, &p)?;
        let n = central_difference(&x, EPS, |t| probe_dot(&nn::max_pool(t, 3).unwrap().0, &p));
        Ok(rel_err(&g, &n))
    }

    pub fn softmax2d(seed: u64, _: SlopeFn) -> Result<f64> {
        let mut r = rng(seed, 6);
        let m = r.normal(0.0, 1.0, &[4, 5])?;
        let p = r.normal(0.0, 1.0, &[4, 5])?;
        let (_, cache) = nn::softmax2d(&m)?;
        let g = nn::softmax2d_backward(&cache, &p)?;
        let n = central_difference(&m, EPS, |t| probe_dot(&nn::softmax2d(t).unwrap().0, &p));
        Ok(rel_err(&g, &n))
    }

    pub fn cross_entropy(seed: u64, _: SlopeFn) -> Result<f64> {
        let mut r = rng(seed, 7);
        let l = r.normal(0.0, 2.0, &[6])?;
        let label = r.below(6);
        let (_, cache) = nn::cross_entropy(&l, label)?;
        let g = nn::cross_entropy_backward(&cache, 1.0);
        let n = central_difference(&l, EPS, |t| nn::cross_entropy(t, label).unwrap().0);
        Ok(rel_err(&g, &n))
    }

    pub fn group_pool(seed: u64, _: SlopeFn) -> Result<f64> {
        let mut r = rng(seed, 8);
        let x = r.normal(0.0, 1.0, &[4, 3, 3])?;
        let w = r.normal(0.0, 1.0, &[6, 4, 1, 1])?;
        let b = r.normal(0.0, 1.0, &[6])?;
        let (m, cache) = dlfs::group_channel_pool(&x, &w, &b, 3)?;
        let p = r.normal(0.0, 1.0, m.shape())?;
        let (gx, gw, gb) = dlfs::group_channel_pool_backward(&cache, &p)?;
        let f = |x: &Tensor, w: &Tensor, b: &Tensor| {
            probe_dot(&dlfs::group_channel_pool(x, w, b, 3).unwrap().0, &p)
        };
        let nx = central_difference(&x, EPS, |t| f(t, &w, &b));
        let nw = central_difference(&w, EPS, |t| f(&x, t, &b));
        let nb = central_difference(&b, EPS, |t| f(&x, &w, t));
        Ok(rel_err(&gx, &nx).max(rel_err(&gw, &nw)).max(rel_err(&gb, &nb)))
    }

    fn coord_probe(r: &mut Rng, k: usize) -> Vec<(f64, f64)> {
        (0..k)
            .map(|_| (r.normal_scalar(0.0, 1.0), r.normal_scalar(0.0, 1.0)))
            .collect()
    }

    fn coord_dot(coords: &[(f64, f64)], probe: &[(f64, f64)]) -> f64 {
        coords
            .iter()
            .zip(probe)
            .map(|(c, p)| c.0 * p.0 + c.1 * p.1)
            .sum()
    }

    pub fn soft_keypoints(seed: u64, _: SlopeFn) -> Result<f64> {
        let mut r = rng(seed, 9);
        let m = r.normal(0.0, 1.5, &[3, 4, 5])?;
        let probe = coord_probe(&mut r, 3);
        let (_, cache) = dlfs::soft_keypoints(&m)?;
        let g = dlfs::soft_keypoints_backward(&cache, &probe)?;
        let n = central_difference(&m, EPS, |t| {
            coord_dot(&dlfs::soft_keypoints(t).unwrap().0.coords, &probe)
        });
        Ok(rel_err(&g, &n))
    }

    /// Keypoints whose pixel positions stay at least 1e-3 from grid nodes.
    fn smooth_coords(r: &mut Rng, k: usize, h: usize, w: usize) -> Vec<(f64, f64)> {
        let far = |c: f64, n: usize| {
            let p = dlfs::to_pixel(c, n);
            (p - p.round()).abs() > 1e-3
        };
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let (x, y) = (r.uniform_scalar(-0.999, 0.999), r.uniform_scalar(-0.999, 0.999));
            if far(x, w) && far(y, h) {
                out.push((x, y));
            }
        }
        out
    }

    pub fn bilinear_features(seed: u64, slope: SlopeFn) -> Result<f64> {
        let mut r = rng(seed, 10);
        let f = r.normal(0.0, 1.0, &[3, 4, 5])?;
        let coords = smooth_coords(&mut r, 4, 4, 5);
        let p = r.normal(0.0, 1.0, &[4, 3])?;
        let (_, cache) = dlfs::bilinear_sample(&f, &coords)?;
        let (gf, _) = dlfs::bilinear_sample_backward_with(&cache, &p, slope)?;
        let n = central_difference(&f, EPS, |t| {
            probe_dot(&dlfs::bilinear_sample(t, &coords).unwrap().0, &p)
        });
        Ok(rel_err(&gf, &n))
    }

    pub fn bilinear_coords(seed: u64, slope: SlopeFn) -> Result<f64> {
        let mut r = rng(seed, 11);
        let f = r.normal(0.0, 1.0, &[3, 4, 5])?;
        let coords = smooth_coords(&mut r, 4, 4, 5);
        let p = r.normal(0.0, 1.0, &[4, 3])?;
        let (_, cache) = dlfs::bilinear_sample(&f, &coords)?;
        let (_, gc) = dlfs::bilinear_sample_backward_with(&cache, &p, slope)?;
        let analytic = Tensor::new(&[4, 2], gc.iter().flat_map(|&(x, y)| [x, y]).collect())?;
        let flat = Tensor::new(&[4, 2], coords.iter().flat_map(|&(x, y)| [x, y]).collect())?;
        let numeric = central_difference(&flat, 1e-7, |t| {
            let c: Vec<(f64, f64)> = t.data().chunks(2).map(|v| (v[0], v[1])).collect();
            probe_dot(&dlfs::bilinear_sample(&f, &c).unwrap().0, &p)
        });
        Ok(rel_err(&analytic, &numeric))
    }

    pub fn dlfs_multiscale(seed: u64, _: SlopeFn) -> Result<f64> {
        let mut r = rng(seed, 12);
        let cfg = DlfsConfig {
            scales: vec![
                ScaleConfig {
                    keypoints: 2,
                    channels: 4,
                },
                ScaleConfig {
                    keypoints: 1,
                    channels: 2,
                },
            ],
            stages: vec![PyramidStage {
                kernel: 3,
                stride: 2,
            }],
        };
        let cf = 2;
        let f_rgb = r.normal(0.0, 1.0, &[cf, 7, 7])?;
        let f_d = r.normal(0.0, 1.0, &[cf, 7, 7])?;
        let ts = vec![
            r.normal(0.0, 0.5, &[4, 2 * cf, 1, 1])?,
            r.normal(0.0, 0.5, &[4])?,
            r.normal(0.0, 0.5, &[2, 2 * cf, 1, 1])?,
            r.normal(0.0, 0.5, &[2])?,
            r.normal(0.0, 0.5, &[cf, cf, 3, 3])?,
            r.normal(0.0, 0.5, &[cf])?,
            r.normal(0.0, 0.5, &[cf, cf, 3, 3])?,
            r.normal(0.0, 0.5, &[cf])?,
        ];
        let forward = |fr: &Tensor, fd: &Tensor, ts: &[Tensor]| {
            let w = dlfs::DlfsWeights {
                scales: vec![
                    dlfs::ScaleWeights { w: &ts[0], b: &ts[1] },
                    dlfs::ScaleWeights { w: &ts[2], b: &ts[3] },
                ],
                stages: vec![dlfs::StageWeights {
                    rgb_w: &ts[4],
                    rgb_b: &ts[5],
                    d_w: &ts[6],
                    d_b: &ts[7],
                }],
            };
            dlfs::dlfs_forward(fr, fd, &cfg, &w)
        };
        let (out, cache) = forward(&f_rgb, &f_d, &ts)?;
        let mut gin = dlfs::DlfsGradIn::zeros_like(&out);
        let mut probes = Vec::new();
        for s in 0..2 {
            let pr = r.normal(0.0, 1.0, out.selected[s].e_rgb.shape())?;
            let pd = r.normal(0.0, 1.0, out.selected[s].e_d.shape())?;
            let pm = r.normal(0.0, 1.0, out.keypoints[s].grouped.shape())?;
            gin.selected[s].e_rgb = pr.clone();
            gin.selected[s].e_d = pd.clone();
            gin.grouped[s] = Some(pm.clone());
            probes.push((pr, pd, pm));
        }
        let objective = |o: &dlfs::DlfsOutput| -> f64 {
            (0..2)
                .map(|s| {
                    o.selected[s].e_rgb.dot(&probes[s].0)
                        + o.selected[s].e_d.dot(&probes[s].1)
                        + o.keypoints[s].grouped.dot(&probes[s].2)
                })
                .sum()
        };
        let g = dlfs::dlfs_backward(&cache, &gin)?;
        let mut worst = rel_err(
            &g.f_rgb,
            &five_point_difference(&f_rgb, EPS_WIDE, |t| objective(&forward(t, &f_d, &ts).unwrap().0)),
        );
        worst = worst.max(rel_err(
            &g.f_d,
            &five_point_difference(&f_d, EPS_WIDE, |t| objective(&forward(&f_rgb, t, &ts).unwrap().0)),
        ));
        let analytic = [
            &g.scales[0].w,
            &g.scales[0].b,
            &g.scales[1].w,
            &g.scales[1].b,
            &g.stages[0].rgb_w,
            &g.stages[0].rgb_b,
            &g.stages[0].d_w,
            &g.stages[0].d_b,
        ];
        for (i, a) in analytic.iter().enumerate() {
            let mut probe = ts.clone();
            let n = five_point_difference(&ts[i], EPS_WIDE, |t| {
                probe[i] = t.clone();
                objective(&forward(&f_rgb, &f_d, &probe).unwrap().0)
            });
            worst = worst.max(rel_err(a, &n));
        }
        Ok(worst)
    }

    pub fn vi(seed: u64, _: SlopeFn) -> Result<f64> {
        let mut r = rng(seed, 13);
        let (k, n) = (3, 4);
        let m = r.normal(0.0, 1.0, &[k, 5, 5])?;
        let w = r.normal(0.0, 0.5, &[n, k, 2, 2])?;
        let b = r.normal(0.0, 0.5, &[n])?;
        let ls = r.normal(0.0, 0.3, &[n])?;
        let label = r.below(n);
        let loss = |m: &Tensor, w: &Tensor, b: &Tensor, ls: &Tensor| {
            let head = losses::ViHead {
                pool_size: 2,
                conv_w: w,
                conv_b: b,
                log_sigma: ls,
            };
            losses::vi_loss(m, label, &head).unwrap()
        };
        let (_, cache) = loss(&m, &w, &b, &ls);
        let g = losses::vi_loss_backward(&cache, 1.0)?;
        let e = rel_err(&g.m, &central_difference(&m, EPS, |t| loss(t, &w, &b, &ls).0))
            .max(rel_err(&g.conv_w, &central_difference(&w, EPS, |t| loss(&m, t, &b, &ls).0)))
            .max(rel_err(&g.conv_b, &central_difference(&b, EPS, |t| loss(&m, &w, t, &ls).0)))
            .max(rel_err(
                &g.log_sigma,
                &central_difference(&ls, EPS, |t| loss(&m, &w, &b, t).0),
            ));
        Ok(e)
    }

    pub fn corr(seed: u64, _: SlopeFn) -> Result<f64> {
        let mut r = rng(seed, 14);
        let a = r.normal(0.0, 1.0, &[3, 4])?;
        let b = r.normal(0.0, 1.0, &[3, 4])?;
        let (_, cache) = losses::multimodal_corr_loss(&a, &b)?;
        let (ga, gb) = losses::multimodal_corr_loss_backward(&cache, 1.0);
        let na = central_difference(&a, EPS, |t| losses::multimodal_corr_loss(t, &b).unwrap().0);
        let nb = central_difference(&b, EPS, |t| losses::multimodal_corr_loss(&a, t).unwrap().0);
        Ok(rel_err(&ga, &na).max(rel_err(&gb, &nb)))
    }

    pub fn triplet(seed: u64, _: SlopeFn) -> Result<f64> {
        let mut r = rng(seed, 15);
        let a = r.normal(0.0, 1.0, &[3, 4])?;
        let p = r.normal(0.0, 1.0, &[3, 4])?;
        let n = r.normal(0.0, 1.0, &[3, 4])?;
        let m = losses::TRIPLET_MARGIN;
        let (_, cache) = losses::triplet_corr_loss(&a, &p, &n, m)?;
        let (ga, gp, gn) = losses::triplet_corr_loss_backward(&cache, 1.0);
        let f = |a: &Tensor, p: &Tensor, n: &Tensor| losses::triplet_corr_loss(a, p, n, m).unwrap().0;
        let e = rel_err(&ga, &central_difference(&a, EPS, |t| f(t, &p, &n)))
            .max(rel_err(&gp, &central_difference(&p, EPS, |t| f(&a, t, &n))))
            .max(rel_err(&gn, &central_difference(&n, EPS, |t| f(&a, &p, t))));
        Ok(e)
    }

    pub fn aux(seed: u64, _: SlopeFn) -> Result<f64> {
        let mut r = rng(seed, 16);
        let a = r.normal(0.0, 2.0, &[5])?;
        let b = r.normal(0.0, 2.0, &[5])?;
        let label = r.below(5);
        let (_, cache) = losses::aux_ce_loss(&a, &b, label)?;
        let (ga, gb) = losses::aux_ce_loss_backward(&cache, 1.0);
        let na = central_difference(&a, EPS, |t| losses::aux_ce_loss(t, &b, label).unwrap().0);
        let nb = central_difference(&b, EPS, |t| losses::aux_ce_loss(&a, t, label).unwrap().0);
        Ok(rel_err(&ga, &na).max(rel_err(&gb, &nb)))
    }

    pub fn micro_config() -> ModelConfig {
        ModelConfig {
            input_size: (8, 8),
            input_channels: 3,
            channels: vec![2, 3],
            num_classes: 2,
            global_dim: 4,
            dlfs: DlfsConfig::single_scale(2, 4),
            vi_pool: 2,
        }
    }

    fn model(seed: u64, terms: LossTerms) -> Result<f64> {
        let report = model_gradcheck(&micro_config(), 1000 + seed, 4, &terms, |_| true)?;
        Ok(report.iter().map(|(_, e)| *e).fold(0.0, f64::max))
    }

    fn only(cls: bool, aux: bool, vi: bool, corr: bool) -> LossTerms {
        LossTerms {
            use_cls: cls,
            use_aux: aux,
            use_vi: vi,
            use_corr: corr,
            ..Default::default()
        }
    }

    pub fn model_cls(seed: u64, _: SlopeFn) -> Result<f64> {
        model(seed, only(true, false, false, false))
    }

    pub fn model_aux(seed: u64, _: SlopeFn) -> Result<f64> {
        model(seed, only(false, true, false, false))
    }

    pub fn model_vi(seed: u64, _: SlopeFn) -> Result<f64> {
        model(seed, only(false, false, true, false))
    }

    pub fn model_corr(seed: u64, _: SlopeFn) -> Result<f64> {
        model(seed, only(false, false, false, true))
    }

    pub fn model_total(seed: u64, _: SlopeFn) -> Result<f64> {
        model(seed, LossTerms::default())
    }
}

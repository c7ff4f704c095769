//! Differentiable local feature selection.
//!
//! From the aligned feature maps of the two modalities, a 1×1 convolution over their
//! channel concatenation produces `C` response channels. They are summed in `K` groups
//! of `C/K` into part-response maps `M`; each map goes through a spatial softmax whose
//! expected grid position is a keypoint. Both modalities are then bilinearly sampled at
//! the same keypoints. Everything is differentiable, including the sampling position.
//!
//! Coordinates are normalized to `[-1, 1]`: `x` runs along the width axis (column `v`)
//! and `y` along the height axis (row `u`), with grid nodes at `2v/(W-1) - 1`. A keypoint
//! at normalized `x` sits at pixel `(x + 1)(W - 1)/2`.

use crate::error::{shape_mismatch, Error, Result};
use crate::nn::{conv2d, relu_backward, softmax_in_place, Conv2dCache};
use crate::tensor::Tensor;

/// Slack allowed on coordinates that drift outside `[-1, 1]` through rounding.
pub const COORD_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleConfig {
    /// Keypoints predicted at this scale.
    pub keypoints: usize,
    /// Output channels of the 1×1 convolution; must be a multiple of `keypoints`.
    pub channels: usize,
}

/// Convolution producing one pyramid level from the previous one (padding 0, then ReLU).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidStage {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DlfsConfig {
    pub scales: Vec<ScaleConfig>,
    /// One stage per scale after the first.
    pub stages: Vec<PyramidStage>,
}

impl Default for DlfsConfig {
    fn default() -> Self {
        Self {
            scales: vec![
                ScaleConfig {
                    keypoints: 16,
                    channels: 32,
                },
                ScaleConfig {
                    keypoints: 4,
                    channels: 32,
                },
            ],
            stages: vec![PyramidStage {
                kernel: 3,
                stride: 2,
            }],
        }
    }
}

impl DlfsConfig {
    pub fn single_scale(keypoints: usize, channels: usize) -> Self {
        Self {
            scales: vec![ScaleConfig {
                keypoints,
                channels,
            }],
            stages: Vec::new(),
        }
    }

    /// No local branch at all.
    pub fn disabled() -> Self {
        Self {
            scales: Vec::new(),
            stages: Vec::new(),
        }
    }

    pub fn is_enabled(&self) -> bool {
        !self.scales.is_empty()
    }

    pub fn total_keypoints(&self) -> usize {
        self.scales.iter().map(|s| s.keypoints).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.scales {
            if s.keypoints == 0 {
                return Err(Error::BadConfig("keypoint count must be >= 1".into()));
            }
            if s.channels % s.keypoints != 0 {
                return Err(Error::DivisibilityViolation {
                    channels: s.channels,
                    k: s.keypoints,
                });
            }
        }
        if self.is_enabled() && self.stages.len() + 1 != self.scales.len() {
            return Err(Error::BadConfig(format!(
                "{} scales need {} pyramid stages, got {}",
                self.scales.len(),
                self.scales.len() - 1,
                self.stages.len()
            )));
        }
        Ok(())
    }

    /// Spatial size of every scale given the size of the first.
    pub fn scale_sizes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let mut sizes = Vec::with_capacity(self.scales.len());
        if self.scales.is_empty() {
            return Ok(sizes);
        }
        sizes.push((h, w));
        for st in &self.stages {
            let (ph, pw) = *sizes.last().unwrap();
            sizes.push((
                crate::nn::conv_output_size(ph, st.kernel, st.stride, 0)?,
                crate::nn::conv_output_size(pw, st.kernel, st.stride, 0)?,
            ));
        }
        Ok(sizes)
    }
}

/// Normalized coordinate of grid index `i` on an axis of length `n`.
pub fn grid_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

/// Pixel position of a normalized coordinate on an axis of length `n`.
pub fn to_pixel(coord: f64, n: usize) -> f64 {
    (coord + 1.0) * (n.saturating_sub(1)) as f64 / 2.0
}

/// Tent kernel `max(0, 1 - |p - node|)`.
pub fn tent(node: f64, p: f64) -> f64 {
    (1.0 - (p - node).abs()).max(0.0)
}

/// Derivative of the tent kernel with respect to the sample position `p`: zero at
/// distance ≥ 1, `+1` when the node is at or beyond `p`, `-1` otherwise.
pub fn tent_slope(node: f64, p: f64) -> f64 {
    if (node - p).abs() >= 1.0 {
        0.0
    } else if node >= p {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    /// `(x, y)` per keypoint, normalized.
    pub coords: Vec<(f64, f64)>,
    /// Attention distributions, `K×H×W`.
    pub attn: Tensor,
    /// Part-response maps the attention came from, `K×H×W`.
    pub grouped: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedFeatures {
    pub e_rgb: Tensor,
    pub e_d: Tensor,
}

#[derive(Debug, Clone)]
pub struct GroupPoolCache {
    conv: Conv2dCache,
    keypoints: usize,
    group: usize,
}

/// 1×1 convolution of `f_rgbd` followed by summing channel groups of size `C/K`.
pub fn group_channel_pool(
    f_rgbd: &Tensor,
    w: &Tensor,
    b: &Tensor,
    keypoints: usize,
) -> Result<(Tensor, GroupPoolCache)> {
    let channels = w.shape().first().copied().unwrap_or(0);
    if keypoints == 0 || channels % keypoints != 0 {
        return Err(Error::DivisibilityViolation {
            channels,
            k: keypoints,
        });
    }
    if w.rank() != 4 || w.shape()[2] != 1 {
        return Err(shape_mismatch(w.shape(), &[channels, f_rgbd.shape()[0], 1, 1]));
    }
    let (v, conv) = conv2d(f_rgbd, w, b, 1, 0)?;
    let (h, wd) = (v.shape()[1], v.shape()[2]);
    let hw = h * wd;
    let group = channels / keypoints;
    let mut m = vec![0.0; keypoints * hw];
    for (j, out) in m.chunks_exact_mut(hw).enumerate() {
        for i in 0..group {
            let ch = &v.data()[(j * group + i) * hw..(j * group + i + 1) * hw];
            crate::tensor::axpy(1.0, ch, out);
        }
    }
    Ok((
        Tensor::new(&[keypoints, h, wd], m)?,
        GroupPoolCache {
            conv,
            keypoints,
            group,
        },
    ))
}

/// Returns `(grad_f_rgbd, grad_w, grad_b)`.
pub fn group_channel_pool_backward(
    cache: &GroupPoolCache,
    grad_m: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [_, h, w] = cache.conv.output_shape();
    if grad_m.shape() != [cache.keypoints, h, w] {
        return Err(shape_mismatch(grad_m.shape(), &[cache.keypoints, h, w]));
    }
    let hw = h * w;
    let mut gv = Vec::with_capacity(cache.keypoints * cache.group * hw);
    for gm in grad_m.data().chunks_exact(hw) {
        for _ in 0..cache.group {
            gv.extend_from_slice(gm);
        }
    }
    let gv = Tensor::new(&[cache.keypoints * cache.group, h, w], gv)?;
    let (gx, gw, gb) = cache.conv.backward(&gv, true)?;
    Ok((gx.expect("input grad requested"), gw, gb))
}

#[derive(Debug, Clone)]
pub struct SoftKeypointCache {
    attn: Tensor,
}

/// Spatial softmax per part-response map and the expected grid coordinate under it.
pub fn soft_keypoints(m: &Tensor) -> Result<(KeypointSet, SoftKeypointCache)> {
    if m.rank() != 3 {
        return Err(shape_mismatch(m.shape(), &[0, 0, 0]));
    }
    let (k, h, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
    let mut attn = m.clone();
    let mut coords = Vec::with_capacity(k);
    for a in attn.data_mut().chunks_exact_mut(h * w) {
        softmax_in_place(a);
        let (mut x, mut y) = (0.0, 0.0);
        for u in 0..h {
            let gy = grid_coord(u, h);
            for v in 0..w {
                let p = a[u * w + v];
                x += grid_coord(v, w) * p;
                y += gy * p;
            }
        }
        coords.push((x.clamp(-1.0, 1.0), y.clamp(-1.0, 1.0)));
    }
    Ok((
        KeypointSet {
            coords,
            attn: attn.clone(),
            grouped: m.clone(),
        },
        SoftKeypointCache { attn },
    ))
}

/// Gradient of the part-response maps given gradients on the keypoint coordinates.
pub fn soft_keypoints_backward(cache: &SoftKeypointCache, grad_coords: &[(f64, f64)]) -> Result<Tensor> {
    let (k, h, w) = (
        cache.attn.shape()[0],
        cache.attn.shape()[1],
        cache.attn.shape()[2],
    );
    if grad_coords.len() != k {
        return Err(shape_mismatch(&[grad_coords.len()], &[k]));
    }
    let mut gm = Tensor::zeros(&[k, h, w]);
    for ((a, g), &(gx, gy)) in cache
        .attn
        .data()
        .chunks_exact(h * w)
        .zip(gm.data_mut().chunks_exact_mut(h * w))
        .zip(grad_coords)
    {
        // grad w.r.t. the attention map is linear: gx·x̃(v) + gy·ỹ(u)
        let mut inner = 0.0;
        for u in 0..h {
            for v in 0..w {
                let gh = gx * grid_coord(v, w) + gy * grid_coord(u, h);
                g[u * w + v] = gh;
                inner += a[u * w + v] * gh;
            }
        }
        for (gi, &ai) in g.iter_mut().zip(a) {
            *gi = ai * (*gi - inner);
        }
    }
    Ok(gm)
}

#[derive(Debug, Clone)]
pub struct BilinearCache {
    features: Tensor,
    coords: Vec<(f64, f64)>,
}

impl BilinearCache {
    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }
}

/// Nodes with nonzero tent weight or slope around pixel position `p` on an axis of length `n`.
fn support(p: f64, n: usize) -> impl Iterator<Item = usize> {
    let lo = p.floor().max(0.0) as usize;
    (lo..(lo + 2).min(n)).filter(move |&i| (i as f64 - p).abs() < 1.0)
}

fn checked_coord(c: f64) -> Result<f64> {
    if !(c.abs() <= 1.0 + COORD_SLACK) {
        return Err(Error::CoordOutOfRange(c));
    }
    Ok(c.clamp(-1.0, 1.0))
}

/// Samples a `C×H×W` map at each keypoint with the tent kernel; returns `K×C`.
pub fn bilinear_sample(f: &Tensor, coords: &[(f64, f64)]) -> Result<(Tensor, BilinearCache)> {
    if f.rank() != 3 {
        return Err(shape_mismatch(f.shape(), &[0, 0, 0]));
    }
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let coords = coords
        .iter()
        .map(|&(x, y)| Ok((checked_coord(x)?, checked_coord(y)?)))
        .collect::<Result<Vec<_>>>()?;
    let fd = f.data();
    let mut out = vec![0.0; coords.len() * c];
    for (row, &(x, y)) in out.chunks_exact_mut(c).zip(&coords) {
        let (px, py) = (to_pixel(x, w), to_pixel(y, h));
        for u in support(py, h) {
            let wy = tent(u as f64, py);
            for v in support(px, w) {
                let wt = wy * tent(v as f64, px);
                for (ch, o) in row.iter_mut().enumerate() {
                    *o += fd[(ch * h + u) * w + v] * wt;
                }
            }
        }
    }
    Ok((
        Tensor::new(&[coords.len(), c], out)?,
        BilinearCache {
            features: f.clone(),
            coords,
        },
    ))
}

/// Returns `(grad_f, grad_coords)`.
pub fn bilinear_sample_backward(
    cache: &BilinearCache,
    grad_e: &Tensor,
) -> Result<(Tensor, Vec<(f64, f64)>)> {
    bilinear_sample_backward_with(cache, grad_e, tent_slope)
}

/// [`bilinear_sample_backward`] with a caller-supplied tent derivative. Exists so the
/// gradient checker can be shown to catch a wrong derivative.
pub fn bilinear_sample_backward_with(
    cache: &BilinearCache,
    grad_e: &Tensor,
    slope: fn(f64, f64) -> f64,
) -> Result<(Tensor, Vec<(f64, f64)>)> {
    let f = &cache.features;
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let k = cache.coords.len();
    if grad_e.shape() != [k, c] {
        return Err(shape_mismatch(grad_e.shape(), &[k, c]));
    }
    let fd = f.data();
    let mut gf = Tensor::zeros(f.shape());
    let gfd = gf.data_mut();
    let mut gcoords = Vec::with_capacity(k);
    let sx = (w.saturating_sub(1)) as f64 / 2.0;
    let sy = (h.saturating_sub(1)) as f64 / 2.0;
    for (ge, &(x, y)) in grad_e.data().chunks_exact(c).zip(&cache.coords) {
        let (px, py) = (to_pixel(x, w), to_pixel(y, h));
        let (mut gpx, mut gpy) = (0.0, 0.0);
        for u in support(py, h) {
            let wy = tent(u as f64, py);
            let dy = slope(u as f64, py);
            for v in support(px, w) {
                let wx = tent(v as f64, px);
                let dx = slope(v as f64, px);
                let wt = wx * wy;
                let mut proj = 0.0;
                for (ch, &g) in ge.iter().enumerate() {
                    let idx = (ch * h + u) * w + v;
                    gfd[idx] += g * wt;
                    proj += g * fd[idx];
                }
                gpx += proj * dx * wy;
                gpy += proj * wx * dy;
            }
        }
        gcoords.push((gpx * sx, gpy * sy));
    }
    Ok((gf, gcoords))
}

/// Weight references for a DLFS forward.
#[derive(Debug, Clone, Copy)]
pub struct ScaleWeights<'a> {
    /// `C × 2C_f × 1 × 1`
    pub w: &'a Tensor,
    pub b: &'a Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct StageWeights<'a> {
    pub rgb_w: &'a Tensor,
    pub rgb_b: &'a Tensor,
    pub d_w: &'a Tensor,
    pub d_b: &'a Tensor,
}

#[derive(Debug, Clone)]
pub struct DlfsWeights<'a> {
    pub scales: Vec<ScaleWeights<'a>>,
    pub stages: Vec<StageWeights<'a>>,
}

#[derive(Debug, Clone)]
pub struct ScaleGrads {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct StageGrads {
    pub rgb_w: Tensor,
    pub rgb_b: Tensor,
    pub d_w: Tensor,
    pub d_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct DlfsGrads {
    pub f_rgb: Tensor,
    pub f_d: Tensor,
    pub scales: Vec<ScaleGrads>,
    pub stages: Vec<StageGrads>,
}

#[derive(Debug, Clone)]
pub struct DlfsOutput {
    /// Per scale.
    pub selected: Vec<SelectedFeatures>,
    /// Per scale.
    pub keypoints: Vec<KeypointSet>,
}

impl DlfsOutput {
    /// Selected features of all scales stacked row-wise.
    pub fn concatenated(&self) -> Result<SelectedFeatures> {
        let rgb: Vec<&Tensor> = self.selected.iter().map(|s| &s.e_rgb).collect();
        let d: Vec<&Tensor> = self.selected.iter().map(|s| &s.e_d).collect();
        Ok(SelectedFeatures {
            e_rgb: Tensor::concat0(&rgb)?,
            e_d: Tensor::concat0(&d)?,
        })
    }
}

#[derive(Debug, Clone)]
struct StageCache {
    rgb: Conv2dCache,
    d: Conv2dCache,
    rgb_out: Tensor,
    d_out: Tensor,
}

#[derive(Debug, Clone)]
struct ScaleCache {
    channels_f: usize,
    pool: GroupPoolCache,
    keypoints: SoftKeypointCache,
    rgb: BilinearCache,
    d: BilinearCache,
}

#[derive(Debug, Clone)]
pub struct DlfsCache {
    input_shape: Vec<usize>,
    stages: Vec<StageCache>,
    scales: Vec<ScaleCache>,
}

/// Full multi-scale selection. `f_rgb` and `f_d` must share a shape.
pub fn dlfs_forward(
    f_rgb: &Tensor,
    f_d: &Tensor,
    config: &DlfsConfig,
    weights: &DlfsWeights<'_>,
) -> Result<(DlfsOutput, DlfsCache)> {
    config.validate()?;
    if f_rgb.shape() != f_d.shape() || f_rgb.rank() != 3 {
        return Err(shape_mismatch(f_rgb.shape(), f_d.shape()));
    }
    if weights.scales.len() != config.scales.len() || weights.stages.len() != config.stages.len()
    {
        return Err(Error::BadConfig("weights do not match the DLFS config".into()));
    }
    let mut out = DlfsOutput {
        selected: Vec::new(),
        keypoints: Vec::new(),
    };
    let mut cache = DlfsCache {
        input_shape: f_rgb.shape().to_vec(),
        stages: Vec::new(),
        scales: Vec::new(),
    };
    let mut rgb = f_rgb.clone();
    let mut d = f_d.clone();
    for (s, (sc, sw)) in config.scales.iter().zip(&weights.scales).enumerate() {
        if s > 0 {
            let st = &config.stages[s - 1];
            let stw = &weights.stages[s - 1];
            let (r, rc) = conv2d(&rgb, stw.rgb_w, stw.rgb_b, st.stride, 0)?;
            let (dd, dc) = conv2d(&d, stw.d_w, stw.d_b, st.stride, 0)?;
            rgb = r.relu();
            d = dd.relu();
            cache.stages.push(StageCache {
                rgb: rc,
                d: dc,
                rgb_out: rgb.clone(),
                d_out: d.clone(),
            });
        }
        let f_rgbd = Tensor::concat0(&[&rgb, &d])?;
        let (m, pool) = group_channel_pool(&f_rgbd, sw.w, sw.b, sc.keypoints)?;
        let (kp, kcache) = soft_keypoints(&m)?;
        let (e_rgb, rgb_cache) = bilinear_sample(&rgb, &kp.coords)?;
        let (e_d, d_cache) = bilinear_sample(&d, &kp.coords)?;
        out.selected.push(SelectedFeatures { e_rgb, e_d });
        out.keypoints.push(kp);
        cache.scales.push(ScaleCache {
            channels_f: rgb.shape()[0],
            pool,
            keypoints: kcache,
            rgb: rgb_cache,
            d: d_cache,
        });
    }
    Ok((out, cache))
}

/// Upstream gradients for [`dlfs_backward`], per scale.
#[derive(Debug, Clone)]
pub struct DlfsGradIn {
    pub selected: Vec<SelectedFeatures>,
    /// Extra gradient arriving directly on the part-response maps (from the VI loss).
    pub grouped: Vec<Option<Tensor>>,
}

impl DlfsGradIn {
    pub fn zeros_like(out: &DlfsOutput) -> Self {
        Self {
            selected: out
                .selected
                .iter()
                .map(|s| SelectedFeatures {
                    e_rgb: Tensor::zeros(s.e_rgb.shape()),
                    e_d: Tensor::zeros(s.e_d.shape()),
                })
                .collect(),
            grouped: vec![None; out.selected.len()],
        }
    }
}

pub fn dlfs_backward(cache: &DlfsCache, grad: &DlfsGradIn) -> Result<DlfsGrads> {
    let n = cache.scales.len();
    if grad.selected.len() != n || grad.grouped.len() != n {
        return Err(Error::StaleCache);
    }
    // feature-map gradients per scale, filled from the coarsest scale back
    let mut g_rgb: Vec<Option<Tensor>> = vec![None; n];
    let mut g_d: Vec<Option<Tensor>> = vec![None; n];
    let mut scale_grads = Vec::with_capacity(n);
    let mut stage_grads = Vec::with_capacity(n.saturating_sub(1));
    for s in (0..n).rev() {
        let sc = &cache.scales[s];
        let (gf_rgb, gc_rgb) = bilinear_sample_backward(&sc.rgb, &grad.selected[s].e_rgb)?;
        let (gf_d, gc_d) = bilinear_sample_backward(&sc.d, &grad.selected[s].e_d)?;
        let gcoords: Vec<(f64, f64)> = gc_rgb
            .iter()
            .zip(&gc_d)
            .map(|(a, b)| (a.0 + b.0, a.1 + b.1))
            .collect();
        let mut gm = soft_keypoints_backward(&sc.keypoints, &gcoords)?;
        if let Some(extra) = &grad.grouped[s] {
            gm.add_assign(extra)?;
        }
        let (gx, gw, gb) = group_channel_pool_backward(&sc.pool, &gm)?;
        scale_grads.push(ScaleGrads { w: gw, b: gb });
        let cf = sc.channels_f;
        let half = gx.len() / 2;
        let mut hw_shape = gx.shape().to_vec();
        hw_shape[0] = cf;
        let mut r = Tensor::new(&hw_shape, gx.data()[..half].to_vec())?;
        let mut d = Tensor::new(&hw_shape, gx.data()[half..].to_vec())?;
        r.add_assign(&gf_rgb)?;
        d.add_assign(&gf_d)?;
        if let Some(extra) = g_rgb[s].take() {
            r.add_assign(&extra)?;
        }
        if let Some(extra) = g_d[s].take() {
            d.add_assign(&extra)?;
        }
        if s > 0 {
            let st = &cache.stages[s - 1];
            relu_backward(st.rgb_out.data(), r.data_mut());
            relu_backward(st.d_out.data(), d.data_mut());
            let (grx, grw, grb) = st.rgb.backward(&r, true)?;
            let (gdx, gdw, gdb) = st.d.backward(&d, true)?;
            stage_grads.push(StageGrads {
                rgb_w: grw,
                rgb_b: grb,
                d_w: gdw,
                d_b: gdb,
            });
            g_rgb[s - 1] = grx;
            g_d[s - 1] = gdx;
        } else {
            g_rgb[0] = Some(r);
            g_d[0] = Some(d);
        }
    }
    scale_grads.reverse();
    stage_grads.reverse();
    let (f_rgb, f_d) = if n == 0 {
        (
            Tensor::zeros(&cache.input_shape),
            Tensor::zeros(&cache.input_shape),
        )
    } else {
        (g_rgb[0].take().unwrap(), g_d[0].take().unwrap())
    };
    Ok(DlfsGrads {
        f_rgb,
        f_d,
        scales: scale_grads,
        stages: stage_grads,
    })
}

//! The two-branch network: per-modality convolutional backbones, a global branch with
//! auxiliary heads, the multi-scale local selection branch, and the fusion classifier.

use std::collections::BTreeMap;

use crate::dlfs::{
    dlfs_backward, dlfs_forward, DlfsCache, DlfsConfig, DlfsGradIn, DlfsOutput, DlfsWeights,
    ScaleWeights, SelectedFeatures, StageWeights,
};
use crate::error::{shape_mismatch, Error, Result};
use crate::losses::{
    aux_ce_loss, aux_ce_loss_backward, multimodal_corr_loss, multimodal_corr_loss_backward,
    total_loss, triplet_corr_loss, triplet_corr_loss_backward, vi_loss, vi_loss_backward,
    LossBundle, LossWeights, ViHead, TRIPLET_MARGIN,
};
use crate::nn::{
    conv2d, cross_entropy, cross_entropy_backward, fully_connected, fully_connected_backward,
    global_avg_pool, global_avg_pool_backward, max_pool, max_pool_backward, relu_backward,
    AdamConfig, Conv2dCache, FcCache, GapCache, MaxPoolCache, ParamTensor,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MODALITIES: [&str; 2] = ["rgb", "d"];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_size: (usize, usize),
    pub input_channels: usize,
    /// Output channels per backbone block. Every block but the last halves the resolution.
    pub channels: Vec<usize>,
    pub num_classes: usize,
    /// Width of the global feature vectors entering the fusion layer.
    pub global_dim: usize,
    pub dlfs: DlfsConfig,
    pub vi_pool: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: (32, 32),
            input_channels: 3,
            channels: vec![16, 32, 32],
            num_classes: 6,
            global_dim: 64,
            dlfs: DlfsConfig::default(),
            vi_pool: crate::losses::VI_POOL_SIZE,
        }
    }
}

impl ModelConfig {
    /// Shape of each backbone's final feature map.
    pub fn feature_shape(&self) -> Result<[usize; 3]> {
        let (mut h, mut w) = self.input_size;
        let blocks = self.channels.len();
        for _ in 0..blocks.saturating_sub(1) {
            h /= 2;
            w /= 2;
        }
        let c = *self
            .channels
            .last()
            .ok_or_else(|| Error::BadConfig("backbone needs at least one block".into()))?;
        Ok([c, h, w])
    }

    /// Input pixels per final-feature pixel.
    pub fn total_stride(&self) -> usize {
        1 << self.channels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::BadConfig("need at least two classes".into()));
        }
        if self.channels.contains(&0) || self.global_dim == 0 || self.input_channels == 0
        {
            return Err(Error::BadConfig("zero-width layer".into()));
        }
        let [_, h, w] = self.feature_shape()?;
        if h < 3 || w < 3 {
            return Err(Error::BadConfig(format!(
                "final feature map {h}x{w} is smaller than 3x3"
            )));
        }
        self.dlfs.validate()?;
        for (h, w) in self.dlfs.scale_sizes(h, w)? {
            if self.vi_pool == 0 || self.vi_pool > h.min(w) {
                return Err(Error::BadConfig(format!(
                    "VI pool size {} does not fit a {h}x{w} scale",
                    self.vi_pool
                )));
            }
        }
        Ok(())
    }

    /// Length of the fused global+local vector.
    pub fn fusion_dim(&self) -> Result<usize> {
        let [cf, _, _] = self.feature_shape()?;
        Ok(2 * self.global_dim + 2 * self.dlfs.total_keypoints() * cf)
    }

    /// Every parameter path with its shape, in a fixed order.
    pub fn manifest(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        let mut out = Vec::new();
        let [cf, _, _] = self.feature_shape()?;
        let n = self.num_classes;
        for m in MODALITIES {
            let mut cin = self.input_channels;
            for (i, &c) in self.channels.iter().enumerate() {
                out.push((format!("{m}.block{}.conv.w", i + 1), vec![c, cin, 3, 3]));
                out.push((format!("{m}.block{}.conv.b", i + 1), vec![c]));
                cin = c;
            }
            out.push((format!("{m}.global.fc.w"), vec![self.global_dim, cf]));
            out.push((format!("{m}.global.fc.b"), vec![self.global_dim]));
            out.push((format!("{m}.global.head.w"), vec![n, self.global_dim]));
            out.push((format!("{m}.global.head.b"), vec![n]));
        }
        for (s, sc) in self.dlfs.scales.iter().enumerate() {
            let s = s + 1;
            if s > 1 {
                let st = self.dlfs.stages[s - 2];
                for m in MODALITIES {
                    out.push((
                        format!("dlfs.scale{s}.pyramid.{m}.w"),
                        vec![cf, cf, st.kernel, st.kernel],
                    ));
                    out.push((format!("dlfs.scale{s}.pyramid.{m}.b"), vec![cf]));
                }
            }
            out.push((format!("dlfs.scale{s}.conv.w"), vec![sc.channels, 2 * cf, 1, 1]));
            out.push((format!("dlfs.scale{s}.conv.b"), vec![sc.channels]));
            let p = self.vi_pool;
            out.push((format!("vi.scale{s}.conv.w"), vec![n, sc.keypoints, p, p]));
            out.push((format!("vi.scale{s}.conv.b"), vec![n]));
            out.push((format!("vi.scale{s}.log_sigma"), vec![n]));
        }
        out.push(("fusion.fc.w".into(), vec![n, self.fusion_dim()?]));
        out.push(("fusion.fc.b".into(), vec![n]));
        Ok(out)
    }
}

/// Named learnable tensors plus a version counter that advances on every update.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    params: BTreeMap<String, ParamTensor>,
    version: u64,
}

/// Glorot-uniform weights, zero biases, `log σ = 0`.
pub fn init_params(config: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    let mut params = BTreeMap::new();
    for (path, shape) in config.manifest()? {
        let value = if path.ends_with(".b") || path.ends_with("log_sigma") {
            Tensor::zeros(&shape)
        } else {
            let receptive: usize = shape[2..].iter().product();
            let fan_in = shape[1] * receptive;
            let fan_out = shape[0] * receptive;
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            rng.uniform(-a, a, &shape)?
        };
        params.insert(path, ParamTensor::new(value));
    }
    Ok(ModelParams { params, version: 0 })
}

impl ModelParams {
    pub fn from_map(params: BTreeMap<String, ParamTensor>) -> Self {
        Self { params, version: 0 }
    }

    pub fn get(&self, path: &str) -> Result<&ParamTensor> {
        self.params
            .get(path)
            .ok_or_else(|| Error::BadConfig(format!("missing parameter {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut ParamTensor> {
        self.params
            .get_mut(path)
            .ok_or_else(|| Error::BadConfig(format!("missing parameter {path}")))
    }

    fn value(&self, path: &str) -> &Tensor {
        &self.params[path].value
    }

    fn accumulate(&mut self, path: &str, grad: &Tensor) -> Result<()> {
        self.get_mut(path)?.grad.add_assign(grad)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamTensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(ParamTensor::zero_grad);
    }

    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        cfg.validate()?;
        for p in self.params.values_mut() {
            p.adam_step(cfg)?;
        }
        self.version += 1;
        Ok(())
    }

    /// Checks that every manifest path exists with the expected shape and nothing else does.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let manifest = config.manifest()?;
        if manifest.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                lhs: vec![self.params.len()],
                rhs: vec![manifest.len()],
            });
        }
        for (path, shape) in manifest {
            let p = self
                .params
                .get(&path)
                .ok_or_else(|| Error::BadConfig(format!("missing parameter {path}")))?;
            if p.shape() != shape.as_slice() {
                return Err(shape_mismatch(p.shape(), &shape));
            }
        }
        Ok(())
    }

    fn dlfs_weights(&self, config: &ModelConfig) -> DlfsWeights<'_> {
        let scales = (1..=config.dlfs.scales.len())
            .map(|s| ScaleWeights {
                w: self.value(&format!("dlfs.scale{s}.conv.w")),
                b: self.value(&format!("dlfs.scale{s}.conv.b")),
            })
            .collect();
        let stages = (2..=config.dlfs.scales.len())
            .map(|s| StageWeights {
                rgb_w: self.value(&format!("dlfs.scale{s}.pyramid.rgb.w")),
                rgb_b: self.value(&format!("dlfs.scale{s}.pyramid.rgb.b")),
                d_w: self.value(&format!("dlfs.scale{s}.pyramid.d.w")),
                d_b: self.value(&format!("dlfs.scale{s}.pyramid.d.b")),
            })
            .collect();
        DlfsWeights { scales, stages }
    }

    /// VI head of scale `s` (1-based).
    pub fn vi_head(&self, config: &ModelConfig, s: usize) -> ViHead<'_> {
        ViHead {
            pool_size: config.vi_pool,
            conv_w: self.value(&format!("vi.scale{s}.conv.w")),
            conv_b: self.value(&format!("vi.scale{s}.conv.b")),
            log_sigma: self.value(&format!("vi.scale{s}.log_sigma")),
        }
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    conv: Conv2dCache,
    relu_out: Tensor,
    pool: Option<MaxPoolCache>,
}

#[derive(Debug, Clone)]
struct BranchCache {
    blocks: Vec<BlockCache>,
    gap: GapCache,
    fc: FcCache,
    g: Tensor,
    head: FcCache,
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    version: u64,
    branches: [BranchCache; 2],
    dlfs: Option<DlfsCache>,
    fusion: FcCache,
    global_dim: usize,
    /// rows per scale
    local_rows: Vec<usize>,
    channels_f: usize,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Tensor,
    pub g_rgb_logits: Tensor,
    pub g_d_logits: Tensor,
    /// Backbone feature maps of both modalities.
    pub f_rgb: Tensor,
    pub f_d: Tensor,
    /// `None` when the local branch is disabled.
    pub local: Option<DlfsOutput>,
    pub fused_len: usize,
}

impl ModelOutput {
    pub fn predicted(&self) -> usize {
        argmax(self.logits.data())
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn branch_forward(
    params: &ModelParams,
    config: &ModelConfig,
    m: &str,
    x: &Tensor,
) -> Result<(Tensor, Tensor, Tensor, BranchCache)> {
    let mut h = x.clone();
    let mut blocks = Vec::with_capacity(config.channels.len());
    for i in 1..=config.channels.len() {
        let (y, conv) = conv2d(
            &h,
            params.value(&format!("{m}.block{i}.conv.w")),
            params.value(&format!("{m}.block{i}.conv.b")),
            1,
            1,
        )?;
        let relu_out = y.relu();
        let (next, pool) = if i < config.channels.len() {
            let s = relu_out.shape()[1] / 2;
            let (p, pc) = if relu_out.shape()[1] == relu_out.shape()[2] {
                max_pool(&relu_out, s)?
            } else {
                return Err(Error::BadConfig("backbone expects square inputs".into()));
            };
            (p, Some(pc))
        } else {
            (relu_out.clone(), None)
        };
        blocks.push(BlockCache {
            conv,
            relu_out,
            pool,
        });
        h = next;
    }
    let (pooled, gap) = global_avg_pool(&h)?;
    let (g_pre, fc) = fully_connected(
        &pooled,
        params.value(&format!("{m}.global.fc.w")),
        params.value(&format!("{m}.global.fc.b")),
    )?;
    let g = g_pre.relu();
    let (logits, head) = fully_connected(
        &g,
        params.value(&format!("{m}.global.head.w")),
        params.value(&format!("{m}.global.head.b")),
    )?;
    Ok((
        h,
        g.clone(),
        logits,
        BranchCache {
            blocks,
            gap,
            fc,
            g,
            head,
        },
    ))
}

/// Returns the parameter gradients as a side effect; `grad_f` is the gradient on the
/// backbone output from the local branch.
fn branch_backward(
    params: &mut ModelParams,
    m: &str,
    cache: &BranchCache,
    grad_logits: &Tensor,
    grad_g_fusion: &[f64],
    mut grad_f: Tensor,
) -> Result<()> {
    let (mut gg, gw, gb) = fully_connected_backward(&cache.head, grad_logits)?;
    params.accumulate(&format!("{m}.global.head.w"), &gw)?;
    params.accumulate(&format!("{m}.global.head.b"), &gb)?;
    crate::tensor::axpy(1.0, grad_g_fusion, gg.data_mut());
    relu_backward(cache.g.data(), gg.data_mut());
    let (gp, gw, gb) = fully_connected_backward(&cache.fc, &gg)?;
    params.accumulate(&format!("{m}.global.fc.w"), &gw)?;
    params.accumulate(&format!("{m}.global.fc.b"), &gb)?;
    grad_f.add_assign(&global_avg_pool_backward(&cache.gap, &gp)?)?;
    let mut g = grad_f;
    for (i, block) in cache.blocks.iter().enumerate().rev() {
        if let Some(pool) = &block.pool {
            g = max_pool_backward(pool, &g)?;
        }
        relu_backward(block.relu_out.data(), g.data_mut());
        let (gx, gw, gb) = block.conv.backward(&g, i > 0)?;
        params.accumulate(&format!("{m}.block{}.conv.w", i + 1), &gw)?;
        params.accumulate(&format!("{m}.block{}.conv.b", i + 1), &gb)?;
        if let Some(gx) = gx {
            g = gx;
        }
    }
    Ok(())
}

/// Forward pass for one sample.
pub fn model_forward(
    params: &ModelParams,
    config: &ModelConfig,
    x_rgb: &Tensor,
    x_d: &Tensor,
) -> Result<(ModelOutput, ModelCache)> {
    let expected = [config.input_channels, config.input_size.0, config.input_size.1];
    for x in [x_rgb, x_d] {
        if x.shape() != expected {
            return Err(shape_mismatch(x.shape(), &expected));
        }
    }
    let (f_rgb, g_rgb, g_rgb_logits, c_rgb) = branch_forward(params, config, "rgb", x_rgb)?;
    let (f_d, g_d, g_d_logits, c_d) = branch_forward(params, config, "d", x_d)?;
    let mut fused = Vec::with_capacity(config.fusion_dim()?);
    fused.extend_from_slice(g_rgb.data());
    fused.extend_from_slice(g_d.data());
    let (local, dlfs_cache) = if config.dlfs.is_enabled() {
        let (out, cache) = dlfs_forward(&f_rgb, &f_d, &config.dlfs, &params.dlfs_weights(config))?;
        let all = out.concatenated()?;
        fused.extend_from_slice(all.e_rgb.data());
        fused.extend_from_slice(all.e_d.data());
        (Some(out), Some(cache))
    } else {
        (None, None)
    };
    let fused = Tensor::from_vec(fused);
    let fused_len = fused.len();
    let (logits, fusion) = fully_connected(
        &fused,
        params.value("fusion.fc.w"),
        params.value("fusion.fc.b"),
    )?;
    let local_rows = config.dlfs.scales.iter().map(|s| s.keypoints).collect();
    Ok((
        ModelOutput {
            logits,
            g_rgb_logits,
            g_d_logits,
            f_rgb: f_rgb.clone(),
            f_d,
            local,
            fused_len,
        },
        ModelCache {
            version: params.version(),
            branches: [c_rgb, c_d],
            dlfs: dlfs_cache,
            fusion,
            global_dim: config.global_dim,
            local_rows,
            channels_f: f_rgb.shape()[0],
        },
    ))
}

/// Gradients arriving at the model outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub logits: Tensor,
    pub g_rgb_logits: Tensor,
    pub g_d_logits: Tensor,
    /// Required iff the local branch is enabled.
    pub local: Option<DlfsGradIn>,
}

impl OutputGrads {
    pub fn zeros_like(out: &ModelOutput) -> Self {
        Self {
            logits: Tensor::zeros(out.logits.shape()),
            g_rgb_logits: Tensor::zeros(out.g_rgb_logits.shape()),
            g_d_logits: Tensor::zeros(out.g_d_logits.shape()),
            local: out.local.as_ref().map(DlfsGradIn::zeros_like),
        }
    }
}

/// Backpropagates `grads` and accumulates into the parameter gradients.
pub fn model_backward(params: &mut ModelParams, cache: &ModelCache, grads: &OutputGrads) -> Result<()> {
    if cache.version != params.version() {
        return Err(Error::StaleCache);
    }
    let (gh, gw, gb) = fully_connected_backward(&cache.fusion, &grads.logits)?;
    params.accumulate("fusion.fc.w", &gw)?;
    params.accumulate("fusion.fc.b", &gb)?;
    let gd = cache.global_dim;
    let gh = gh.data();
    let (g_fuse_rgb, g_fuse_d) = (&gh[..gd], &gh[gd..2 * gd]);

    let feature_shape = cache.branches[0].blocks.last().unwrap().relu_out.shape().to_vec();
    let (gf_rgb, gf_d) = match &cache.dlfs {
        Some(dcache) => {
            let mut gin = grads.local.clone().ok_or(Error::StaleCache)?;
            // split the fusion gradient back into per-scale selected-feature rows
            let cf = cache.channels_f;
            let total_rows: usize = cache.local_rows.iter().sum();
            let rgb_part = &gh[2 * gd..2 * gd + total_rows * cf];
            let d_part = &gh[2 * gd + total_rows * cf..];
            let mut row = 0;
            for (s, &k) in cache.local_rows.iter().enumerate() {
                let span = row * cf..(row + k) * cf;
                let sel = &mut gin.selected[s];
                crate::tensor::axpy(1.0, &rgb_part[span.clone()], sel.e_rgb.data_mut());
                crate::tensor::axpy(1.0, &d_part[span], sel.e_d.data_mut());
                row += k;
            }
            let g = dlfs_backward(dcache, &gin)?;
            for (s, sg) in g.scales.iter().enumerate() {
                params.accumulate(&format!("dlfs.scale{}.conv.w", s + 1), &sg.w)?;
                params.accumulate(&format!("dlfs.scale{}.conv.b", s + 1), &sg.b)?;
            }
            for (i, st) in g.stages.iter().enumerate() {
                let s = i + 2;
                params.accumulate(&format!("dlfs.scale{s}.pyramid.rgb.w"), &st.rgb_w)?;
                params.accumulate(&format!("dlfs.scale{s}.pyramid.rgb.b"), &st.rgb_b)?;
                params.accumulate(&format!("dlfs.scale{s}.pyramid.d.w"), &st.d_w)?;
                params.accumulate(&format!("dlfs.scale{s}.pyramid.d.b"), &st.d_b)?;
            }
            (g.f_rgb, g.f_d)
        }
        None => (Tensor::zeros(&feature_shape), Tensor::zeros(&feature_shape)),
    };
    branch_backward(params, "rgb", &cache.branches[0], &grads.g_rgb_logits, g_fuse_rgb, gf_rgb)?;
    branch_backward(params, "d", &cache.branches[1], &grads.g_d_logits, g_fuse_d, gf_d)?;
    Ok(())
}

/// Which loss terms contribute to the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub weights: LossWeights,
    /// Only switched off to check the other terms' gradients in isolation.
    pub use_cls: bool,
    pub use_aux: bool,
    pub use_vi: bool,
    pub use_corr: bool,
    pub margin: f64,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            use_cls: true,
            use_aux: true,
            use_vi: true,
            use_corr: true,
            margin: TRIPLET_MARGIN,
        }
    }
}

/// Indices into a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Draws one positive and one negative per anchor; anchors without both are skipped.
pub fn mine_triplets(labels: &[usize], rng: &mut Rng) -> Vec<Triplet> {
    let mut out = Vec::new();
    for (a, &la) in labels.iter().enumerate() {
        let pos: Vec<usize> = (0..labels.len())
            .filter(|&i| i != a && labels[i] == la)
            .collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != la).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let positive = pos[rng.below(pos.len())];
        let negative = neg[rng.below(neg.len())];
        out.push(Triplet {
            anchor: a,
            positive,
            negative,
        });
    }
    out
}

/// One sample of a batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub x_rgb: &'a Tensor,
    pub x_d: &'a Tensor,
    pub label: usize,
}

/// The weighted multi-task objective over a batch.
///
/// Per-sample terms (classification, auxiliary, VI) are averaged over the batch. The
/// correlation term is the batch mean of the cross-modal loss plus the means of the
/// RGB and depth triplet losses over `triplets`, each summed over scales. When
/// `backprop` is set, gradients of `total` are accumulated into `params`.
pub fn batch_objective(
    params: &mut ModelParams,
    config: &ModelConfig,
    batch: &[BatchItem<'_>],
    triplets: &[Triplet],
    terms: &LossTerms,
    backprop: bool,
) -> Result<LossBundle> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::EmptySplit("batch".into()));
    }
    let inv_b = 1.0 / b as f64;
    let w = terms.weights;
    let local = config.dlfs.is_enabled();
    let use_vi = terms.use_vi && local;
    let use_corr = terms.use_corr && local;
    let n_scales = config.dlfs.scales.len();

    let mut outputs = Vec::with_capacity(b);
    let mut caches = Vec::with_capacity(b);
    for item in batch {
        let (o, c) = model_forward(params, config, item.x_rgb, item.x_d)?;
        outputs.push(o);
        caches.push(c);
    }
    let mut grads: Vec<OutputGrads> = outputs.iter().map(OutputGrads::zeros_like).collect();
    let (mut l_cls, mut l_aux, mut l_vi, mut l_c) = (0.0, 0.0, 0.0, 0.0);
    let mut head_grads: Vec<(String, Tensor)> = Vec::new();

    for (i, (item, out)) in batch.iter().zip(&outputs).enumerate() {
        if terms.use_cls {
            let (l, ce) = cross_entropy(&out.logits, item.label)?;
            l_cls += l * inv_b;
            grads[i].logits = cross_entropy_backward(&ce, inv_b);
        }
        if terms.use_aux {
            let (l, cache) = aux_ce_loss(&out.g_rgb_logits, &out.g_d_logits, item.label)?;
            l_aux += l * inv_b;
            let (gr, gd) = aux_ce_loss_backward(&cache, w.aux * inv_b);
            grads[i].g_rgb_logits = gr;
            grads[i].g_d_logits = gd;
        }
        if use_vi {
            let dl = out.local.as_ref().unwrap();
            for s in 0..n_scales {
                let head = params.vi_head(config, s + 1);
                let (l, cache) = vi_loss(&dl.keypoints[s].grouped, item.label, &head)?;
                l_vi += l * inv_b;
                if backprop {
                    let g = vi_loss_backward(&cache, w.vi * inv_b)?;
                    head_grads.push((format!("vi.scale{}.conv.w", s + 1), g.conv_w));
                    head_grads.push((format!("vi.scale{}.conv.b", s + 1), g.conv_b));
                    head_grads.push((format!("vi.scale{}.log_sigma", s + 1), g.log_sigma));
                    grads[i].local.as_mut().unwrap().grouped[s] = Some(g.m);
                }
            }
        }
        if use_corr {
            let dl = out.local.as_ref().unwrap();
            for s in 0..n_scales {
                let sel = &dl.selected[s];
                let (l, cache) = multimodal_corr_loss(&sel.e_rgb, &sel.e_d)?;
                l_c += l * inv_b;
                let (gr, gd) = multimodal_corr_loss_backward(&cache, w.corr * inv_b);
                let gsel = &mut grads[i].local.as_mut().unwrap().selected[s];
                gsel.e_rgb.add_assign(&gr)?;
                gsel.e_d.add_assign(&gd)?;
            }
        }
    }

    if use_corr && !triplets.is_empty() {
        let inv_t = 1.0 / triplets.len() as f64;
        for t in triplets {
            for s in 0..n_scales {
                let pick = |i: usize| -> &SelectedFeatures {
                    &outputs[i].local.as_ref().unwrap().selected[s]
                };
                for modality in 0..2 {
                    let get = |sf: &SelectedFeatures| -> Tensor {
                        if modality == 0 {
                            sf.e_rgb.clone()
                        } else {
                            sf.e_d.clone()
                        }
                    };
                    let (ea, ep, en) = (get(pick(t.anchor)), get(pick(t.positive)), get(pick(t.negative)));
                    let (l, cache) = triplet_corr_loss(&ea, &ep, &en, terms.margin)?;
                    l_c += l * inv_t;
                    let (ga, gp, gn) = triplet_corr_loss_backward(&cache, w.corr * inv_t);
                    for (idx, g) in [(t.anchor, ga), (t.positive, gp), (t.negative, gn)] {
                        let sel = &mut grads[idx].local.as_mut().unwrap().selected[s];
                        if modality == 0 {
                            sel.e_rgb.add_assign(&g)?;
                        } else {
                            sel.e_d.add_assign(&g)?;
                        }
                    }
                }
            }
        }
    }

    let bundle = total_loss(l_cls, l_aux, l_vi, l_c, w);
    if backprop {
        for (path, g) in &head_grads {
            params.accumulate(path, g)?;
        }
        for (cache, g) in caches.iter().zip(&grads) {
            model_backward(params, cache, g)?;
        }
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_config() -> ModelConfig {
        ModelConfig {
            input_size: (8, 8),
            input_channels: 3,
            channels: vec![3, 4],
            num_classes: 2,
            global_dim: 5,
            dlfs: DlfsConfig::single_scale(2, 4),
            vi_pool: 2,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = ModelConfig::default();
        let a = init_params(&cfg, &mut Rng::new(3)).unwrap();
        let b = init_params(&cfg, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        for (path, p) in a.iter() {
            if path.ends_with(".b") || path.ends_with("log_sigma") {
                assert!(p.value.data().iter().all(|&v| v == 0.0), "{path}");
            }
        }
        a.check_against(&cfg).unwrap();
    }

    #[test]
    fn glorot_variance() {
        let cfg = ModelConfig {
            global_dim: 64,
            channels: vec![16, 32, 64],
            ..Default::default()
        };
        let p = init_params(&cfg, &mut Rng::new(4)).unwrap();
        // 64 -> 64 fully connected layer
        let w = &p.get("rgb.global.fc.w").unwrap().value;
        assert_eq!(w.shape(), &[64, 64]);
        let a2 = 6.0 / 128.0;
        let mean = w.sum() / w.len() as f64;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((var / (a2 / 3.0) - 1.0).abs() < 0.2, "{var}");
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_logits() {
        let cfg = ModelConfig::default();
        let p = init_params(&cfg, &mut Rng::new(5)).unwrap();
        let x = Tensor::zeros(&[3, 32, 32]);
        let (out, _) = model_forward(&p, &cfg, &x, &x).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fusion_length_contract() {
        let cfg = ModelConfig::default();
        let p = init_params(&cfg, &mut Rng::new(6)).unwrap();
        let x = Rng::new(1).uniform(0.0, 1.0, &[3, 32, 32]).unwrap();
        let (out, _) = model_forward(&p, &cfg, &x, &x).unwrap();
        // 64 + 64 + (16 + 4)·32·2
        assert_eq!(out.fused_len, 64 + 64 + 20 * 32 * 2);
        assert_eq!(cfg.feature_shape().unwrap(), [32, 8, 8]);
        assert_eq!(out.local.as_ref().unwrap().keypoints[1].attn.shape(), &[4, 3, 3]);
    }

    #[test]
    fn disabled_local_branch_is_pure_global() {
        let cfg = ModelConfig {
            dlfs: DlfsConfig::disabled(),
            ..micro_config()
        };
        let p = init_params(&cfg, &mut Rng::new(7)).unwrap();
        assert_eq!(cfg.fusion_dim().unwrap(), 10);
        assert!(p.get("dlfs.scale1.conv.w").is_err());
        let x = Rng::new(2).uniform(0.0, 1.0, &[3, 8, 8]).unwrap();
        let (out, _) = model_forward(&p, &cfg, &x, &x).unwrap();
        assert!(out.local.is_none());
        assert_eq!(out.fused_len, 10);
    }

    #[test]
    fn zero_output_grads_give_zero_param_grads() {
        let cfg = micro_config();
        let mut p = init_params(&cfg, &mut Rng::new(8)).unwrap();
        let x = Rng::new(3).uniform(0.0, 1.0, &[3, 8, 8]).unwrap();
        let (out, cache) = model_forward(&p, &cfg, &x, &x).unwrap();
        model_backward(&mut p, &cache, &OutputGrads::zeros_like(&out)).unwrap();
        for (_, t) in p.iter() {
            assert!(t.grad.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let cfg = micro_config();
        let mut p = init_params(&cfg, &mut Rng::new(9)).unwrap();
        let x = Rng::new(4).uniform(0.0, 1.0, &[3, 8, 8]).unwrap();
        let (out, cache) = model_forward(&p, &cfg, &x, &x).unwrap();
        p.adam_step(&AdamConfig::default()).unwrap();
        assert!(matches!(
            model_backward(&mut p, &cache, &OutputGrads::zeros_like(&out)),
            Err(Error::StaleCache)
        ));
    }

    #[test]
    fn bad_configs() {
        let mut cfg = ModelConfig::default();
        cfg.input_size = (8, 8);
        assert!(matches!(cfg.validate(), Err(Error::BadConfig(_))));
        let mut cfg = ModelConfig::default();
        cfg.dlfs.scales[0].channels = 30;
        assert!(matches!(
            cfg.validate(),
            Err(Error::DivisibilityViolation { .. })
        ));
        let mut cfg = ModelConfig::default();
        cfg.vi_pool = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn triplet_mining_rules() {
        let mut rng = Rng::new(1);
        let t = mine_triplets(&[0, 0, 1, 2], &mut rng);
        assert_eq!(t.len(), 2);
        for tr in &t {
            assert!(tr.anchor < 2 && tr.positive < 2 && tr.anchor != tr.positive);
            assert!(tr.negative >= 2);
        }
        assert!(mine_triplets(&[1, 1, 1], &mut rng).is_empty());
    }

    #[test]
    fn ablated_terms_contribute_nothing() {
        let cfg = micro_config();
        let mut rng = Rng::new(10);
        let mut p = init_params(&cfg, &mut rng).unwrap();
        let xs: Vec<Tensor> = (0..4)
            .map(|_| rng.uniform(0.0, 1.0, &[3, 8, 8]).unwrap())
            .collect();
        let labels = [0, 0, 1, 1];
        let batch: Vec<BatchItem> = (0..4)
            .map(|i| BatchItem {
                x_rgb: &xs[i],
                x_d: &xs[(i + 1) % 4],
                label: labels[i],
            })
            .collect();
        let triplets = mine_triplets(&labels, &mut rng);
        let only_cls = LossTerms {
            use_aux: false,
            use_vi: false,
            use_corr: false,
            ..Default::default()
        };
        let zero_weights = LossTerms {
            weights: LossWeights {
                aux: 0.0,
                vi: 0.0,
                corr: 0.0,
            },
            ..Default::default()
        };
        let a = batch_objective(&mut p, &cfg, &batch, &triplets, &only_cls, true).unwrap();
        assert_eq!((a.l_aux, a.l_vi, a.l_c), (0.0, 0.0, 0.0));
        let ga: Vec<Tensor> = p.iter().map(|(_, t)| t.grad.clone()).collect();
        p.zero_grad();
        let b = batch_objective(&mut p, &cfg, &batch, &triplets, &zero_weights, true).unwrap();
        assert!(b.l_vi > 0.0 && b.l_c > 0.0);
        assert_eq!(a.total, b.total);
        for ((path, t), g) in p.iter().zip(&ga) {
            for (x, y) in t.grad.data().iter().zip(g.data()) {
                assert!((x - y).abs() < 1e-15, "{path}");
            }
        }
    }

    #[test]
    fn full_objective_matches_finite_differences() {
        let cfg = micro_config();
        let report =
            crate::gradcheck::model_gradcheck(&cfg, 11, 4, &LossTerms::default(), |_| true).unwrap();
        assert_eq!(report.len(), cfg.manifest().unwrap().len());
        for (path, err) in report {
            assert!(err < 1e-3, "{path}: {err}");
        }
    }

    #[test]
    fn pyramid_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            input_size: (16, 16),
            channels: vec![2, 3],
            dlfs: DlfsConfig {
                scales: vec![
                    crate::dlfs::ScaleConfig { keypoints: 2, channels: 4 },
                    crate::dlfs::ScaleConfig { keypoints: 1, channels: 3 },
                ],
                stages: vec![crate::dlfs::PyramidStage { kernel: 3, stride: 2 }],
            },
            ..micro_config()
        };
        let report = crate::gradcheck::model_gradcheck(&cfg, 12, 3, &LossTerms::default(), |p| {
            p.starts_with("dlfs.") || p.starts_with("vi.") || p.starts_with("rgb.block1")
        })
        .unwrap();
        for (path, err) in report {
            assert!(err < 1e-3, "{path}: {err}");
        }
    }
}

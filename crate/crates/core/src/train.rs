//! Training loop, evaluation metrics and keypoint localization scoring.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, TrainProgress};
use crate::data::{epoch_order, DatasetManifest, SceneExample, Split};
use crate::dlfs::{to_pixel, DlfsConfig, KeypointSet};
use crate::error::{Error, Result};
use crate::losses::{LossBundle, LossWeights};
use crate::model::{
    batch_objective, init_params, mine_triplets, model_forward, BatchItem, LossTerms, ModelConfig,
    ModelParams,
};
use crate::nn::AdamConfig;
use crate::rng::Rng;

pub const CSV_HEADER: &str = "epoch,lr,l_cls,l_aux,l_vi,l_c,total,val_mca,kp_hit_rate";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const METRICS_CSV: &str = "metrics.csv";
/// Stream of the run seed reserved for triplet mining; epochs use streams `0..`.
const MINING_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub use_local: bool,
    pub use_aux: bool,
    pub use_vi: bool,
    pub use_corr: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_decay: 0.9,
            decay_epochs: 80,
            batch_size: 64,
            epochs: 60,
            weights: LossWeights::default(),
            seed: 0,
            use_local: true,
            use_aux: true,
            use_vi: true,
            use_corr: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadHyperparam(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.decay_epochs == 0 {
            return bad("decay_epochs must be positive");
        }
        if self.batch_size == 0 || (self.use_corr && self.use_local && self.batch_size < 3) {
            return bad("batch_size must be at least 3 when the correlation loss is on");
        }
        let w = self.weights;
        if [w.aux, w.vi, w.corr].iter().any(|v| !(*v >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    /// `lr₀ · decay^⌊epoch / decay_epochs⌋` for a 0-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_epochs) as i32)
    }

    pub fn loss_terms(&self) -> LossTerms {
        LossTerms {
            weights: self.weights,
            use_aux: self.use_aux,
            use_vi: self.use_vi,
            use_corr: self.use_corr,
            ..Default::default()
        }
    }

    /// The model actually trained: the local branch is dropped when `use_local` is off.
    pub fn effective_model(&self, model: &ModelConfig) -> ModelConfig {
        let mut m = model.clone();
        if !self.use_local {
            m.dlfs = DlfsConfig::disabled();
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// `None` for classes absent from the split.
    pub per_class_recall: Vec<Option<f64>>,
    pub mean_class_accuracy: f64,
    pub overall_accuracy: f64,
    /// Training-loss means, when the report covers a training epoch.
    pub losses: Option<LossBundle>,
    /// `None` when the model has no local branch.
    pub keypoint_hit_rate: Option<f64>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Per-class recalls, their mean over classes present, and overall accuracy.
pub fn class_metrics(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<(Vec<Option<f64>>, f64, f64)> {
    if labels.is_empty() {
        return Err(Error::EmptySplit("no samples".into()));
    }
    let mut hits = vec![0usize; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        counts[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let recall: Vec<Option<f64>> = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
        .collect();
    let present: Vec<f64> = recall.iter().flatten().copied().collect();
    let mca = present.iter().sum::<f64>() / present.len() as f64;
    let overall = hits.iter().sum::<usize>() as f64 / labels.len() as f64;
    Ok((recall, mca, overall))
}

/// Input-pixel `(row, col)` of every keypoint, across scales.
pub fn keypoints_to_input_pixels(keypoints: &[KeypointSet], config: &ModelConfig) -> Vec<(f64, f64)> {
    let stride = config.total_stride() as f64;
    let [_, h, w] = match config.feature_shape() {
        Ok(s) => s,
        Err(_) => return Vec::new(),
    };
    let sizes = config.dlfs.scale_sizes(h, w).unwrap_or_default();
    let mut out = Vec::new();
    for (s, kp) in keypoints.iter().enumerate() {
        let (sh, sw) = sizes[s];
        for &(x, y) in &kp.coords {
            let (mut row, mut col) = (to_pixel(y, sh), to_pixel(x, sw));
            // back through the pyramid: a stage output pixel sits at its window centre
            for st in config.dlfs.stages[..s].iter().rev() {
                let half = (st.kernel - 1) as f64 / 2.0;
                row = row * st.stride as f64 + half;
                col = col * st.stride as f64 + half;
            }
            // a final-feature pixel covers `stride` input pixels; take their centre
            out.push(((row + 0.5) * stride - 0.5, (col + 0.5) * stride - 0.5));
        }
    }
    out
}

/// Fraction of keypoints within `radius_px` of some object centre.
pub fn keypoint_localization_metric(
    keypoints: &[KeypointSet],
    config: &ModelConfig,
    centers: &[(usize, usize)],
    radius_px: f64,
) -> f64 {
    let pts = keypoints_to_input_pixels(keypoints, config);
    if pts.is_empty() {
        return 0.0;
    }
    let hits = pts
        .iter()
        .filter(|&&(r, c)| {
            centers.iter().any(|&(cr, cc)| {
                let (dr, dc) = (r - cr as f64, c - cc as f64);
                (dr * dr + dc * dc).sqrt() <= radius_px
            })
        })
        .count();
    hits as f64 / pts.len() as f64
}

/// Default hit radius: the object radius plus one final-feature cell.
pub fn default_hit_radius(object_radius: usize, config: &ModelConfig) -> f64 {
    (object_radius + config.total_stride()) as f64
}

pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    examples: &[SceneExample],
) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::EmptySplit("evaluation split is empty".into()));
    }
    let mut predictions = Vec::with_capacity(examples.len());
    let mut hit_sum = 0.0;
    let local = config.dlfs.is_enabled();
    for ex in examples {
        let (out, _) = model_forward(params, config, &ex.x_rgb, &ex.x_d)?;
        predictions.push(out.predicted());
        if let Some(l) = &out.local {
            let radius = default_hit_radius(ex.object_radius, config);
            hit_sum += keypoint_localization_metric(&l.keypoints, config, &ex.object_centers, radius);
        }
    }
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let (per_class_recall, mca, overall) = class_metrics(&predictions, &labels, config.num_classes)?;
    Ok(MetricsReport {
        per_class_recall,
        mean_class_accuracy: mca,
        overall_accuracy: overall,
        losses: None,
        keypoint_hit_rate: local.then(|| hit_sum / examples.len() as f64),
        predictions,
        labels,
    })
}

/// Loads `checkpoint` and evaluates it on one split of `manifest`.
pub fn evaluate_checkpoint(
    checkpoint_path: &Path,
    config: &ModelConfig,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<MetricsReport> {
    let ck = checkpoint::load(checkpoint_path, config)?;
    let examples = manifest.load_split(split)?;
    evaluate(&ck.params, config, &examples)
}

fn fmt9(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn csv_row(epoch: usize, lr: f64, l: &LossBundle, val_mca: f64, kp: Option<f64>) -> String {
    format!(
        "{epoch},{},{},{},{},{},{},{},{}",
        fmt9(lr),
        fmt9(l.l_cls),
        fmt9(l.l_aux),
        fmt9(l.l_vi),
        fmt9(l.l_c),
        fmt9(l.total),
        fmt9(val_mca),
        fmt9(kp.unwrap_or(f64::NAN))
    )
}

/// Everything one training run leaves behind.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub best_params: ModelParams,
    pub best_val_mca: f64,
    /// 1-based epoch of the selected model.
    pub best_epoch: usize,
    pub epochs: Vec<MetricsReport>,
    pub out_dir: Option<PathBuf>,
}

/// In-memory splits for [`train_on`].
pub struct TrainData<'a> {
    pub train: &'a [SceneExample],
    pub val: &'a [SceneExample],
}

/// Trains from scratch (or resumes from `out_dir/last.ckpt` when `resume` is set).
/// Checkpoints and the metrics CSV are written when `out_dir` is given.
pub fn train_on(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = cfg.effective_model(model);
    model.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let terms = cfg.loss_terms();

    let mut params = init_params(&model, &mut Rng::new(cfg.seed))?;
    let mut progress = TrainProgress {
        rng: Rng::substream(cfg.seed, MINING_STREAM).state(),
        ..Default::default()
    };
    let mut best_params = params.clone();
    let mut csv = format!("{CSV_HEADER}\n");
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let last = dir.join(LAST_CHECKPOINT);
        if resume && last.exists() {
            let ck = checkpoint::load(&last, &model)?;
            params = ck.params;
            progress = ck.progress;
            if dir.join(BEST_CHECKPOINT).exists() {
                best_params = checkpoint::load(&dir.join(BEST_CHECKPOINT), &model)?.params;
            }
            let old = fs::read_to_string(dir.join(METRICS_CSV))?;
            for line in old.lines().skip(1).take(progress.epoch as usize) {
                csv.push_str(line);
                csv.push('\n');
            }
        }
    }
    let mut mining = Rng::from_state(progress.rng);
    let mut epochs = Vec::new();

    for epoch in progress.epoch as usize..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let step_cfg = AdamConfig { lr, ..adam };
        let order = epoch_order(data.train.len(), cfg.seed, epoch);
        let mut sums = [0.0; 5];
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| BatchItem {
                    x_rgb: &data.train[i].x_rgb,
                    x_d: &data.train[i].x_d,
                    label: data.train[i].label,
                })
                .collect();
            let triplets = if terms.use_corr && model.dlfs.is_enabled() {
                let labels: Vec<usize> = batch.iter().map(|b| b.label).collect();
                mine_triplets(&labels, &mut mining)
            } else {
                Vec::new()
            };
            params.zero_grad();
            let l = batch_objective(&mut params, &model, &batch, &triplets, &terms, true)?;
            params.adam_step(&step_cfg)?;
            let n = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([l.l_cls, l.l_aux, l.l_vi, l.l_c, l.total]) {
                *s += v * n;
            }
        }
        let n = data.train.len() as f64;
        let losses = LossBundle {
            l_cls: sums[0] / n,
            l_aux: sums[1] / n,
            l_vi: sums[2] / n,
            l_c: sums[3] / n,
            total: sums[4] / n,
            weights: cfg.weights,
        };
        let mut report = if data.val.is_empty() {
            return Err(Error::EmptySplit("val".into()));
        } else {
            evaluate(&params, &model, data.val)?
        };
        report.losses = Some(losses);
        let _ = writeln!(
            csv,
            "{}",
            csv_row(epoch + 1, lr, &losses, report.mean_class_accuracy, report.keypoint_hit_rate)
        );
        progress.epoch = epoch as u64 + 1;
        progress.rng = mining.state();
        if report.mean_class_accuracy > progress.best_val_mca {
            progress.best_val_mca = report.mean_class_accuracy;
            progress.best_epoch = epoch as u64 + 1;
            best_params = params.clone();
            if let Some(dir) = out_dir {
                checkpoint::save(&dir.join(BEST_CHECKPOINT), &params, &progress)?;
            }
        }
        if let Some(dir) = out_dir {
            checkpoint::save(&dir.join(LAST_CHECKPOINT), &params, &progress)?;
            fs::write(dir.join(METRICS_CSV), &csv)?;
        }
        epochs.push(report);
    }
    Ok(TrainOutcome {
        params,
        best_params,
        best_val_mca: progress.best_val_mca,
        best_epoch: progress.best_epoch as usize,
        epochs,
        out_dir: out_dir.map(Path::to_path_buf),
    })
}

/// Loads the train and validation splits of `manifest` and trains on them.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<TrainOutcome> {
    if model.num_classes != manifest.num_classes {
        return Err(Error::BadConfig(format!(
            "model has {} classes, dataset has {}",
            model.num_classes, manifest.num_classes
        )));
    }
    let train = manifest.load_split(Split::Train)?;
    let val = manifest.load_split(Split::Val)?;
    train_on(model, cfg, &TrainData { train: &train, val: &val }, out_dir, resume)
}

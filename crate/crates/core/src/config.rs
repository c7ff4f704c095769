//! `key=value` run configuration files covering the model and training settings.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown or repeated keys are
//! errors. Missing keys keep their defaults.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::dlfs::{DlfsConfig, PyramidStage, ScaleConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const KEYS: &[&str] = &[
    "input_height",
    "input_width",
    "input_channels",
    "channels",
    "num_classes",
    "global_dim",
    "keypoints",
    "dlfs_channels",
    "pyramid",
    "vi_pool",
    "lr",
    "lr_decay",
    "decay_epochs",
    "batch_size",
    "epochs",
    "lambda_aux",
    "lambda_vi",
    "lambda_corr",
    "seed",
    "use_local",
    "use_aux",
    "use_vi",
    "use_corr",
];

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(v: &str) -> Option<Vec<usize>> {
    if v.trim().is_empty() {
        return Some(Vec::new());
    }
    v.split(',').map(|s| s.trim().parse().ok()).collect()
}

impl RunConfig {
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let ks: Vec<usize> = m.dlfs.scales.iter().map(|s| s.keypoints).collect();
        let cs: Vec<usize> = m.dlfs.scales.iter().map(|s| s.channels).collect();
        let stages: Vec<String> = m
            .dlfs
            .stages
            .iter()
            .map(|s| format!("{}:{}", s.kernel, s.stride))
            .collect();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("input_height", m.input_size.0.to_string());
        kv("input_width", m.input_size.1.to_string());
        kv("input_channels", m.input_channels.to_string());
        kv("channels", list(&m.channels));
        kv("num_classes", m.num_classes.to_string());
        kv("global_dim", m.global_dim.to_string());
        kv("keypoints", list(&ks));
        kv("dlfs_channels", list(&cs));
        kv("pyramid", stages.join(","));
        kv("vi_pool", m.vi_pool.to_string());
        kv("lr", format!("{:?}", t.lr));
        kv("lr_decay", format!("{:?}", t.lr_decay));
        kv("decay_epochs", t.decay_epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("lambda_aux", format!("{:?}", t.weights.aux));
        kv("lambda_vi", format!("{:?}", t.weights.vi));
        kv("lambda_corr", format!("{:?}", t.weights.corr));
        kv("seed", t.seed.to_string());
        kv("use_local", t.use_local.to_string());
        kv("use_aux", t.use_aux.to_string());
        kv("use_vi", t.use_vi.to_string());
        kv("use_corr", t.use_corr.to_string());
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        let mut keypoints: Option<Vec<usize>> = None;
        let mut dlfs_channels: Option<Vec<usize>> = None;
        let mut pyramid: Option<Vec<PyramidStage>> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |what: &str| Error::BadConfig(format!("line {}: {what}", n + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key=value"))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(err(&format!("unknown key {k}")));
            }
            if !seen.insert(k.to_string()) {
                return Err(err(&format!("repeated key {k}")));
            }
            let bad = || err(&format!("bad value for {k}: {v}"));
            fn num<T: std::str::FromStr>(v: &str) -> Option<T> {
                v.parse().ok()
            }
            let m = &mut cfg.model;
            let t = &mut cfg.train;
            match k {
                "input_height" => m.input_size.0 = num(v).ok_or_else(bad)?,
                "input_width" => m.input_size.1 = num(v).ok_or_else(bad)?,
                "input_channels" => m.input_channels = num(v).ok_or_else(bad)?,
                "channels" => m.channels = parse_list(v).ok_or_else(bad)?,
                "num_classes" => m.num_classes = num(v).ok_or_else(bad)?,
                "global_dim" => m.global_dim = num(v).ok_or_else(bad)?,
                "keypoints" => keypoints = Some(parse_list(v).ok_or_else(bad)?),
                "dlfs_channels" => dlfs_channels = Some(parse_list(v).ok_or_else(bad)?),
                "pyramid" => {
                    let stages = v
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| {
                            let (a, b) = s.trim().split_once(':')?;
                            Some(PyramidStage {
                                kernel: a.parse().ok()?,
                                stride: b.parse().ok()?,
                            })
                        })
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(bad)?;
                    pyramid = Some(stages);
                }
                "vi_pool" => m.vi_pool = num(v).ok_or_else(bad)?,
                "lr" => t.lr = num(v).ok_or_else(bad)?,
                "lr_decay" => t.lr_decay = num(v).ok_or_else(bad)?,
                "decay_epochs" => t.decay_epochs = num(v).ok_or_else(bad)?,
                "batch_size" => t.batch_size = num(v).ok_or_else(bad)?,
                "epochs" => t.epochs = num(v).ok_or_else(bad)?,
                "lambda_aux" => t.weights.aux = num(v).ok_or_else(bad)?,
                "lambda_vi" => t.weights.vi = num(v).ok_or_else(bad)?,
                "lambda_corr" => t.weights.corr = num(v).ok_or_else(bad)?,
                "seed" => t.seed = num(v).ok_or_else(bad)?,
                "use_local" => t.use_local = num(v).ok_or_else(bad)?,
                "use_aux" => t.use_aux = num(v).ok_or_else(bad)?,
                "use_vi" => t.use_vi = num(v).ok_or_else(bad)?,
                "use_corr" => t.use_corr = num(v).ok_or_else(bad)?,
                _ => unreachable!(),
            }
        }
        if keypoints.is_some() || dlfs_channels.is_some() || pyramid.is_some() {
            cfg.model.dlfs = build_dlfs(&cfg.model.dlfs, keypoints, dlfs_channels, pyramid)?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::parse(&text)
    }
}

/// Rebuilds the scale list. A `keypoints` list of `0` or nothing disables the local branch.
fn build_dlfs(
    base: &DlfsConfig,
    keypoints: Option<Vec<usize>>,
    channels: Option<Vec<usize>>,
    pyramid: Option<Vec<PyramidStage>>,
) -> Result<DlfsConfig> {
    let ks = keypoints.unwrap_or_else(|| base.scales.iter().map(|s| s.keypoints).collect());
    if ks.is_empty() || ks == [0] {
        return Ok(DlfsConfig::disabled());
    }
    let cs = channels.unwrap_or_else(|| {
        let c = base.scales.first().map_or(32, |s| s.channels);
        vec![c; ks.len()]
    });
    if cs.len() != ks.len() {
        return Err(Error::BadConfig(
            "keypoints and dlfs_channels need one entry per scale".into(),
        ));
    }
    let stages = pyramid.unwrap_or_else(|| {
        let st = base.stages.first().copied().unwrap_or(PyramidStage {
            kernel: 3,
            stride: 2,
        });
        vec![st; ks.len() - 1]
    });
    let cfg = DlfsConfig {
        scales: ks
            .iter()
            .zip(&cs)
            .map(|(&keypoints, &channels)| ScaleConfig {
                keypoints,
                channels,
            })
            .collect(),
        stages,
    };
    cfg.validate()?;
    Ok(cfg)
}

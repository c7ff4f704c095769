//! Synthetic aligned two-modality scenes, dataset files and manifests.
//!
//! A class is a fixed set of two or three object types. Each object type has a shape, a
//! texture and a colour that are rendered identically (up to an intensity factor) into
//! both modalities, so object pixels are perfectly correlated across modalities while the
//! two backgrounds are independent smooth noise.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const GENERATOR_VERSION: u32 = 2;
pub const MANIFEST_NAME: &str = "manifest.txt";
const PLACEMENT_ATTEMPTS: usize = 100;
const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeomConfig {
    pub size: usize,
    pub radius_min: usize,
    pub radius_max: usize,
    /// Scale of the background noise around 0.5; 0 gives a flat 0.5 background.
    pub noise: f64,
    /// Gaussian blur width of the background noise, in pixels.
    pub smoothness: f64,
    /// Objects of random type drawn into one modality only, placed when there is room.
    pub distractors: usize,
}

impl Default for GeomConfig {
    fn default() -> Self {
        Self {
            size: 32,
            radius_min: 3,
            radius_max: 5,
            noise: 0.8,
            smoothness: 2.0,
            distractors: 2,
        }
    }
}

impl GeomConfig {
    fn validate(&self) -> Result<()> {
        if self.radius_min == 0
            || self.radius_min > self.radius_max
            || 2 * self.radius_max + 1 > self.size
            || self.noise < 0.0
            || self.smoothness < 0.0
        {
            return Err(Error::BadConfig(format!("bad geometry {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneExample {
    pub x_rgb: Tensor,
    pub x_d: Tensor,
    pub label: usize,
    /// (row, col) pixel centres.
    pub object_centers: Vec<(usize, usize)>,
    /// Largest radius any object in the dataset can have.
    pub object_radius: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disc,
    Square,
    Bar,
}

#[derive(Debug, Clone, Copy)]
struct ObjectType {
    shape: Shape,
    texture: usize,
    color: [f64; 3],
    depth_gain: f64,
}

pub fn num_object_types(num_classes: usize) -> usize {
    num_classes + num_classes.div_ceil(2)
}

/// Object types making up class `c`. Neighbouring classes share one type.
pub fn class_signature(c: usize, num_classes: usize) -> Vec<usize> {
    let mut sig = vec![c, (c + 1) % num_classes];
    if c.is_multiple_of(2) {
        sig.push(num_classes + c / 2);
    }
    sig
}

fn hsv(h: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).min(5.999_999);
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    match h6 as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

fn object_type(t: usize, total: usize) -> ObjectType {
    let shape = match (t / 3) % 3 {
        0 => Shape::Disc,
        1 => Shape::Square,
        _ => Shape::Bar,
    };
    ObjectType {
        shape,
        texture: t % 3,
        color: hsv(t as f64 / total as f64),
        depth_gain: 0.6 + 0.1 * ((t * 7) % 5) as f64,
    }
}

fn covers(shape: Shape, r: usize, dr: isize, dc: isize) -> bool {
    let r = r as isize;
    match shape {
        Shape::Disc => dr * dr + dc * dc <= r * r,
        Shape::Square => dr.abs() <= r && dc.abs() <= r,
        Shape::Bar => 2 * dr.abs() <= r && dc.abs() <= r,
    }
}

fn texture(kind: usize, dr: isize, dc: isize) -> f64 {
    match kind {
        0 => 1.0,
        1 => {
            if dr.rem_euclid(2) == 0 {
                1.0
            } else {
                0.4
            }
        }
        _ => {
            if (dr + dc).rem_euclid(2) == 0 {
                1.0
            } else {
                0.4
            }
        }
    }
}

/// Unit-variance periodic Gaussian-blurred white noise, one field per channel.
fn smooth_noise(rng: &mut Rng, size: usize, sigma: f64) -> Result<Tensor> {
    let mut t = rng.normal(0.0, 1.0, &[3, size, size])?;
    if sigma == 0.0 {
        return Ok(t);
    }
    let reach = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-reach..=reach)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let norm = k.iter().map(|v| v * v).sum::<f64>();
    let n = size as isize;
    let wrap = |i: isize| i.rem_euclid(n) as usize;
    let mut tmp = vec![0.0; size * size];
    for ch in 0..3 {
        let plane = &mut t.data_mut()[ch * size * size..(ch + 1) * size * size];
        for r in 0..size {
            for c in 0..size {
                tmp[r * size + c] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * plane[r * size + wrap(c as isize + j as isize - reach)])
                    .sum();
            }
        }
        for r in 0..size {
            for c in 0..size {
                plane[r * size + c] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * tmp[wrap(r as isize + j as isize - reach) * size + c])
                    .sum::<f64>()
                    / norm;
            }
        }
    }
    Ok(t)
}

fn background(rng: &mut Rng, geom: &GeomConfig) -> Result<Tensor> {
    let n = smooth_noise(rng, geom.size, geom.smoothness)?;
    Tensor::new(
        n.shape(),
        n.data()
            .iter()
            .map(|&v| (0.5 + geom.noise * v).clamp(0.0, 1.0))
            .collect(),
    )
}

/// Rejection-samples a centre and radius clear of everything in `placed`.
fn place(rng: &mut Rng, geom: &GeomConfig, placed: &[(usize, usize, usize)]) -> Option<(usize, usize, usize)> {
    let s = geom.size;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let r = geom.radius_min + rng.below(geom.radius_max - geom.radius_min + 1);
        let row = r + rng.below(s - 2 * r);
        let col = r + rng.below(s - 2 * r);
        let clear = placed
            .iter()
            .all(|&(pr, pc, prad)| row.abs_diff(pr).max(col.abs_diff(pc)) > r + prad + 1);
        if clear {
            return Some((row, col, r));
        }
    }
    None
}

fn draw_object(img: &mut Tensor, ot: &ObjectType, (row, col, r): (usize, usize, usize), gain: f64) {
    let (r_i, row_i, col_i) = (r as isize, row as isize, col as isize);
    for dr in -r_i..=r_i {
        for dc in -r_i..=r_i {
            if !covers(ot.shape, r, dr, dc) {
                continue;
            }
            let (y, x) = ((row_i + dr) as usize, (col_i + dc) as usize);
            let v = texture(ot.texture, dr, dc);
            for ch in 0..3 {
                img.set(&[ch, y, x], ot.color[ch] * v * gain);
            }
        }
    }
}

/// Renders one scene of class `class_id`.
pub fn gen_scene(class_id: usize, num_classes: usize, rng: &mut Rng, geom: &GeomConfig) -> Result<SceneExample> {
    geom.validate()?;
    if num_classes < 2 || class_id >= num_classes {
        return Err(Error::LabelOutOfRange {
            label: class_id,
            classes: num_classes,
        });
    }
    let total_types = num_object_types(num_classes);
    let mut types = class_signature(class_id, num_classes);
    rng.shuffle(&mut types);
    let mut placed: Vec<(usize, usize, usize)> = Vec::with_capacity(types.len());
    for _ in &types {
        let spot = place(rng, geom, &placed).ok_or(Error::PlacementFailure(class_id))?;
        placed.push(spot);
    }
    let mut extra = Vec::with_capacity(geom.distractors);
    for _ in 0..geom.distractors {
        let t = rng.below(total_types);
        let in_rgb = rng.below(2) == 0;
        let all: Vec<_> = placed.iter().chain(extra.iter().map(|(s, _, _)| s)).copied().collect();
        // distractors are best effort: no room means no distractor
        if let Some(spot) = place(rng, geom, &all) {
            extra.push((spot, t, in_rgb));
        }
    }
    let mut x_rgb = background(rng, geom)?;
    let mut x_d = background(rng, geom)?;
    for (&t, &spot) in types.iter().zip(&placed) {
        let ot = object_type(t, total_types);
        draw_object(&mut x_rgb, &ot, spot, 1.0);
        draw_object(&mut x_d, &ot, spot, ot.depth_gain);
    }
    for &(spot, t, in_rgb) in &extra {
        let ot = object_type(t, total_types);
        if in_rgb {
            draw_object(&mut x_rgb, &ot, spot, 1.0);
        } else {
            draw_object(&mut x_d, &ot, spot, ot.depth_gain);
        }
    }
    Ok(SceneExample {
        x_rgb,
        x_d,
        label: class_id,
        object_centers: placed.iter().map(|&(r, c, _)| (r, c)).collect(),
        object_radius: geom.radius_max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// Certainly covered by an object, whatever its shape and radius.
    Object,
    /// Farther than the largest radius from every centre.
    Background,
    /// Anything in between.
    Edge,
}

impl SceneExample {
    pub fn region(&self, row: usize, col: usize, radius_min: usize) -> Region {
        let core = (radius_min / 2) as isize;
        let inside = self.object_centers.iter().any(|&(y, x)| {
            let (dy, dx) = (y as isize - row as isize, x as isize - col as isize);
            dy * dy + dx * dx <= core * core
        });
        if inside {
            return Region::Object;
        }
        let far = self
            .object_centers
            .iter()
            .all(|&(y, x)| y.abs_diff(row).max(x.abs_diff(col)) > self.object_radius);
        if far {
            Region::Background
        } else {
            Region::Edge
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::BadManifest(format!("unknown split {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub num_classes: usize,
    /// Training pool size before the validation carve-out.
    pub train: usize,
    pub test: usize,
    pub geom: GeomConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            train: 300,
            test: 120,
            geom: GeomConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRef {
    pub split: Split,
    pub label: usize,
    pub centers: Vec<(usize, usize)>,
    pub rgb_file: String,
    pub d_file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub seed: u64,
    pub version: u32,
    pub geom: GeomConfig,
    pub samples: Vec<SampleRef>,
    /// Directory the sample paths are relative to.
    pub root: PathBuf,
}

/// Class counts differing by at most one, summing to `n`.
pub fn stratified_counts(n: usize, classes: usize) -> Vec<usize> {
    (0..classes)
        .map(|c| n / classes + usize::from(c < n % classes))
        .collect()
}

pub fn val_count(class_count: usize) -> usize {
    (class_count as f64 * VAL_FRACTION).round() as usize
}

/// Generates every split into `out_dir` and writes the manifest.
pub fn gen_dataset(config: &DataConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    config.geom.validate()?;
    if config.num_classes < 2 {
        return Err(Error::BadConfig("need at least two classes".into()));
    }
    // (split, label) per sample index: training pool first, then test
    let mut plan: Vec<(Split, usize)> = Vec::with_capacity(config.train + config.test);
    let mut carve_rng = Rng::substream(seed, u64::MAX);
    let mut pool: Vec<(Split, usize)> = Vec::new();
    for (c, &count) in stratified_counts(config.train, config.num_classes).iter().enumerate() {
        let mut splits: Vec<Split> = (0..count)
            .map(|i| if i < val_count(count) { Split::Val } else { Split::Train })
            .collect();
        carve_rng.shuffle(&mut splits);
        pool.extend(splits.into_iter().map(|s| (s, c)));
    }
    // interleave classes so files are not grouped by label
    carve_rng.shuffle(&mut pool);
    plan.extend(pool);
    let mut test: Vec<(Split, usize)> = stratified_counts(config.test, config.num_classes)
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n((Split::Test, c), n))
        .collect();
    carve_rng.shuffle(&mut test);
    plan.extend(test);

    for split in [Split::Train, Split::Val, Split::Test] {
        fs::create_dir_all(out_dir.join(split.name()))?;
    }
    let mut samples = Vec::with_capacity(plan.len());
    for (i, &(split, label)) in plan.iter().enumerate() {
        let mut rng = Rng::substream(seed, i as u64);
        let scene = gen_scene(label, config.num_classes, &mut rng, &config.geom)?;
        let rgb_file = format!("{}/{i:05}_rgb.dten", split.name());
        let d_file = format!("{}/{i:05}_d.dten", split.name());
        io::save(out_dir.join(&rgb_file), &scene.x_rgb)?;
        io::save(out_dir.join(&d_file), &scene.x_d)?;
        samples.push(SampleRef {
            split,
            label,
            centers: scene.object_centers,
            rgb_file,
            d_file,
        });
    }
    let manifest = DatasetManifest {
        num_classes: config.num_classes,
        seed,
        version: GENERATOR_VERSION,
        geom: config.geom,
        samples,
        root: out_dir.to_path_buf(),
    };
    fs::write(out_dir.join(MANIFEST_NAME), manifest.to_text())?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    pub fn to_text(&self) -> String {
        let g = &self.geom;
        let mut out = String::new();
        let _ = writeln!(out, "num_classes={}", self.num_classes);
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "version={}", self.version);
        let _ = writeln!(out, "size={}", g.size);
        let _ = writeln!(out, "radius_min={}", g.radius_min);
        let _ = writeln!(out, "radius={}", g.radius_max);
        let _ = writeln!(out, "noise={:?}", g.noise);
        let _ = writeln!(out, "smoothness={:?}", g.smoothness);
        let _ = writeln!(out, "distractors={}", g.distractors);
        for split in [Split::Train, Split::Val, Split::Test] {
            let _ = writeln!(out, "count_{}={}", split.name(), self.count(split));
        }
        for s in &self.samples {
            let centers: Vec<String> = s.centers.iter().map(|(r, c)| format!("{r},{c}")).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                s.split.name(),
                s.label,
                centers.join(";"),
                s.rgb_file,
                s.d_file
            );
        }
        out
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let bad = |m: String| Error::BadManifest(m);
        let mut header = std::collections::BTreeMap::new();
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            if line.contains('\t') {
                let f: Vec<&str> = line.split('\t').collect();
                if f.len() != 5 {
                    return Err(bad(format!("line {}: expected 5 fields", n + 1)));
                }
                let label = f[1]
                    .parse()
                    .map_err(|_| bad(format!("line {}: bad label", n + 1)))?;
                let centers = f[2]
                    .split(';')
                    .filter(|s| !s.is_empty())
                    .map(|p| {
                        let (r, c) = p.split_once(',')?;
                        Some((r.parse().ok()?, c.parse().ok()?))
                    })
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| bad(format!("line {}: bad centers", n + 1)))?;
                samples.push(SampleRef {
                    split: Split::parse(f[0])?,
                    label,
                    centers,
                    rgb_file: f[3].to_string(),
                    d_file: f[4].to_string(),
                });
            } else {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| bad(format!("line {}: not key=value", n + 1)))?;
                header.insert(k.to_string(), v.to_string());
            }
        }
        fn get<T: std::str::FromStr>(
            h: &std::collections::BTreeMap<String, String>,
            k: &str,
        ) -> Result<T> {
            h.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::BadManifest(format!("missing or bad header key {k}")))
        }
        let m = DatasetManifest {
            num_classes: get(&header, "num_classes")?,
            seed: get(&header, "seed")?,
            version: get(&header, "version")?,
            geom: GeomConfig {
                size: get(&header, "size")?,
                radius_min: get(&header, "radius_min")?,
                radius_max: get(&header, "radius")?,
                noise: get(&header, "noise")?,
                smoothness: get(&header, "smoothness")?,
                distractors: get(&header, "distractors")?,
            },
            samples,
            root: root.to_path_buf(),
        };
        for split in [Split::Train, Split::Val, Split::Test] {
            let declared: usize = get(&header, &format!("count_{}", split.name()))?;
            if declared != m.count(split) {
                return Err(bad(format!("{} count mismatch", split.name())));
            }
        }
        if let Some(s) = m.samples.iter().find(|s| s.label >= m.num_classes) {
            return Err(bad(format!("label {} out of range", s.label)));
        }
        Ok(m)
    }

    /// Reads a manifest file; sample paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingFile(path.to_path_buf()))
            }
            Err(e) => return Err(e.into()),
        };
        let root = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, root)
    }

    /// Examples of one split in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<SceneExample>> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| {
                Ok(SceneExample {
                    x_rgb: io::load(self.root.join(&s.rgb_file))?,
                    x_d: io::load(self.root.join(&s.d_file))?,
                    label: s.label,
                    object_centers: s.centers.clone(),
                    object_radius: self.geom.radius_max,
                })
            })
            .collect()
    }
}

pub fn load_dataset(manifest_path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(manifest_path)
}

/// Visiting order of `n` samples in a given epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::substream(seed, epoch as u64).shuffle(&mut idx);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cosine_similarity;

    fn pixel(t: &Tensor, r: usize, c: usize) -> [f64; 3] {
        [t.get(&[0, r, c]), t.get(&[1, r, c]), t.get(&[2, r, c])]
    }

    #[test]
    fn zero_noise_background_is_half() {
        let geom = GeomConfig {
            noise: 0.0,
            distractors: 0,
            ..Default::default()
        };
        let s = gen_scene(2, 6, &mut Rng::new(1), &geom).unwrap();
        let mut background = 0;
        for r in 0..32 {
            for c in 0..32 {
                if s.region(r, c, geom.radius_min) == Region::Background {
                    assert_eq!(pixel(&s.x_rgb, r, c), [0.5; 3]);
                    assert_eq!(pixel(&s.x_d, r, c), [0.5; 3]);
                    background += 1;
                }
            }
        }
        assert!(background > 500);
    }

    #[test]
    fn scenes_are_deterministic_and_valid() {
        let geom = GeomConfig::default();
        for c in 0..6 {
            let a = gen_scene(c, 6, &mut Rng::new(9 + c as u64), &geom).unwrap();
            let b = gen_scene(c, 6, &mut Rng::new(9 + c as u64), &geom).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.object_centers.len(), class_signature(c, 6).len());
            for t in [&a.x_rgb, &a.x_d] {
                assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            for &(r, col) in &a.object_centers {
                assert!(r >= geom.radius_min && col >= geom.radius_min);
                assert!(r + geom.radius_min < 32 && col + geom.radius_min < 32);
            }
        }
    }

    #[test]
    fn signatures_are_distinct_and_overlap() {
        let n = 6;
        let sigs: Vec<Vec<usize>> = (0..n)
            .map(|c| {
                let mut s = class_signature(c, n);
                s.sort();
                s
            })
            .collect();
        for i in 0..n {
            assert!((2..=3).contains(&sigs[i].len()));
            assert!(sigs[i].iter().all(|&t| t < num_object_types(n)));
            for j in 0..i {
                assert_ne!(sigs[i], sigs[j]);
            }
        }
        let shared = sigs[0].iter().filter(|t| sigs[1].contains(t)).count();
        assert_eq!(shared, 1);
    }

    #[test]
    fn placement_failure_when_crowded() {
        let geom = GeomConfig {
            size: 11,
            radius_min: 5,
            radius_max: 5,
            ..Default::default()
        };
        assert!(matches!(
            gen_scene(0, 6, &mut Rng::new(0), &geom),
            Err(Error::PlacementFailure(0))
        ));
    }

    #[test]
    fn object_correlation_exceeds_background() {
        let geom = GeomConfig::default();
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for i in 0..100 {
            let s = gen_scene(i % 6, 6, &mut Rng::substream(3, i as u64), &geom).unwrap();
            let (mut si, mut ni, mut so, mut no) = (0.0, 0, 0.0, 0);
            for r in 0..32 {
                for c in 0..32 {
                    let cos = cosine_similarity(&pixel(&s.x_rgb, r, c), &pixel(&s.x_d, r, c));
                    match s.region(r, c, geom.radius_min) {
                        Region::Object => {
                            si += cos;
                            ni += 1;
                        }
                        Region::Background => {
                            so += cos;
                            no += 1;
                        }
                        Region::Edge => {}
                    }
                }
            }
            inside.push(si / ni as f64);
            outside.push(so / no as f64);
        }
        let mi = inside.iter().sum::<f64>() / 100.0;
        let mo = outside.iter().sum::<f64>() / 100.0;
        assert!(mi - mo >= 0.3, "inside {mi} outside {mo}");
    }

    #[test]
    fn stratified_arithmetic() {
        assert_eq!(stratified_counts(300, 10), vec![30; 10]);
        assert_eq!(val_count(30), 6);
        let c = stratified_counts(20, 6);
        assert_eq!(c.iter().sum::<usize>(), 20);
        assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
    }

    #[test]
    fn epoch_shuffles_differ_and_repeat() {
        let a = epoch_order(50, 4, 1);
        let b = epoch_order(50, 4, 2);
        assert_ne!(a, b);
        assert_eq!(a, epoch_order(50, 4, 1));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn manifest_rejects_garbage() {
        let root = Path::new(".");
        assert!(matches!(
            DatasetManifest::parse("num_classes=2\n", root),
            Err(Error::BadManifest(_))
        ));
        assert!(matches!(
            DatasetManifest::parse("train\t0\t1,2\n", root),
            Err(Error::BadManifest(_))
        ));
        assert!(matches!(
            DatasetManifest::load(Path::new("/nonexistent/manifest.txt")),
            Err(Error::MissingFile(_))
        ));
    }
}

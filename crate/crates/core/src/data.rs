//! Synthetic lesion-image generation, hair-arc augmentation, dataset
//! manifests, and stratified fold splitting.
//!
//! Generation is a pure function of (config, seed): each sample draws from
//! its own RNG stream derived from the dataset seed and sample index, so
//! re-running yields byte-identical datasets.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

/// Provenance of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Real,
    SyntheticGan,
    SyntheticToy,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Real => write!(f, "real"),
            Source::SyntheticGan => write!(f, "synthetic_gan"),
            Source::SyntheticToy => write!(f, "synthetic_toy"),
        }
    }
}

/// One image with its melanoma label, hair label, and provenance.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub id: String,
    pub image: Image,
    pub melanoma: u8,
    pub hair: u8,
    pub source: Source,
}

/// An ordered collection of samples with unique ids.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.melanoma == 1).count()
    }

    /// Phi coefficient between the melanoma and hair labels.
    pub fn label_phi(&self) -> f64 {
        let (mut n11, mut n10, mut n01, mut n00) = (0f64, 0f64, 0f64, 0f64);
        for s in &self.samples {
            match (s.melanoma, s.hair) {
                (1, 1) => n11 += 1.0,
                (1, 0) => n10 += 1.0,
                (0, 1) => n01 += 1.0,
                _ => n00 += 1.0,
            }
        }
        let denom = ((n11 + n10) * (n01 + n00) * (n11 + n01) * (n10 + n00)).sqrt();
        if denom == 0.0 {
            0.0
        } else {
            (n11 * n00 - n10 * n01) / denom
        }
    }
}

// ───────────────────────── toy lesion generator ─────────────────────────

/// Parameters the generator sampled for one lesion, exposed so tests can
/// check the class-conditional distributions directly.
#[derive(Clone, Copy, Debug)]
pub struct LesionParams {
    pub irregularity: f64,
    pub radius: f64,
}

/// Render a skin-toned background with an elliptical lesion. Class 1 gets an
/// irregular border and a darker, heterogeneous interior; class 0 a regular
/// homogeneous one.
pub fn gen_lesion_image(class: u8, size: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    gen_lesion_with_params(class, size, rng).map(|(img, _)| img)
}

pub fn gen_lesion_with_params(
    class: u8,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Image, LesionParams)> {
    if size < 16 {
        return Err(Error::Parameter {
            op: "gen_lesion_image",
            detail: format!("size must be >= 16, got {}", size),
        });
    }
    if class > 1 {
        return Err(Error::Parameter {
            op: "gen_lesion_image",
            detail: format!("class must be 0 or 1, got {}", class),
        });
    }
    let s = size as f64;
    let mut img = Image::new(size, size);

    // skin background with a mild vertical gradient and speckle
    let base = [
        0.82 + rng.gen_range(-0.04..0.04),
        0.62 + rng.gen_range(-0.04..0.04),
        0.55 + rng.gen_range(-0.04..0.04),
    ];
    for y in 0..size {
        let grad = 0.03 * (y as f64 / s - 0.5);
        for x in 0..size {
            let speckle = rng.gen_range(-0.012..0.012);
            for c in 0..3 {
                img.set(c, y, x, base[c] + grad + speckle);
            }
        }
    }

    // lesion geometry
    let cx = s * 0.5 + rng.gen_range(-s / 10.0..s / 10.0);
    let cy = s * 0.5 + rng.gen_range(-s / 10.0..s / 10.0);
    let r0 = s * rng.gen_range(0.16..0.24);
    let irregularity = if class == 1 {
        rng.gen_range(0.12..0.30)
    } else {
        rng.gen_range(0.015..0.06)
    };
    let mut harmonics = [(0.0, 0.0); 4];
    for (k, h) in harmonics.iter_mut().enumerate() {
        let amp = irregularity * rng.gen_range(0.5..1.0) / ((k + 2) as f64).sqrt();
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        *h = (amp, phase);
    }

    // interior appearance
    let color = if class == 1 {
        [
            0.38 + rng.gen_range(-0.03..0.03),
            0.24 + rng.gen_range(-0.03..0.03),
            0.19 + rng.gen_range(-0.03..0.03),
        ]
    } else {
        [
            0.47 + rng.gen_range(-0.03..0.03),
            0.31 + rng.gen_range(-0.03..0.03),
            0.24 + rng.gen_range(-0.03..0.03),
        ]
    };
    let mut blotches: Vec<(f64, f64, f64, f64)> = Vec::new();
    if class == 1 {
        for _ in 0..rng.gen_range(2..=4usize) {
            let bd = rng.gen_range(0.0..0.55) * r0;
            let ba = rng.gen_range(0.0..std::f64::consts::TAU);
            let br = rng.gen_range(0.15..0.35) * r0;
            let dark = rng.gen_range(0.55..0.80);
            blotches.push((cx + bd * ba.cos(), cy + bd * ba.sin(), br, dark));
        }
    }

    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let rho = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx);
            let mut r = r0;
            for (k, (amp, phase)) in harmonics.iter().enumerate() {
                r += r0 * amp * ((k + 2) as f64 * theta + phase).sin();
            }
            let alpha = (r - rho + 0.5).clamp(0.0, 1.0);
            if alpha == 0.0 {
                continue;
            }
            // slightly lighter toward the rim
            let shade = 0.85 + 0.15 * (rho / r.max(1e-9)).min(1.0);
            let mut lesion = [color[0] * shade, color[1] * shade, color[2] * shade];
            for &(bx, by, br, dark) in &blotches {
                let bd = ((x as f64 - bx).powi(2) + (y as f64 - by).powi(2)).sqrt();
                let ba = (br - bd + 0.5).clamp(0.0, 1.0);
                if ba > 0.0 {
                    for l in lesion.iter_mut() {
                        *l *= 1.0 - ba * (1.0 - dark);
                    }
                }
            }
            for c in 0..3 {
                let bg = img.get(c, y, x);
                img.set(c, y, x, bg * (1.0 - alpha) + lesion[c] * alpha);
            }
        }
    }
    img.clamp01();
    Ok((img, LesionParams { irregularity, radius: r0 }))
}

/// Draw `n_arcs` anti-aliased gray/black circular-arc strokes. Returns the
/// augmented image and the hair label (1 iff at least one arc was drawn).
pub fn add_hair_arcs(image: &Image, n_arcs: usize, rng: &mut ChaCha8Rng) -> (Image, u8) {
    if n_arcs == 0 {
        return (image.clone(), 0);
    }
    let (h, w) = (image.height(), image.width());
    let s = h.max(w) as f64;
    let mut out = image.clone();
    let mut coverage = vec![0.0f64; h * w];
    for _ in 0..n_arcs {
        let cx = rng.gen_range(-0.2..1.2) * w as f64;
        let cy = rng.gen_range(-0.2..1.2) * h as f64;
        let radius = rng.gen_range(0.25..0.70) * s;
        let theta0 = rng.gen_range(0.0..std::f64::consts::TAU);
        let span = rng.gen_range(0.5..1.2) * std::f64::consts::PI;
        let width = rng.gen_range(1..=3usize) as f64;
        let dark = rng.gen_bool(0.5);
        let shade: f64 = (if dark { 0.05 } else { 0.45 }) + rng.gen_range(-0.05..0.05);
        let shade = shade.clamp(0.0, 1.0);

        coverage.iter_mut().for_each(|v| *v = 0.0);
        let steps = ((radius * span) / 0.5).ceil().max(2.0) as usize;
        let half = width / 2.0;
        for i in 0..=steps {
            let t = theta0 + span * i as f64 / steps as f64;
            let px = cx + radius * t.cos();
            let py = cy + radius * t.sin();
            let y_lo = (py - half - 1.0).floor().max(0.0) as usize;
            let y_hi = (py + half + 1.0).ceil().min((h - 1) as f64) as usize;
            let x_lo = (px - half - 1.0).floor().max(0.0) as usize;
            let x_hi = (px + half + 1.0).ceil().min((w - 1) as f64) as usize;
            if py + half < -1.0 || px + half < -1.0 {
                continue;
            }
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let d = ((x as f64 - px).powi(2) + (y as f64 - py).powi(2)).sqrt();
                    let a = (half - d + 0.5).clamp(0.0, 1.0);
                    let cell = &mut coverage[y * w + x];
                    *cell = cell.max(a);
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let a = coverage[y * w + x];
                if a > 0.0 {
                    for c in 0..3 {
                        let v = out.get(c, y, x);
                        out.set(c, y, x, v * (1.0 - a) + shade * a);
                    }
                }
            }
        }
    }
    (out, 1)
}

// ───────────────────────── confounded dataset ─────────────────────────

/// Configuration for the synthetic confounded train/test pair. Hair
/// co-occurs with melanoma at phi-correlation `train_hair_correlation` in
/// the train split and independently (correlation 0) in the test split.
#[derive(Clone, Debug)]
pub struct ConfoundConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub positive_rate: f64,
    pub train_hair_correlation: f64,
    pub image_size: usize,
    pub arcs_min: usize,
    pub arcs_max: usize,
    pub seed: u64,
}

impl Default for ConfoundConfig {
    fn default() -> Self {
        ConfoundConfig {
            n_train: 2000,
            n_test: 500,
            positive_rate: 0.5,
            train_hair_correlation: 0.8,
            image_size: 64,
            arcs_min: 3,
            arcs_max: 7,
            seed: 42,
        }
    }
}

/// Hair marginal rate used by the confound construction.
const HAIR_RATE: f64 = 0.5;

/// Joint label counts realizing the requested phi coefficient.
fn contingency(n: usize, p: f64, phi: f64, op: &'static str) -> Result<[usize; 4]> {
    if !(0.0 < p && p < 1.0) {
        return Err(Error::Config(format!("{op}: positive_rate must lie in (0,1), got {p}")));
    }
    if !(-1.0..=1.0).contains(&phi) {
        return Err(Error::Config(format!("{op}: correlation must lie in [-1,1], got {phi}")));
    }
    let q = HAIR_RATE;
    let p11 = p * q + phi * (p * (1.0 - p) * q * (1.0 - q)).sqrt();
    let cells = [p11, p - p11, q - p11, 1.0 - p - q + p11];
    if cells.iter().any(|&c| c < -1e-12) {
        return Err(Error::Config(format!(
            "{op}: correlation {phi} infeasible at positive_rate {p} (cell probabilities {cells:?})"
        )));
    }
    let n_pos = (n as f64 * p).round() as usize;
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Config(format!(
            "{op}: {n} samples at positive_rate {p} leave an empty class"
        )));
    }
    let n11 = (n_pos as f64 * (p11 / p)).round().min(n_pos as f64) as usize;
    let n01 = (n_neg as f64 * (cells[2] / (1.0 - p))).round().min(n_neg as f64) as usize;
    Ok([n11, n_pos - n11, n01, n_neg - n01])
}

fn render_split(
    n: usize,
    table: [usize; 4],
    cfg: &ConfoundConfig,
    split: &str,
    seed: u64,
) -> Dataset {
    // labels in deterministic order, then shuffled
    let mut labels: Vec<(u8, u8)> = Vec::with_capacity(n);
    labels.extend(std::iter::repeat((1, 1)).take(table[0]));
    labels.extend(std::iter::repeat((1, 0)).take(table[1]));
    labels.extend(std::iter::repeat((0, 1)).take(table[2]));
    labels.extend(std::iter::repeat((0, 0)).take(table[3]));
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = rng::stream(seed, &format!("confound.{split}.order"));
    for i in (1..n).rev() {
        let j = shuffle_rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let stream_label = format!("confound.{split}");
    let samples = order
        .iter()
        .enumerate()
        .map(|(idx, &li)| {
            let (melanoma, hair) = labels[li];
            let mut sample_rng = rng::indexed_stream(seed, &stream_label, idx as u64);
            let lesion = gen_lesion_image(melanoma, cfg.image_size, &mut sample_rng)
                .expect("size validated by caller");
            let (image, hair_label) = if hair == 1 {
                let arcs = sample_rng.gen_range(cfg.arcs_min..=cfg.arcs_max.max(cfg.arcs_min));
                add_hair_arcs(&lesion, arcs.max(1), &mut sample_rng)
            } else {
                (lesion, 0)
            };
            LabeledSample {
                id: format!("{split}_{idx:05}"),
                image,
                melanoma,
                hair: hair_label,
                source: Source::SyntheticToy,
            }
        })
        .collect();
    Dataset { samples }
}

/// Build the confounded train/test pair described by `cfg`.
pub fn build_confounded_dataset(cfg: &ConfoundConfig) -> Result<(Dataset, Dataset)> {
    if cfg.image_size < 16 {
        return Err(Error::Config(format!(
            "image_size must be >= 16, got {}",
            cfg.image_size
        )));
    }
    if cfg.n_train < 2 || cfg.n_test < 2 {
        return Err(Error::Config("n_train and n_test must be >= 2".into()));
    }
    let train_table = contingency(
        cfg.n_train,
        cfg.positive_rate,
        cfg.train_hair_correlation,
        "build_confounded_dataset(train)",
    )?;
    let test_table = contingency(cfg.n_test, cfg.positive_rate, 0.0, "build_confounded_dataset(test)")?;
    let train = render_split(cfg.n_train, train_table, cfg, "train", cfg.seed);
    let test = render_split(cfg.n_test, test_table, cfg, "test", cfg.seed);
    Ok((train, test))
}

/// Enlarge a dataset to `target` samples by re-drawing source images with
/// random hair arcs (the hair-augmentation recipe used for generalization
/// testing). Originals are kept; each extra copy cycles through the source
/// and receives `0..=arcs_max` arcs.
pub fn augment_with_hair(src: &Dataset, target: usize, arcs_max: usize, seed: u64) -> Result<Dataset> {
    if src.is_empty() {
        return Err(Error::Config("cannot augment an empty dataset".into()));
    }
    let mut out = src.clone();
    let mut idx = 0usize;
    while out.len() < target {
        let base = &src.samples[idx % src.len()];
        let mut r = rng::indexed_stream(seed, "hairaug", idx as u64);
        let arcs = r.gen_range(0..=arcs_max);
        let (image, hair) = add_hair_arcs(&base.image, arcs, &mut r);
        out.samples.push(LabeledSample {
            id: format!("{}_aug{:05}", base.id, idx),
            image,
            melanoma: base.melanoma,
            hair: if arcs > 0 { hair } else { base.hair },
            source: base.source,
        });
        idx += 1;
    }
    Ok(out)
}

// ───────────────────────── stratified k-fold ─────────────────────────

/// Stratified k-fold index splits: validation sets partition the dataset
/// and each fold's positive count differs from ceil(n_pos/k) by at most 1.
pub fn stratified_kfold(
    dataset: &Dataset,
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let labels: Vec<u8> = dataset.samples.iter().map(|s| s.melanoma).collect();
    stratified_kfold_labels(&labels, k, seed)
}

/// Same as [`stratified_kfold`] but on a bare label vector.
pub fn stratified_kfold_labels(
    labels: &[u8],
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::Parameter {
            op: "stratified_kfold",
            detail: format!("k must be >= 2, got {k}"),
        });
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        by_class[usize::from(l == 1)].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < k {
            return Err(Error::Stratification {
                class: class as u8,
                count: members.len(),
                k,
            });
        }
    }
    let mut rng = rng::stream(seed, "kfold.shuffle");
    for members in by_class.iter_mut() {
        for i in (1..members.len()).rev() {
            let j = rng.gen_range(0..=i);
            members.swap(i, j);
        }
    }
    let mut val_folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for members in &by_class {
        for (i, &idx) in members.iter().enumerate() {
            val_folds[i % k].push(idx);
        }
    }
    let mut out = Vec::with_capacity(k);
    for f in 0..k {
        let val: BTreeSet<usize> = val_folds[f].iter().cloned().collect();
        let train: Vec<usize> = (0..labels.len()).filter(|i| !val.contains(i)).collect();
        out.push((train, val.into_iter().collect()));
    }
    Ok(out)
}

// ───────────────────────── manifest IO ─────────────────────────

pub const MANIFEST_HEADER: &str = "path,melanoma,hair,split";

/// One manifest row: image path relative to the manifest, labels, split tag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub melanoma: u8,
    pub hair: u8,
    pub split: String,
}

/// Parsed manifest plus its root directory for resolving image paths.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    /// Rows restricted to one split value.
    pub fn split_rows(&self, split: &str) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    /// Load and decode every image of one split. The sample id is the file
    /// stem; rows with split `synthetic` are tagged [`Source::SyntheticGan`].
    pub fn load_split(&self, split: &str) -> Result<Dataset> {
        let mut samples = Vec::new();
        for row in self.rows.iter().filter(|r| r.split == split) {
            let path = self.root.join(&row.path);
            let image = Image::load_png(&path)?;
            let id = Path::new(&row.path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| row.path.clone());
            samples.push(LabeledSample {
                id,
                image,
                melanoma: row.melanoma,
                hair: row.hair,
                source: if row.split == "synthetic" {
                    Source::SyntheticGan
                } else {
                    Source::Real
                },
            });
        }
        Ok(Dataset { samples })
    }
}

fn parse_binary(path: &Path, row: usize, field: &str, value: &str) -> Result<u8> {
    match value {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::Manifest {
            path: path.display().to_string(),
            row,
            detail: format!("{field} label must be 0 or 1, got '{other}'"),
        }),
    }
}

/// Parse a manifest CSV. Every image path must resolve to a readable file;
/// labels must be exactly binary; ids (file stems) must be unique.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == MANIFEST_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Manifest {
                path: path.display().to_string(),
                row: 1,
                detail: format!("header must be '{MANIFEST_HEADER}', got '{header}'"),
            })
        }
        None => {
            return Err(Error::Manifest {
                path: path.display().to_string(),
                row: 1,
                detail: "empty file".into(),
            })
        }
    }
    let mut rows = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for (lineno, line) in lines {
        let row_num = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Manifest {
                path: path.display().to_string(),
                row: row_num,
                detail: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let melanoma = parse_binary(path, row_num, "melanoma", fields[1])?;
        let hair = parse_binary(path, row_num, "hair", fields[2])?;
        if fields[3].is_empty() {
            return Err(Error::Manifest {
                path: path.display().to_string(),
                row: row_num,
                detail: "split must be non-empty".into(),
            });
        }
        let img_path = root.join(fields[0]);
        if !img_path.is_file() {
            return Err(Error::Manifest {
                path: path.display().to_string(),
                row: row_num,
                detail: format!("image file '{}' does not exist", img_path.display()),
            });
        }
        let id = Path::new(fields[0])
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| fields[0].to_string());
        if !seen_ids.insert(id.clone()) {
            return Err(Error::Manifest {
                path: path.display().to_string(),
                row: row_num,
                detail: format!("duplicate sample id '{id}'"),
            });
        }
        rows.push(ManifestRow {
            path: fields[0].to_string(),
            melanoma,
            hair,
            split: fields[3].to_string(),
        });
    }
    Ok(Manifest { root, rows })
}

/// Write images as PNGs under `dir` and a manifest CSV (UTF-8, LF endings)
/// at `dir/manifest.csv`. Datasets are written in order under their split
/// names; image files are named `<id>.png`.
pub fn save_manifest(datasets: &[(&Dataset, &str)], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut csv = String::from(MANIFEST_HEADER);
    csv.push('\n');
    for (dataset, split) in datasets {
        for sample in &dataset.samples {
            let file = format!("{}.png", sample.id);
            if file.contains(',') {
                return Err(Error::Config(format!(
                    "sample id '{}' would produce a path containing a comma",
                    sample.id
                )));
            }
            sample.image.save_png(&dir.join(&file))?;
            csv.push_str(&format!(
                "{},{},{},{}\n",
                file, sample.melanoma, sample.hair, split
            ));
        }
    }
    let manifest_path = dir.join("manifest.csv");
    let tmp = dir.join("manifest.csv.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.write_all(csv.as_bytes())
            .map_err(|e| Error::io(tmp.display().to_string(), e))?;
    }
    fs::rename(&tmp, &manifest_path).map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(manifest_path)
}

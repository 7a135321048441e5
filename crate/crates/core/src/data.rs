//! Dataset generation and ingestion.
//!
//! The synthetic task mirrors the usual "informative / redundant / repeated /
//! noise" dimension taxonomy: class-conditional Gaussians on a few
//! informative axes, fixed linear combinations for the redundant axes, exact
//! column copies for the repeated axes, and standard-normal noise for the
//! rest. Generation is a pure function of the config.

use crate::exec::{self, ExecMode};
use crate::rng::{substream, Domain};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use std::io::Read;
use std::path::Path;

/// Where a dataset came from, for run manifests.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Synthetic { seed: u64, split: &'static str },
    File { path: String },
    InMemory,
}

/// Input/label pairs with inputs stored row-major.
#[derive(Debug, Clone)]
pub struct Dataset {
    xs: Vec<f64>,
    ys: Vec<f64>,
    d: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 || ys.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if xs.len() != ys.len() * d {
            return Err(Error::DimensionMismatch { expected: ys.len() * d, got: xs.len() });
        }
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite input value".into()));
        }
        if ys.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::InvalidArgument("labels must be +1 or -1".into()));
        }
        Ok(Dataset { xs, ys, d, provenance: Provenance::InMemory })
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.d..(i + 1) * self.d]
    }

    pub fn y(&self, i: usize) -> f64 {
        self.ys[i]
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }
}

/// Configuration for [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub d_informative: usize,
    pub d_redundant: usize,
    pub d_repeated: usize,
    pub d_noise: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Class-conditional mean offset on each informative axis.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            d_informative: 4,
            d_redundant: 10,
            d_repeated: 10,
            d_noise: 76,
            n_train: 500,
            n_test: 500,
            separation: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn d_total(&self) -> usize {
        self.d_informative + self.d_redundant + self.d_repeated + self.d_noise
    }

    fn validate(&self) -> Result<()> {
        if self.d_informative == 0 || self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("informative dims and split sizes must be positive".into()));
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(Error::Config("separation must be positive".into()));
        }
        Ok(())
    }
}

/// Generate train/test splits of the synthetic classification task.
///
/// Column order is fixed: informative, redundant, repeated, noise. Labels are
/// exactly balanced per split. Train and test use disjoint seed substreams.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    // shared structure: redundant-mix coefficients and repeated-column sources
    let mut structure = substream(cfg.seed, Domain::Init, 0, 0);
    let mix: Vec<Vec<f64>> = (0..cfg.d_redundant)
        .map(|_| {
            let mut c: Vec<f64> =
                (0..cfg.d_informative).map(|_| structure.sample::<f64, _>(StandardNormal)).collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            c.iter_mut().for_each(|v| *v /= norm);
            c
        })
        .collect();
    let repeat_src: Vec<usize> = (0..cfg.d_repeated)
        .map(|_| structure.random_range(0..cfg.d_informative + cfg.d_redundant))
        .collect();

    let train = synth_split(cfg, &mix, &repeat_src, Domain::DataTrain, cfg.n_train, "train")?;
    let test = synth_split(cfg, &mix, &repeat_src, Domain::DataTest, cfg.n_test, "test")?;
    Ok((train, test))
}

fn synth_split(
    cfg: &SynthConfig,
    mix: &[Vec<f64>],
    repeat_src: &[usize],
    domain: Domain,
    n: usize,
    split: &'static str,
) -> Result<Dataset> {
    let d = cfg.d_total();
    // exactly balanced labels, deterministically shuffled
    let mut labels: Vec<f64> = (0..n).map(|i| if i < n / 2 { 1.0 } else { -1.0 }).collect();
    let mut shuffler = substream(cfg.seed, Domain::Shuffle, domain as u64, 0);
    for i in (1..n).rev() {
        let j = shuffler.random_range(0..=i);
        labels.swap(i, j);
    }

    let mut xs = vec![0.0; n * d];
    for (i, row) in xs.chunks_exact_mut(d).enumerate() {
        let mut rng = substream(cfg.seed, domain, i as u64, 0);
        let y = labels[i];
        for k in 0..cfg.d_informative {
            row[k] = y * cfg.separation + rng.sample::<f64, _>(StandardNormal);
        }
        for (k, coeffs) in mix.iter().enumerate() {
            row[cfg.d_informative + k] =
                coeffs.iter().zip(&row[..cfg.d_informative]).map(|(c, v)| c * v).sum();
        }
        for (k, &src) in repeat_src.iter().enumerate() {
            row[cfg.d_informative + cfg.d_redundant + k] = row[src];
        }
        let noise_start = cfg.d_informative + cfg.d_redundant + cfg.d_repeated;
        for slot in row[noise_start..].iter_mut() {
            *slot = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut ds = Dataset::new(xs, labels, d)?;
    ds.provenance = Provenance::Synthetic { seed: cfg.seed, split };
    Ok(ds)
}

/// Per-column standardization statistics.
#[derive(Debug, Clone)]
pub struct Stats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Columns whose variance was (numerically) zero and were passed through.
    pub constant: Vec<bool>,
}

/// Standardize columns to mean 0 / variance 1. With `stats` supplied (e.g.
/// train statistics applied to a test split) those are used instead of being
/// recomputed. Zero-variance columns are passed through and flagged.
pub fn standardize(ds: &Dataset, stats: Option<&Stats>) -> Result<(Dataset, Stats)> {
    let d = ds.dim();
    let n = ds.len();
    let stats = match stats {
        Some(s) => {
            if s.means.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: s.means.len() });
            }
            s.clone()
        }
        None => {
            if n < 2 {
                return Err(Error::Degenerate("need at least 2 rows to compute stats".into()));
            }
            let mut means = vec![0.0; d];
            let mut stds = vec![0.0; d];
            let mut constant = vec![false; d];
            for k in 0..d {
                let m = (0..n).map(|i| ds.x(i)[k]).sum::<f64>() / n as f64;
                let var = (0..n).map(|i| (ds.x(i)[k] - m).powi(2)).sum::<f64>() / n as f64;
                means[k] = m;
                if var <= 1e-24 {
                    constant[k] = true;
                    stds[k] = 1.0;
                } else {
                    stds[k] = var.sqrt();
                }
            }
            Stats { means, stds, constant }
        }
    };
    let mode = ExecMode::default();
    let mut xs = vec![0.0; n * d];
    exec::fill_indexed(mode, &mut xs, |idx| {
        let (i, k) = (idx / d, idx % d);
        if stats.constant[k] {
            ds.x(i)[k]
        } else {
            (ds.x(i)[k] - stats.means[k]) / stats.stds[k]
        }
    });
    let mut out = Dataset::new(xs, ds.ys().to_vec(), d)?;
    out.provenance = ds.provenance.clone();
    Ok((out, stats))
}

/// Errors from the IDX container parser, one kind per failure mode.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum IdxError {
    #[error("bad magic number {got:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, got: u32 },
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("unsupported dimension count {0}")]
    BadDims(u32),
}

/// How 0-9 labels are collapsed to binary. No default: a rule must be chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinarizeRule {
    /// Even digits map to +1, odd to -1.
    Parity,
    /// The given digit maps to +1, everything else to -1.
    OneVsRest(u8),
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(buf: &[u8], off: usize) -> std::result::Result<u32, IdxError> {
    let bytes = buf
        .get(off..off + 4)
        .ok_or(IdxError::Truncated { expected: off + 4, got: buf.len() })?;
    Ok(u32::from_be_bytes(bytes.try_into().unwrap()))
}

/// Parse IDX image/label files (big-endian headers, u8 payload). Pixels are
/// scaled to [0, 1] and images flattened row-major.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    rule: BinarizeRule,
) -> Result<Dataset> {
    let mut images = Vec::new();
    std::fs::File::open(images_path)?.read_to_end(&mut images)?;
    let mut labels = Vec::new();
    std::fs::File::open(labels_path)?.read_to_end(&mut labels)?;
    let ds = parse_idx(&images, &labels, rule)?;
    Ok(Dataset {
        provenance: Provenance::File { path: images_path.display().to_string() },
        ..ds
    })
}

/// Parse already-loaded IDX byte buffers.
pub fn parse_idx(images: &[u8], labels: &[u8], rule: BinarizeRule) -> Result<Dataset> {
    let magic = read_u32_be(images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IdxError::BadMagic { expected: IDX_IMAGES_MAGIC, got: magic }.into());
    }
    let n_img = read_u32_be(images, 4)? as usize;
    let rows = read_u32_be(images, 8)? as usize;
    let cols = read_u32_be(images, 12)? as usize;
    let d = rows * cols;
    let payload = &images[16..];
    if payload.len() < n_img * d {
        return Err(IdxError::Truncated { expected: n_img * d, got: payload.len() }.into());
    }

    let lmagic = read_u32_be(labels, 0)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(IdxError::BadMagic { expected: IDX_LABELS_MAGIC, got: lmagic }.into());
    }
    let n_lab = read_u32_be(labels, 4)? as usize;
    if n_lab != n_img {
        return Err(IdxError::CountMismatch { images: n_img, labels: n_lab }.into());
    }
    let lab_payload = &labels[8..];
    if lab_payload.len() < n_lab {
        return Err(IdxError::Truncated { expected: n_lab, got: lab_payload.len() }.into());
    }

    let xs: Vec<f64> = payload[..n_img * d].iter().map(|&b| b as f64 / 255.0).collect();
    let ys: Vec<f64> = lab_payload[..n_lab]
        .iter()
        .map(|&l| match rule {
            BinarizeRule::Parity => {
                if l % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            BinarizeRule::OneVsRest(target) => {
                if l == target {
                    1.0
                } else {
                    -1.0
                }
            }
        })
        .collect();
    Dataset::new(xs, ys, d)
}

/// Load a delimited text file: header row, tab-separated, labels in the
/// column named `label_col` (values +1/-1), all other columns are features.
pub fn load_delimited(path: &Path, label_col: &str) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::EmptyDataset)?;
    let cols: Vec<&str> = header.split('\t').collect();
    let label_idx = cols
        .iter()
        .position(|c| *c == label_col)
        .ok_or_else(|| Error::Config(format!("label column '{label_col}' not found")))?;
    let d = cols.len() - 1;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != cols.len() {
            return Err(Error::Config(format!(
                "row {}: expected {} fields, got {}",
                lineno + 2,
                cols.len(),
                fields.len()
            )));
        }
        for (k, f) in fields.iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::Config(format!("row {}: bad number '{f}'", lineno + 2)))?;
            if k == label_idx {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    let mut ds = Dataset::new(xs, ys, d)?;
    ds.provenance = Provenance::File { path: path.display().to_string() };
    Ok(ds)
}

/// Write a dataset in the delimited-text layout accepted by [`load_delimited`].
pub fn save_delimited(ds: &Dataset, path: &Path, label_col: &str) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header: Vec<String> = (0..ds.dim()).map(|k| format!("x{k}")).collect();
    header.push(label_col.to_string());
    writeln!(f, "{}", header.join("\t"))?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = ds.x(i).iter().map(|v| format!("{v:.17e}")).collect();
        row.push(format!("{}", ds.y(i)));
        writeln!(f, "{}", row.join("\t"))?;
    }
    Ok(())
}

//! Synthetic two-dimensional datasets and CSV ingestion.
//!
//! Generated data lives in the box `[−3, 3]²`. Two moons are the usual
//! interleaved half circles, shifted to the origin and scaled by 1.5;
//! blobs put `C` isotropic Gaussians (standard deviation `noise`) on a circle
//! of radius [`BLOB_RADIUS`].

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attacks::{Batch, DomainBox};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DOMAIN_LO: f64 = -3.0;
pub const DOMAIN_HI: f64 = 3.0;
pub const BLOB_RADIUS: f64 = 2.0;
const MOON_SCALE: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoMoons,
    GaussianBlobs,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_moons" => Ok(Self::TwoMoons),
            "gaussian_blobs" => Ok(Self::GaussianBlobs),
            other => Err(Error::Config(format!("unknown dataset kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major `[n × l]` features.
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub domain: DomainBox<f64>,
    pub splits: Vec<Split>,
    pub provenance: Provenance,
    /// Nominal class margin of the generator, if it has one.
    pub margin: Option<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Examples of one split, with their dataset positions as ids.
    pub fn batch(&self, split: Split) -> Batch<f64> {
        let idx: Vec<usize> = (0..self.len()).filter(|&k| self.splits[k] == split).collect();
        Batch {
            inputs: idx.iter().map(|&k| Tensor::vector(self.features[k].clone())).collect(),
            labels: idx.iter().map(|&k| self.labels[k]).collect(),
            ids: idx,
        }
    }

    /// `label,f1,…,fl` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label");
        for j in 0..self.input_dim() {
            s.push_str(&format!(",x{j}"));
        }
        s.push('\n');
        for (f, y) in self.features.iter().zip(&self.labels) {
            s.push_str(&y.to_string());
            for v in f {
                s.push(',');
                s.push_str(&crate::metrics::fmt_f64(*v));
            }
            s.push('\n');
        }
        s
    }
}

/// Class margin of the blob generator: chord between neighbouring centers
/// minus four standard deviations.
pub fn blob_margin(classes: usize, noise: f64) -> f64 {
    2.0 * BLOB_RADIUS * (PI / classes as f64).sin() - 4.0 * noise
}

/// Margin of the noiseless moons after scaling (closest approach of the
/// two arcs is 0.5 before scaling), minus four standard deviations.
pub fn moons_margin(noise: f64) -> f64 {
    MOON_SCALE * (0.5 - 4.0 * noise)
}

/// Seeded 70/15/15 split assignment.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x53_504c_4954));
    let n_train = (n as f64 * 0.70).round() as usize;
    let n_val = (n as f64 * 0.15).round() as usize;
    let mut splits = vec![Split::Test; n];
    for (rank, &k) in idx.iter().enumerate() {
        splits[k] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

pub fn gen_dataset(kind: DatasetKind, n: usize, noise: f64, classes: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if n < 10 * classes {
        return Err(Error::Config(format!("n = {n} must be at least 10·C = {}", 10 * classes)));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::Config(format!("noise = {noise} must be >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid standard deviation");
    let jitter = |rng: &mut ChaCha8Rng| if noise > 0.0 { normal.sample(rng) } else { 0.0 };
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let margin = match kind {
        DatasetKind::TwoMoons => {
            if classes != 2 {
                return Err(Error::Config("two_moons has exactly 2 classes".into()));
            }
            for k in 0..n {
                let y = k % 2;
                let th = rng.random_range(0.0..=PI);
                let (bx, by) = if y == 0 {
                    (th.cos(), th.sin())
                } else {
                    (1.0 - th.cos(), 0.5 - th.sin())
                };
                let px = MOON_SCALE * (bx - 0.5 + jitter(&mut rng));
                let py = MOON_SCALE * (by - 0.25 + jitter(&mut rng));
                features.push(vec![px, py]);
                labels.push(y);
            }
            moons_margin(noise)
        }
        DatasetKind::GaussianBlobs => {
            for k in 0..n {
                let y = k % classes;
                let a = 2.0 * PI * y as f64 / classes as f64;
                let px = BLOB_RADIUS * a.cos() + jitter(&mut rng);
                let py = BLOB_RADIUS * a.sin() + jitter(&mut rng);
                features.push(vec![px, py]);
                labels.push(y);
            }
            blob_margin(classes, noise)
        }
    };
    for f in &mut features {
        for v in f.iter_mut() {
            *v = v.clamp(DOMAIN_LO, DOMAIN_HI);
        }
    }
    let generator = match kind {
        DatasetKind::TwoMoons => "two_moons",
        DatasetKind::GaussianBlobs => "gaussian_blobs",
    };
    Ok(Dataset {
        features,
        labels,
        classes,
        domain: DomainBox::uniform(2, DOMAIN_LO, DOMAIN_HI),
        splits: assign_splits(n, seed),
        provenance: Provenance {
            generator: format!("{generator}(n={n}, noise={noise}, classes={classes})"),
            seed,
        },
        margin: Some(margin),
    })
}

/// Reads `label,f1,…,fl` rows. A first line whose label field is not an
/// integer is treated as a header. The domain box is `domain` when given,
/// else the per-feature data range.
pub fn load_csv(path: &Path, domain: Option<(f64, f64)>, seed: u64) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let head = fields.next().unwrap_or_default();
        let Ok(y) = head.parse::<usize>() else {
            if ln == 0 {
                continue;
            }
            return Err(Error::io(path, format!("line {}: bad label `{head}`", ln + 1)));
        };
        let row = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::io(path, format!("line {}: {e}", ln + 1)))?;
        if row.is_empty() || row.iter().any(|v| !v.is_finite()) {
            return Err(Error::io(path, format!("line {}: need finite features", ln + 1)));
        }
        if let Some(first) = features.first() {
            if first.len() != row.len() {
                return Err(Error::io(
                    path,
                    format!("line {}: {} features, expected {}", ln + 1, row.len(), first.len()),
                ));
            }
        }
        features.push(row);
        labels.push(y);
    }
    if features.is_empty() {
        return Err(Error::io(path, "no data rows"));
    }
    let l = features[0].len();
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let domain = match domain {
        Some((lo, hi)) => {
            if features.iter().flatten().any(|&v| v < lo || v > hi) {
                return Err(Error::io(path, format!("features outside the domain [{lo}, {hi}]")));
            }
            DomainBox::uniform(l, lo, hi)
        }
        None => {
            let mut lo = vec![f64::INFINITY; l];
            let mut hi = vec![f64::NEG_INFINITY; l];
            for f in &features {
                for j in 0..l {
                    lo[j] = lo[j].min(f[j]);
                    hi[j] = hi[j].max(f[j]);
                }
            }
            DomainBox { lo, hi }
        }
    };
    let n = labels.len();
    Ok(Dataset {
        features,
        labels,
        classes: classes.max(2),
        domain,
        splits: assign_splits(n, seed),
        provenance: Provenance {
            generator: format!("csv({})", path.display()),
            seed,
        },
        margin: None,
    })
}

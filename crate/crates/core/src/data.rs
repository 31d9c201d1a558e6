//! Datasets: a seeded synthetic generator and a flat CSV-like file format,
//! both split 80/10/10 into train/validation/test.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Standard deviation of the per-class cluster centers around the origin.
/// Noise around each center has unit variance.
const CENTER_SCALE: f64 = 0.4;

// Separate streams so the split does not depend on how samples were drawn.
const SPLIT_STREAM: u64 = 0x5eed_5b17;
const BLOB_STREAM: u64 = 0xb10b;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetSpec {
    SyntheticBlobs {
        classes: usize,
        dims: usize,
        samples: usize,
    },
    File(PathBuf),
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::SyntheticBlobs { classes, dims, samples } => {
                write!(f, "synthetic-blobs{{{classes},{dims},{samples}}}")
            }
            DatasetSpec::File(p) => write!(f, "{}", p.display()),
        }
    }
}

impl FromStr for DatasetSpec {
    type Err = String;

    /// `synthetic-blobs{classes,dims,n}`; anything else is a file path.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s.is_empty() {
            return Err("empty dataset spec".into());
        }
        let Some(body) = s.strip_prefix("synthetic-blobs") else {
            return Ok(DatasetSpec::File(PathBuf::from(s)));
        };
        let inner = body
            .trim()
            .strip_prefix('{')
            .and_then(|b| b.strip_suffix('}'))
            .ok_or_else(|| format!("expected `synthetic-blobs{{classes,dims,n}}`, got `{s}`"))?;
        let nums: Vec<usize> = inner
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{}`: {e}", p.trim())))
            .collect::<std::result::Result<_, _>>()?;
        let [classes, dims, samples] = nums.as_slice() else {
            return Err(format!("synthetic-blobs takes 3 numbers, got {}", nums.len()));
        };
        Ok(DatasetSpec::SyntheticBlobs {
            classes: *classes,
            dims: *dims,
            samples: *samples,
        })
    }
}

/// Samples as row-major features plus labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Features of the first `n` samples.
    pub fn head_inputs(&self, n: usize, features: usize) -> &[f64] {
        &self.inputs[..n.min(self.len()) * features]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n_features: usize,
    pub n_classes: usize,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    let (n_features, n_classes, all) = match spec {
        DatasetSpec::SyntheticBlobs { classes, dims, samples } => {
            (*dims, *classes, synthetic_blobs(*classes, *dims, *samples, seed)?)
        }
        DatasetSpec::File(path) => read_dataset_file(path)?,
    };
    split_dataset(all, n_features, n_classes, seed)
}

/// Gaussian clusters: one random center per class, unit-variance noise.
/// Labels cycle through the classes so every class is equally represented.
pub fn synthetic_blobs(classes: usize, dims: usize, samples: usize, seed: u64) -> Result<Split> {
    if classes < 2 || dims == 0 {
        return Err(Error::Validation(format!(
            "synthetic-blobs needs at least 2 classes and 1 feature, got {classes} and {dims}"
        )));
    }
    if samples == 0 {
        return Err(Error::Validation("dataset has no samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ BLOB_STREAM);
    let centers: Vec<f64> = (0..classes * dims)
        .map(|_| CENTER_SCALE * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut inputs = Vec::with_capacity(samples * dims);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        for d in 0..dims {
            inputs.push(centers[c * dims + d] + rng.sample::<f64, _>(StandardNormal));
        }
        labels.push(c);
    }
    Ok(Split { inputs, labels })
}

/// Parses the flat dataset format: a header `n_samples,n_features,n_classes`
/// followed by one row per sample of comma-separated features and a label.
/// Blank lines and `#` comments are ignored.
pub fn parse_dataset(text: &str) -> Result<(usize, usize, Split)> {
    let mut rows = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = rows.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header `n_samples,n_features,n_classes`".into(),
    })?;
    let head: Vec<usize> = header
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            line: hline,
            message: format!("bad header `{header}`: {e}"),
        })?;
    let [n, d, k] = head.as_slice() else {
        return Err(Error::Parse {
            line: hline,
            message: format!("header needs 3 fields, got {}", head.len()),
        });
    };
    let (n, d, k) = (*n, *d, *k);
    if n == 0 {
        return Err(Error::Validation("dataset has no samples".into()));
    }
    if d == 0 || k == 0 {
        return Err(Error::Validation("dataset needs at least one feature and one class".into()));
    }

    let mut split = Split {
        inputs: Vec::with_capacity(n * d),
        labels: Vec::with_capacity(n),
    };
    for (line, row) in rows {
        if split.len() == n {
            return Err(Error::Parse {
                line,
                message: format!("more rows than the {n} declared"),
            });
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, got {}", d + 1, fields.len()),
            });
        }
        for f in &fields[..d] {
            let v: f64 = f.parse().map_err(|e| Error::Parse {
                line,
                message: format!("feature `{f}`: {e}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("non-finite feature `{f}`"),
                });
            }
            split.inputs.push(v);
        }
        let label: usize = fields[d].parse().map_err(|e| Error::Parse {
            line,
            message: format!("label `{}`: {e}", fields[d]),
        })?;
        if label >= k {
            return Err(Error::Validation(format!(
                "line {line}: label {label} out of range for {k} classes"
            )));
        }
        split.labels.push(label);
    }
    if split.len() != n {
        return Err(Error::Parse {
            line: text.lines().count(),
            message: format!("header declares {n} samples, found {}", split.len()),
        });
    }
    Ok((d, k, split))
}

fn read_dataset_file(path: &Path) -> Result<(usize, usize, Split)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

/// Deterministic shuffle, then 80% train, 10% validation, rest test.
pub fn split_dataset(all: Split, n_features: usize, n_classes: usize, seed: u64) -> Result<Dataset> {
    let n = all.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    if n_train == 0 || n_val == 0 || n - n_train - n_val == 0 {
        return Err(Error::Validation(format!(
            "{n} samples are too few for a train/validation/test split"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_STREAM));
    let take = |idx: &[usize]| {
        let mut s = Split {
            inputs: Vec::with_capacity(idx.len() * n_features),
            labels: Vec::with_capacity(idx.len()),
        };
        for &i in idx {
            s.inputs.extend_from_slice(&all.inputs[i * n_features..(i + 1) * n_features]);
            s.labels.push(all.labels[i]);
        }
        s
    };
    Ok(Dataset {
        n_features,
        n_classes,
        train: take(&order[..n_train]),
        val: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
    })
}

//! Synthetic source/downstream classification data, lurking transforms,
//! seen/unseen class splits and the dataset text format.
//!
//! File format (UTF-8, `\n` line endings): a header line `d,C,n`, then `n`
//! rows `label,f1,...,fd`. Values are written with Rust's shortest
//! round-trip `f64` formatting, so reading back is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{Rng, Tensor};
use crate::trainer::{Targets, TrainData};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub role: Role,
    pub domain_tag: String,
    /// Seen classes, sorted. Together with `unseen` it partitions `0..classes`.
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

impl SplitDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, role: Role, domain_tag: impl Into<String>) -> Result<Self> {
        let ds = SplitDataset {
            features,
            labels,
            classes,
            role,
            domain_tag: domain_tag.into(),
            seen: (0..classes).collect(),
            unseen: Vec::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.features.rows() {
            return Err(Error::Dataset(format!(
                "{} labels for {} feature rows",
                self.labels.len(),
                self.features.rows()
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: self.classes,
            });
        }
        let mut all: Vec<usize> = self.seen.iter().chain(&self.unseen).copied().collect();
        all.sort_unstable();
        if all != (0..self.classes).collect::<Vec<_>>() {
            return Err(Error::Dataset("seen and unseen classes must partition the label set".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn train_data(&self) -> TrainData {
        TrainData {
            x: self.features.clone(),
            targets: Targets::Labels(self.labels.clone()),
        }
    }

    /// Keeps only samples whose label is in `keep`.
    pub fn filter_classes(&self, keep: &[usize]) -> Result<SplitDataset> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.labels[i])).collect();
        if idx.is_empty() {
            return Err(Error::Dataset("class filter removed every sample".into()));
        }
        Ok(SplitDataset {
            features: self.features.select_rows(&idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        })
    }
}

/// Gaussian-cluster source domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub n_per_class: usize,
    pub n_test_per_class: usize,
    pub d: usize,
    pub cluster_std: f64,
    /// Std of the per-class mean around the shared offset.
    pub mean_spread: f64,
    /// Scale of the shared cluster center: each of its coordinates is
    /// `offset * N(0, 1)`, so the center points in a seeded random direction.
    pub offset: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            n_per_class: 100,
            n_test_per_class: 100,
            d: 8,
            cluster_std: 0.4,
            mean_spread: 1.0,
            offset: 3.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.d < 2 || self.n_per_class < 2 || self.n_test_per_class < 1 {
            return Err(Error::Dataset(format!(
                "need classes >= 2, d >= 2, n_per_class >= 2 and n_test_per_class >= 1, got {self:?}"
            )));
        }
        if !(self.cluster_std >= 0.0 && self.mean_spread > 0.0 && self.offset.is_finite()) {
            return Err(Error::Dataset("cluster_std >= 0 and mean_spread > 0 required".into()));
        }
        Ok(())
    }
}

/// Class-balanced train and test sets sharing seeded class means.
pub fn generate_source(spec: &SyntheticSpec) -> Result<(SplitDataset, SplitDataset)> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let center: Vec<f64> = (0..spec.d).map(|_| spec.offset * rng.normal()).collect();
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| center.iter().map(|c| c + spec.mean_spread * rng.normal()).collect())
        .collect();
    let draw = |n: usize, role: Role, rng: &mut Rng| -> Result<SplitDataset> {
        let mut data = Vec::with_capacity(n * spec.classes * spec.d);
        let mut labels = Vec::with_capacity(n * spec.classes);
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..n {
                data.extend(mean.iter().map(|m| m + spec.cluster_std * rng.normal()));
                labels.push(c);
            }
        }
        let features = Tensor::new(labels.len(), spec.d, data)?;
        SplitDataset::new(features, labels, spec.classes, role, "source")
    };
    let train = draw(spec.n_per_class, Role::Train, &mut rng)?;
    let test = draw(spec.n_test_per_class, Role::Test, &mut rng)?;
    Ok((train, test))
}

/// Label-preserving feature transform standing in for an unobserved factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LurkingTransform {
    None,
    Scale { factor: f64 },
    Translate { shift: Vec<f64> },
    /// `x -> M x + shift`.
    Affine { matrix: Tensor, shift: Vec<f64> },
}

impl LurkingTransform {
    pub fn tag(&self) -> String {
        match self {
            LurkingTransform::None => "none".into(),
            LurkingTransform::Scale { factor } => format!("scale{factor}"),
            LurkingTransform::Translate { shift } => {
                format!("translate{}", shift.first().copied().unwrap_or(0.0))
            }
            LurkingTransform::Affine { .. } => "affine".into(),
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(m));
        match self {
            LurkingTransform::None => Ok(()),
            LurkingTransform::Scale { factor } => {
                if !factor.is_finite() || *factor == 0.0 {
                    return bad(format!("scale factor must be finite and nonzero, got {factor}"));
                }
                Ok(())
            }
            LurkingTransform::Translate { shift } => {
                if shift.len() != d || shift.iter().any(|v| !v.is_finite()) {
                    return bad(format!("translation needs {d} finite entries"));
                }
                Ok(())
            }
            LurkingTransform::Affine { matrix, shift } => {
                if matrix.shape() != (d, d) || shift.len() != d {
                    return bad(format!("affine transform needs a {d}x{d} matrix and {d}-vector"));
                }
                if linalg::svd(matrix)?.rank(linalg::SV_CUTOFF) < d {
                    return bad("affine matrix is singular".into());
                }
                Ok(())
            }
        }
    }

    /// Applies the transform to each row of `x`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.validate(x.cols())?;
        let add_rows = |t: Tensor, shift: &[f64]| -> Result<Tensor> {
            let (n, d) = t.shape();
            let mut data = t.data().to_vec();
            for r in 0..n {
                for c in 0..d {
                    data[r * d + c] += shift[c];
                }
            }
            Tensor::new(n, d, data)
        };
        match self {
            LurkingTransform::None => Ok(x.clone()),
            LurkingTransform::Scale { factor } => Ok(x.scale(*factor)),
            LurkingTransform::Translate { shift } => add_rows(x.clone(), shift),
            LurkingTransform::Affine { matrix, shift } => add_rows(x.matmul(&matrix.transpose())?, shift),
        }
    }
}

/// Transforms features sample-wise; labels and class partition untouched.
pub fn apply_lurking(ds: &SplitDataset, t: &LurkingTransform) -> Result<SplitDataset> {
    let features = t.apply(&ds.features)?;
    let domain_tag = match t {
        LurkingTransform::None => ds.domain_tag.clone(),
        t => format!("{}+{}", ds.domain_tag, t.tag()),
    };
    Ok(SplitDataset {
        features,
        domain_tag,
        ..ds.clone()
    })
}

/// Outcome of a seen/unseen class split.
#[derive(Clone, Debug, PartialEq)]
pub struct SeenUnseen {
    /// Training samples restricted to seen classes.
    pub train: SplitDataset,
    /// Full test set, with the partition recorded.
    pub test: SplitDataset,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

/// Draws `ceil(fraction * C)` seen classes uniformly without replacement;
/// training samples of the remaining classes are dropped.
pub fn split_seen_unseen(train: &SplitDataset, test: &SplitDataset, fraction: f64, rng: &mut Rng) -> Result<SeenUnseen> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Dataset(format!("seen fraction must be in (0, 1), got {fraction}")));
    }
    if train.classes != test.classes {
        return Err(Error::Dataset("train and test disagree on the class count".into()));
    }
    let c = train.classes;
    // Small slack so that e.g. 0.3 * 10 counts as 3, not 4.
    let k = ((fraction * c as f64) - 1e-9).ceil().max(0.0) as usize;
    if k == 0 || k >= c {
        return Err(Error::Dataset(format!(
            "fraction {fraction} with {c} classes leaves an empty seen or unseen set"
        )));
    }
    let mut seen = rng.sample_indices(c, k);
    seen.sort_unstable();
    let unseen: Vec<usize> = (0..c).filter(|i| !seen.contains(i)).collect();
    let mut ftrain = train.filter_classes(&seen)?;
    ftrain.seen = seen.clone();
    ftrain.unseen = unseen.clone();
    let mut ftest = test.clone();
    ftest.seen = seen.clone();
    ftest.unseen = unseen.clone();
    Ok(SeenUnseen {
        train: ftrain,
        test: ftest,
        seen,
        unseen,
    })
}

/// Dataset in the `d,C,n` text format.
pub fn to_text(ds: &SplitDataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{},{},{}", ds.dim(), ds.classes, ds.len());
    for (i, &l) in ds.labels.iter().enumerate() {
        let _ = write!(out, "{l}");
        for v in ds.features.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn from_text(text: &str, origin: &str) -> Result<SplitDataset> {
    let err = |line: usize, msg: String| Error::Format {
        path: origin.to_string(),
        msg: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let nums: Vec<usize> = header
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| err(1, format!("bad header '{header}': {e}")))?;
    let [d, classes, n] = nums[..] else {
        return Err(err(1, format!("header must be d,C,n, got '{header}'")));
    };
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let (label, feats) = parse_row(line).map_err(|m| err(i + 1, m))?;
        if feats.len() != d {
            return Err(err(i + 1, format!("expected {d} features, got {}", feats.len())));
        }
        labels.push(label);
        data.extend(feats);
    }
    if labels.len() != n {
        return Err(err(0, format!("header promises {n} rows, found {}", labels.len())));
    }
    let features = Tensor::new(n, d, data)?;
    SplitDataset::new(features, labels, classes, Role::Train, origin)
}

fn parse_row(line: &str) -> std::result::Result<(usize, Vec<f64>), String> {
    let mut parts = line.split(',');
    let label = parts
        .next()
        .ok_or("empty row")?
        .trim()
        .parse::<usize>()
        .map_err(|e| format!("bad label: {e}"))?;
    let feats = parts
        .map(|s| s.trim().parse::<f64>().map_err(|e| format!("bad value '{s}': {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((label, feats))
}

pub fn save(ds: &SplitDataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(ds)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SplitDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text, &path.display().to_string())
}

/// Headerless `label,f1,...,fd` rows, e.g. externally flattened images.
/// The class count is one past the largest label.
pub fn load_headerless_csv(path: &Path) -> Result<SplitDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut d = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (label, feats) = parse_row(line).map_err(|m| Error::Format {
            path: origin.clone(),
            msg: format!("line {}: {m}", i + 1),
        })?;
        if *d.get_or_insert(feats.len()) != feats.len() {
            return Err(Error::Format {
                path: origin,
                msg: format!("line {}: ragged row", i + 1),
            });
        }
        labels.push(label);
        data.extend(feats);
    }
    let d = d.ok_or_else(|| Error::Format {
        path: origin.clone(),
        msg: "no rows".into(),
    })?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let features = Tensor::new(labels.len(), d, data)?;
    SplitDataset::new(features, labels, classes, Role::Train, origin)
}

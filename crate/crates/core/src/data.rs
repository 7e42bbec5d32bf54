//! Datasets and the victim / homologous / attacker partition.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples in `[0,1]^M` with labels in `0..n_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDataset")]
pub struct LabeledDataset {
    pub name: String,
    pub n_classes: usize,
    pub xs: Vec<Tensor>,
    pub ys: Vec<usize>,
}

#[derive(Deserialize)]
struct RawDataset {
    name: String,
    n_classes: usize,
    xs: Vec<Tensor>,
    ys: Vec<usize>,
}

impl TryFrom<RawDataset> for LabeledDataset {
    type Error = Error;

    fn try_from(raw: RawDataset) -> Result<Self> {
        LabeledDataset::new(raw.name, raw.n_classes, raw.xs, raw.ys)
    }
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, n_classes: usize, xs: Vec<Tensor>, ys: Vec<usize>) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::DimensionMismatch {
                expected: xs.len(),
                actual: ys.len(),
            });
        }
        if let Some(y) = ys.iter().find(|&&y| y >= n_classes) {
            return Err(Error::InvalidConfig(format!(
                "label {y} out of range for {n_classes} classes"
            )));
        }
        if let Some(first) = xs.first() {
            let dim = first.len();
            for x in &xs {
                if x.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: x.len(),
                    });
                }
                if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::InvalidConfig("sample outside [0,1]^M".into()));
                }
            }
        }
        Ok(Self {
            name: name.into(),
            n_classes,
            xs,
            ys,
        })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Input dimension `M` (0 for an empty set).
    pub fn dim(&self) -> usize {
        self.xs.first().map_or(0, |x| x.len())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.ys {
            counts[y] += 1;
        }
        counts
    }

    /// Sample indices grouped by label.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_classes];
        for (i, &y) in self.ys.iter().enumerate() {
            groups[y].push(i);
        }
        groups
    }

    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Self {
        Self {
            name: name.into(),
            n_classes: self.n_classes,
            xs: indices.iter().map(|&i| self.xs[i].clone()).collect(),
            ys: indices.iter().map(|&i| self.ys[i]).collect(),
        }
    }

    pub fn inputs(&self) -> impl Iterator<Item = &[f64]> {
        self.xs.iter().map(|x| x.as_slice())
    }
}

/// Class-balanced mixture of isotropic Gaussians clipped to `[0,1]^dim`.
///
/// Class means are drawn uniformly from the inner part of the cube and
/// rejected until every pair is at least `4 * spread` apart.
pub fn make_synthetic(
    n_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_classes < 2 || dim < 2 || n_per_class == 0 {
        return Err(Error::InvalidConfig(format!(
            "synthetic data needs >= 2 classes, >= 2 dims and samples per class \
             (got {n_classes}, {dim}, {n_per_class})"
        )));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::InvalidConfig(format!("spread must be positive, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = (2.0 * spread).min(0.25);
    let min_sep = 4.0 * spread;

    let mut means: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    let mut attempts = 0usize;
    while means.len() < n_classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::InvalidConfig(format!(
                "cannot place {n_classes} means {min_sep} apart in {dim} dims"
            )));
        }
        let candidate: Vec<f64> = (0..dim).map(|_| rng.gen_range(margin..=1.0 - margin)).collect();
        let far_enough = means.iter().all(|m| {
            m.iter()
                .zip(&candidate)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                >= min_sep
        });
        if far_enough {
            means.push(candidate);
        }
    }

    let noise = Normal::new(0.0, spread).expect("spread validated");
    let mut xs = Vec::with_capacity(n_classes * n_per_class);
    let mut ys = Vec::with_capacity(n_classes * n_per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            let x: Vec<f64> = mean
                .iter()
                .map(|m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            xs.push(Tensor::vector(x)?);
            ys.push(label);
        }
    }
    LabeledDataset::new(format!("synthetic-{n_classes}x{dim}-s{seed}"), n_classes, xs, ys)
}

/// Victim / homologous / attacker partition of one source dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub victim: LabeledDataset,
    pub homologous: LabeledDataset,
    pub attacker: LabeledDataset,
    /// Requested overlap ratio `|X_h ∩ X_v| / |X_v|`.
    pub overlap: f64,
    pub seed: u64,
    /// Indices into the source dataset for each partition.
    pub victim_idx: Vec<usize>,
    pub homologous_idx: Vec<usize>,
    pub attacker_idx: Vec<usize>,
}

impl SplitPlan {
    /// Measured `|X_h ∩ X_v| / |X_v|` by sample identity.
    pub fn measured_overlap(&self) -> f64 {
        let victim: std::collections::BTreeSet<_> = self.victim_idx.iter().collect();
        let shared = self.homologous_idx.iter().filter(|i| victim.contains(i)).count();
        shared as f64 / self.victim_idx.len().max(1) as f64
    }
}

/// Splits `data` 2:2:1 (per class) into victim, homologous and attacker parts.
///
/// The homologous set keeps its size but replaces `floor(overlap * |X_v|)`
/// of its samples with victim samples, spread across classes
/// proportionally (largest remainder, lowest class first).
pub fn split_225(data: &LabeledDataset, overlap: f64, seed: u64) -> Result<SplitPlan> {
    if !(0.0..=1.0).contains(&overlap) {
        return Err(Error::InvalidConfig(format!("overlap {overlap} not in [0,1]")));
    }
    if data.len() < 5 * data.n_classes {
        return Err(Error::InsufficientData(format!(
            "{} samples cannot be split 2:2:1 over {} classes",
            data.len(),
            data.n_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = data.indices_by_class();
    for g in &mut groups {
        g.shuffle(&mut rng);
    }
    if let Some((c, _)) = groups.iter().enumerate().find(|(_, g)| g.len() < 5) {
        return Err(Error::InsufficientData(format!("class {c} has fewer than 5 samples")));
    }

    let parts: Vec<(usize, usize)> = groups
        .iter()
        .map(|g| {
            let v = 2 * g.len() / 5;
            (v, v)
        })
        .collect();
    let victim_total: usize = parts.iter().map(|p| p.0).sum();
    let shared_total = (overlap * victim_total as f64 + 1e-9).floor() as usize;

    // Largest-remainder apportionment of the shared count across classes.
    let mut shared: Vec<usize> = parts
        .iter()
        .map(|(v, _)| (overlap * *v as f64 + 1e-9).floor() as usize)
        .collect();
    let mut remaining = shared_total.saturating_sub(shared.iter().sum());
    let mut by_remainder: Vec<usize> = (0..parts.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let fa = overlap * parts[a].0 as f64 - shared[a] as f64;
        let fb = overlap * parts[b].0 as f64 - shared[b] as f64;
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &c in by_remainder.iter().cycle().take(parts.len() * 2) {
        if remaining == 0 {
            break;
        }
        if shared[c] < parts[c].0 {
            shared[c] += 1;
            remaining -= 1;
        }
    }

    let mut victim_idx = Vec::new();
    let mut homologous_idx = Vec::new();
    let mut attacker_idx = Vec::new();
    for (c, g) in groups.iter().enumerate() {
        let (v, h) = parts[c];
        let victim_part = &g[..v];
        let pool = &g[v..v + h];
        victim_idx.extend_from_slice(victim_part);
        homologous_idx.extend_from_slice(&victim_part[..shared[c]]);
        homologous_idx.extend_from_slice(&pool[..h - shared[c]]);
        attacker_idx.extend_from_slice(&g[v + h..]);
    }

    Ok(SplitPlan {
        victim: data.subset(format!("{}-victim", data.name), &victim_idx),
        homologous: data.subset(format!("{}-homologous", data.name), &homologous_idx),
        attacker: data.subset(format!("{}-attacker", data.name), &attacker_idx),
        overlap,
        seed,
        victim_idx,
        homologous_idx,
        attacker_idx,
    })
}

pub const CIFAR_RECORD_LEN: usize = 3073;
pub const CIFAR_SIDE: usize = 32;

/// Parses the CIFAR-10 binary layout: per record one label byte (0-9) then
/// 3072 pixel bytes (R, G, B planes of 32x32, row-major), scaled by 1/255.
pub fn parse_cifar10(bytes: &[u8], name: &str) -> Result<LabeledDataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        return Err(Error::Parse {
            offset: bytes.len() - bytes.len() % CIFAR_RECORD_LEN,
            message: format!(
                "truncated record: {} trailing bytes, expected {CIFAR_RECORD_LEN} per record",
                bytes.len() % CIFAR_RECORD_LEN
            ),
        });
    }
    let mut xs = Vec::with_capacity(bytes.len() / CIFAR_RECORD_LEN);
    let mut ys = Vec::with_capacity(xs.capacity());
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let label = record[0];
        if label > 9 {
            return Err(Error::Parse {
                offset: r * CIFAR_RECORD_LEN,
                message: format!("label byte {label} > 9"),
            });
        }
        ys.push(label as usize);
        xs.push(Tensor::vector(record[1..].iter().map(|&p| p as f64 / 255.0).collect())?);
    }
    LabeledDataset::new(name, 10, xs, ys)
}

pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cifar10".into());
    parse_cifar10(&bytes, &name)
}

/// Average-pools each 32x32 channel plane by `factor` (which must divide 32).
pub fn downsample_cifar(data: &LabeledDataset, factor: usize) -> Result<LabeledDataset> {
    if factor == 0 || !CIFAR_SIDE.is_multiple_of(factor) {
        return Err(Error::InvalidConfig(format!(
            "downsample factor {factor} must divide {CIFAR_SIDE}"
        )));
    }
    if data.dim() != 3 * CIFAR_SIDE * CIFAR_SIDE {
        return Err(Error::DimensionMismatch {
            expected: 3 * CIFAR_SIDE * CIFAR_SIDE,
            actual: data.dim(),
        });
    }
    let side = CIFAR_SIDE / factor;
    let norm = (factor * factor) as f64;
    let xs = data
        .xs
        .iter()
        .map(|x| {
            let mut out = vec![0.0; 3 * side * side];
            for ch in 0..3 {
                let plane = &x[ch * CIFAR_SIDE * CIFAR_SIDE..(ch + 1) * CIFAR_SIDE * CIFAR_SIDE];
                for (p, v) in plane.iter().enumerate() {
                    let (row, col) = (p / CIFAR_SIDE, p % CIFAR_SIDE);
                    out[ch * side * side + (row / factor) * side + col / factor] += v / norm;
                }
            }
            Tensor::vector(out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(format!("{}-ds{factor}", data.name), data.n_classes, xs, data.ys.clone())
}

//! Piracy decisions from suspect outputs on the fingerprint.
//!
//! A defender only sees a suspect's logits on the core points (a
//! [`SuspectTranscript`]). Three decision routes are provided: target-logit
//! L1 distance, distance between cosine-similarity matrices, and nearest
//! cluster center over a known model population.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::nn::Network;

/// Black-box view of a model: logits in, logits out, nothing else.
pub trait LogitOracle {
    fn logits(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl LogitOracle for Network {
    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x)
    }
}

/// Row `i` holds the suspect's logits on the `i`-th core point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspectTranscript {
    pub model_id: String,
    /// Fingerprint labels, one per row.
    pub labels: Vec<usize>,
    pub outputs: Vec<Vec<f64>>,
}

impl SuspectTranscript {
    pub fn new(model_id: impl Into<String>, labels: Vec<usize>, outputs: Vec<Vec<f64>>) -> Result<Self> {
        if labels.len() != outputs.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                actual: outputs.len(),
            });
        }
        let width = outputs.first().map_or(0, Vec::len);
        for row in &outputs {
            if row.len() != width {
                return Err(Error::DimensionMismatch {
                    expected: width,
                    actual: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::DegenerateTranscript("non-finite output".into()));
            }
        }
        if let Some(l) = labels.iter().find(|&&l| l >= width) {
            return Err(Error::DegenerateTranscript(format!(
                "label {l} outside {width}-wide output rows"
            )));
        }
        Ok(Self {
            model_id: model_id.into(),
            labels,
            outputs,
        })
    }

    /// `(|F|, N)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.outputs.len(), self.outputs.first().map_or(0, Vec::len))
    }

    /// Row-major concatenation, the clustering feature vector.
    pub fn flatten(&self) -> Vec<f64> {
        self.outputs.iter().flatten().copied().collect()
    }

    /// Logit of each row's own label.
    pub fn target_scores(&self) -> Vec<f64> {
        self.outputs.iter().zip(&self.labels).map(|(row, &l)| row[l]).collect()
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                expected: self.shape().0 * self.shape().1,
                actual: other.shape().0 * other.shape().1,
            });
        }
        if self.labels != other.labels {
            return Err(Error::InvalidConfig("transcripts use different fingerprints".into()));
        }
        Ok(())
    }
}

/// Queries `model` on every core point of `fingerprint`, in label order.
pub fn query_suspect(model_id: &str, model: &dyn LogitOracle, fingerprint: &Fingerprint) -> Result<SuspectTranscript> {
    let outputs = fingerprint
        .core_points
        .iter()
        .map(|c| model.logits(&c.point))
        .collect::<Result<Vec<_>>>()?;
    SuspectTranscript::new(model_id, fingerprint.labels(), outputs)
}

/// `sum_i |f_v(phi_i)_i - f_s(phi_i)_i|`.
pub fn l1_dist(victim: &SuspectTranscript, suspect: &SuspectTranscript) -> Result<f64> {
    victim.check_same_shape(suspect)?;
    Ok(victim
        .target_scores()
        .iter()
        .zip(suspect.target_scores())
        .map(|(a, b)| (a - b).abs())
        .sum())
}

/// Pairwise cosine similarity of transcript rows.
pub fn cos_matrix(t: &SuspectTranscript) -> Result<Vec<Vec<f64>>> {
    let norms: Vec<f64> = t
        .outputs
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|n| *n == 0.0) {
        return Err(Error::DegenerateTranscript(format!(
            "row {i} of {} has zero norm",
            t.model_id
        )));
    }
    let n = t.outputs.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        m[i][i] = 1.0;
        for j in i + 1..n {
            let dot: f64 = t.outputs[i].iter().zip(&t.outputs[j]).map(|(a, b)| a * b).sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

/// Entrywise L1 distance between two similarity matrices over `n^2`.
pub fn matrix_l1_mean(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let total: f64 = a
        .iter()
        .zip(b)
        .flat_map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| (x - y).abs()))
        .sum();
    total / (n * n) as f64
}

/// `||Cos(f_v,F) - Cos(f_s,F)||_1 / |F|^2`.
pub fn cos_dist(victim: &SuspectTranscript, suspect: &SuspectTranscript) -> Result<f64> {
    victim.check_same_shape(suspect)?;
    Ok(matrix_l1_mean(&cos_matrix(victim)?, &cos_matrix(suspect)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    L1,
    Cos,
    Cluster,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::L1 => "l1",
            Method::Cos => "cos",
            Method::Cluster => "cluster",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Method::L1),
            "cos" => Ok(Method::Cos),
            "cluster" => Ok(Method::Cluster),
            other => Err(Error::InvalidConfig(format!("unknown method {other:?}"))),
        }
    }
}

/// Coarse population a model belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelGroup {
    /// Independently trained.
    HM,
    /// Post-processed copy of the victim.
    PM,
    /// Surrogate from an extraction attack.
    EM,
}

impl ModelGroup {
    pub fn is_piracy(self) -> bool {
        !matches!(self, ModelGroup::HM)
    }
}

/// Result of calibrating one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCalibration {
    pub threshold: f64,
    /// `min(homologous) - max(piracy)`; negative when the populations overlap.
    pub margin: f64,
    pub overlapping: bool,
}

/// Threshold from distance samples of known piracy and homologous models.
///
/// Separable populations get the midpoint of the gap. Otherwise the
/// threshold minimizing misclassifications under the strict `<` rule is
/// chosen (first such candidate in ascending order).
pub fn calibrate_metric(piracy: &[f64], homologous: &[f64]) -> Result<MetricCalibration> {
    if piracy.is_empty() || homologous.is_empty() {
        return Err(Error::InsufficientData(
            "calibration needs at least one piracy and one homologous distance".into(),
        ));
    }
    let max_p = piracy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_h = homologous.iter().copied().fold(f64::INFINITY, f64::min);
    let margin = min_h - max_p;
    if margin > 0.0 {
        return Ok(MetricCalibration {
            threshold: 0.5 * (max_p + min_h),
            margin,
            overlapping: false,
        });
    }
    let mut values: Vec<f64> = piracy.iter().chain(homologous).copied().collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    values.dedup();
    let mut candidates: Vec<f64> = values.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    candidates.push(values[values.len() - 1] + 1.0);
    let errors = |d: f64| piracy.iter().filter(|&&p| p >= d).count() + homologous.iter().filter(|&&h| h < d).count();
    let mut best = candidates[0];
    let mut best_err = errors(best);
    for &c in &candidates[1..] {
        let e = errors(c);
        if e < best_err {
            best = c;
            best_err = e;
        }
    }
    Ok(MetricCalibration {
        threshold: best,
        margin,
        overlapping: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// L1 cutoff.
    pub d1: f64,
    /// Cosine-distance cutoff.
    pub d2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub thresholds: Thresholds,
    pub l1: MetricCalibration,
    pub cos: MetricCalibration,
}

/// Calibrates both thresholds against a labelled population of transcripts.
pub fn calibrate_thresholds(
    victim: &SuspectTranscript,
    population: &[(SuspectTranscript, ModelGroup)],
) -> Result<Calibration> {
    let mut l1 = (Vec::new(), Vec::new());
    let mut cos = (Vec::new(), Vec::new());
    for (t, group) in population {
        let (dl, dc) = (l1_dist(victim, t)?, cos_dist(victim, t)?);
        if group.is_piracy() {
            l1.0.push(dl);
            cos.0.push(dc);
        } else {
            l1.1.push(dl);
            cos.1.push(dc);
        }
    }
    let l1 = calibrate_metric(&l1.0, &l1.1)?;
    let cos = calibrate_metric(&cos.0, &cos.1)?;
    Ok(Calibration {
        thresholds: Thresholds {
            d1: l1.threshold,
            d2: cos.threshold,
        },
        l1,
        cos,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub model_id: String,
    pub method: Method,
    /// Distance for threshold methods, cluster index for clustering.
    pub score: f64,
    pub is_piracy: bool,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} method={} score={} verdict={}",
            self.model_id,
            self.method,
            self.score,
            if self.is_piracy { "piracy" } else { "homologous" }
        )
    }
}

/// Threshold decision: piracy iff distance is strictly below the cutoff.
pub fn decide(
    victim: &SuspectTranscript,
    suspect: &SuspectTranscript,
    th: &Thresholds,
    method: Method,
) -> Result<Verdict> {
    let (score, cutoff) = match method {
        Method::L1 => (l1_dist(victim, suspect)?, th.d1),
        Method::Cos => (cos_dist(victim, suspect)?, th.d2),
        Method::Cluster => {
            return Err(Error::InvalidConfig(
                "cluster decisions go through ClusterModel::classify".into(),
            ))
        }
    };
    Ok(Verdict {
        model_id: suspect.model_id.clone(),
        method,
        score,
        is_piracy: score < cutoff,
    })
}

/// Cluster centers over flattened transcripts, each tagged with the
/// majority group of its members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centers: Vec<Vec<f64>>,
    pub tags: Vec<ModelGroup>,
    /// Training assignment of each population member.
    pub assignment: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center, lowest index on ties.
fn nearest(centers: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, sq_dist(&centers[0], x));
    for (i, c) in centers.iter().enumerate().skip(1) {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn check_population(points: &[Vec<f64>], groups: &[ModelGroup], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(Error::InsufficientData(format!(
            "population of {} cannot form {k} clusters",
            points.len()
        )));
    }
    if points.len() != groups.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            actual: groups.len(),
        });
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: p.len(),
        });
    }
    Ok(())
}

/// Majority group per cluster; ties go to the earlier group (HM, PM, EM).
fn majority_tags(k: usize, assignment: &[usize], groups: &[ModelGroup]) -> Vec<ModelGroup> {
    let all = [ModelGroup::HM, ModelGroup::PM, ModelGroup::EM];
    (0..k)
        .map(|c| {
            let mut counts = [0usize; 3];
            for (a, g) in assignment.iter().zip(groups) {
                if *a == c {
                    counts[all.iter().position(|x| x == g).expect("known group")] += 1;
                }
            }
            let mut best = 0;
            for i in 1..3 {
                if counts[i] > counts[best] {
                    best = i;
                }
            }
            all[best]
        })
        .collect()
}

fn means(points: &[Vec<f64>], assignment: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    (sums, counts)
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Empty clusters are re-seeded at the point farthest from its current
/// center. Stops when assignments stop changing or after `max_iters`.
pub fn kmeans(
    points: &[Vec<f64>],
    groups: &[ModelGroup],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<ClusterModel> {
    check_population(points, groups, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    while centers.len() < k {
        let weights: Vec<f64> = points.iter().map(|p| nearest(&centers, p).1).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            // All remaining points coincide with a center.
            (0..points.len())
                .find(|i| !centers.contains(&points[*i]))
                .unwrap_or(centers.len())
        };
        centers.push(points[pick].clone());
    }

    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(&centers, p).0).collect();
    for _ in 0..max_iters {
        let (new_centers, counts) = means(points, &assignment, k);
        centers = new_centers;
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centers[assignment[a]]);
                        let db = sq_dist(&points[b], &centers[assignment[b]]);
                        da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a))
                    })
                    .expect("non-empty population");
                centers[c] = points[far].clone();
                assignment[far] = c;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(&centers, p).0).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    let (final_centers, counts) = means(points, &assignment, k);
    for (c, count) in counts.iter().enumerate() {
        if *count > 0 {
            centers[c] = final_centers[c].clone();
        }
    }
    let tags = majority_tags(k, &assignment, groups);
    Ok(ClusterModel {
        k,
        centers,
        tags,
        assignment,
    })
}

/// Bottom-up average-linkage clustering (Euclidean), merging the closest
/// pair until `k` clusters remain; ties merge the lowest-index pair first.
#[allow(clippy::needless_range_loop)]
pub fn agglomerative(points: &[Vec<f64>], groups: &[ModelGroup], k: usize) -> Result<ClusterModel> {
    check_population(points, groups, k)?;
    let n = points.len();
    let dist: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| sq_dist(&points[i], &points[j]).sqrt()).collect())
        .collect();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    // Pairwise linkage between current clusters, kept in sync with `clusters`.
    let mut link = dist.clone();

    while clusters.len() > k {
        let mut best = (0, 1, f64::INFINITY);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                if link[a][b] < best.2 {
                    best = (a, b, link[a][b]);
                }
            }
        }
        let (a, b, _) = best;
        let (na, nb) = (clusters[a].len() as f64, clusters[b].len() as f64);
        for c in 0..clusters.len() {
            if c != a && c != b {
                let merged = (na * link[a][c] + nb * link[b][c]) / (na + nb);
                link[a][c] = merged;
                link[c][a] = merged;
            }
        }
        let moved = clusters.remove(b);
        clusters[a].extend(moved);
        link.remove(b);
        for row in &mut link {
            row.remove(b);
        }
    }

    let mut assignment = vec![0; n];
    for (c, members) in clusters.iter().enumerate() {
        for &m in members {
            assignment[m] = c;
        }
    }
    let (centers, _) = means(points, &assignment, k);
    let tags = majority_tags(k, &assignment, groups);
    Ok(ClusterModel {
        k,
        centers,
        tags,
        assignment,
    })
}

impl ClusterModel {
    /// Nearest-center decision; piracy iff the center is tagged PM or EM.
    pub fn classify(&self, suspect: &SuspectTranscript) -> Result<Verdict> {
        let x = suspect.flatten();
        if self.centers.is_empty() || x.len() != self.centers[0].len() {
            return Err(Error::DimensionMismatch {
                expected: self.centers.first().map_or(0, Vec::len),
                actual: x.len(),
            });
        }
        let (c, _) = nearest(&self.centers, &x);
        Ok(Verdict {
            model_id: suspect.model_id.clone(),
            method: Method::Cluster,
            score: c as f64,
            is_piracy: self.tags[c].is_piracy(),
        })
    }
}

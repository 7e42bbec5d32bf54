//! Core points: inputs driven deep into one class region of the victim, and
//! their distance to the decision boundary.
//!
//! For every label the generator starts from a seed point, repeatedly
//! descends `-log softmax(f(x))[label]` in input space, and after every burst
//! of steps measures the boundary distance with DeepFool. Generation stops
//! once that radius changes by less than `gamma` between evaluations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{argmax, cross_entropy, softmax, Network};
use crate::tensor::Tensor;

/// Where a core point starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitStrategy {
    /// A random sample of the target label from a data pool.
    FromData { seed: u64 },
    /// Uniform noise inside the clip box (or `[0,1]^M`).
    UniformNoise { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreGenConfig {
    /// Input-space learning rate.
    pub theta: f64,
    /// Radius convergence tolerance.
    pub gamma: f64,
    /// Gradient steps between radius evaluations.
    pub burst: usize,
    /// Cap on total gradient steps.
    pub outer_max_epochs: usize,
    pub deepfool_max_iters: usize,
    pub overshoot: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_box: Option<(f64, f64)>,
    pub init: InitStrategy,
}

impl Default for CoreGenConfig {
    fn default() -> Self {
        Self {
            theta: 0.01,
            gamma: 1e-3,
            burst: 100,
            outer_max_epochs: 3000,
            deepfool_max_iters: 50,
            overshoot: 0.02,
            clip_box: None,
            init: InitStrategy::FromData { seed: 0 },
        }
    }
}

impl CoreGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("core generation: {m}")));
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return bad("theta must be positive");
        }
        if !(self.gamma > 0.0) {
            return bad("gamma must be positive");
        }
        if self.burst == 0 || self.outer_max_epochs == 0 || self.deepfool_max_iters == 0 {
            return bad("burst and iteration caps must be at least 1");
        }
        if !(self.overshoot >= 0.0 && self.overshoot.is_finite()) {
            return bad("overshoot must be non-negative");
        }
        if let Some((lo, hi)) = self.clip_box {
            if !(lo < hi) {
                return bad("clip box must satisfy lo < hi");
            }
        }
        Ok(())
    }
}

/// `-log softmax(f(phi))[label]`.
pub fn core_loss(net: &Network, phi: &[f64], label: usize) -> Result<f64> {
    let z = net.forward(phi)?;
    if label >= z.len() {
        return Err(Error::InvalidConfig(format!("label {label} out of range")));
    }
    Ok(cross_entropy(&z, label))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepFoolOutcome {
    /// L2 norm of the accumulated perturbation.
    pub radius: f64,
    pub iters: usize,
    /// Label at the last iterate.
    pub final_label: usize,
    /// False if the iteration cap was hit before crossing the boundary.
    pub converged: bool,
    pub perturbation: Vec<f64>,
}

/// Top-margin below which a point counts as sitting on the boundary.
const BOUNDARY_TOL: f64 = 1e-10;

/// Minimal boundary-crossing perturbation by iterated linearization.
///
/// With `b` the original prediction, each step moves along
/// `w = grad f_l - grad f_b` of the nearest linearized boundary `l` by
/// `(1 + overshoot) * |f_l - f_b| / ||w||^2 * w` until the prediction leaves
/// `b`, or the margin is numerically zero, or `max_iters` is reached.
pub fn deepfool_radius(net: &Network, x: &[f64], max_iters: usize, overshoot: f64) -> Result<DeepFoolOutcome> {
    let n = net.output_dim();
    if n < 2 {
        return Err(Error::DegenerateGeometry("single-class network has no boundary".into()));
    }
    let z0 = net.forward(x)?;
    let original = argmax(&z0);
    let mut point = x.to_vec();
    let mut total = vec![0.0; x.len()];
    let mut iters = 0;

    loop {
        let (z, jac) = net.jacobian(&point)?;
        let current = argmax(&z);
        let runner_up = z
            .iter()
            .enumerate()
            .filter(|(l, _)| *l != original)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let margin = z[original] - runner_up;
        if current != original || margin <= BOUNDARY_TOL * z[original].abs().max(1.0) {
            return Ok(DeepFoolOutcome {
                radius: norm(&total),
                iters,
                final_label: current,
                converged: true,
                perturbation: total,
            });
        }
        if iters >= max_iters {
            return Ok(DeepFoolOutcome {
                radius: norm(&total),
                iters,
                final_label: current,
                converged: false,
                perturbation: total,
            });
        }

        let mut best: Option<(f64, f64, Vec<f64>)> = None;
        for l in (0..n).filter(|&l| l != original) {
            let w: Vec<f64> = jac[l].iter().zip(&jac[original]).map(|(a, b)| a - b).collect();
            let w_norm = norm(&w);
            if w_norm == 0.0 {
                continue;
            }
            let gap = (z[l] - z[original]).abs();
            let ratio = gap / w_norm;
            if best.as_ref().is_none_or(|(r, _, _)| ratio < *r) {
                best = Some((ratio, gap, w));
            }
        }
        let Some((_, gap, w)) = best else {
            return Err(Error::DegenerateGeometry(
                "all boundary normals vanish at the current point".into(),
            ));
        };
        let w_sq: f64 = w.iter().map(|v| v * v).sum();
        let scale = (1.0 + overshoot) * gap / w_sq;
        for ((p, t), wi) in point.iter_mut().zip(total.iter_mut()).zip(&w) {
            *p += scale * wi;
            *t += scale * wi;
        }
        iters += 1;
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// An optimized input `phi` for one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorePoint {
    pub label: usize,
    pub point: Tensor,
    pub radius: f64,
    /// Victim logit of `label` at `point`.
    pub score: f64,
    pub epochs_used: usize,
}

/// Snapshot taken after each burst (and at the starting point, epoch 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub score: f64,
    pub confidence: f64,
    pub radius: f64,
    pub point: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreTrace {
    pub label: usize,
    pub checkpoints: Vec<Checkpoint>,
    /// Whether the radius settled within `gamma` before the step cap.
    pub converged: bool,
}

fn checkpoint(net: &Network, point: &[f64], label: usize, epoch: usize, cfg: &CoreGenConfig) -> Result<Checkpoint> {
    let z = net.forward(point)?;
    let radius = deepfool_radius(net, point, cfg.deepfool_max_iters, cfg.overshoot)?.radius;
    Ok(Checkpoint {
        epoch,
        score: z[label],
        confidence: softmax(&z)[label],
        radius,
        point: point.to_vec(),
    })
}

/// Runs the burst / radius loop for one label from `start`.
pub fn generate_core_point(
    net: &Network,
    label: usize,
    start: &[f64],
    cfg: &CoreGenConfig,
) -> Result<(CorePoint, CoreTrace)> {
    cfg.validate()?;
    if label >= net.output_dim() {
        return Err(Error::InvalidConfig(format!("label {label} out of range")));
    }
    let mut phi = start.to_vec();
    let mut checkpoints = vec![checkpoint(net, &phi, label, 0, cfg)?];
    let mut prev_radius = checkpoints[0].radius;
    let mut epochs = 0;
    let mut converged = false;

    while epochs < cfg.outer_max_epochs {
        let steps = cfg.burst.min(cfg.outer_max_epochs - epochs);
        for _ in 0..steps {
            let (_, grad) = net.loss_and_grad_input(&phi, label)?;
            for (p, g) in phi.iter_mut().zip(&grad) {
                *p -= cfg.theta * g;
                if let Some((lo, hi)) = cfg.clip_box {
                    *p = p.clamp(lo, hi);
                }
            }
        }
        epochs += steps;
        let ck = checkpoint(net, &phi, label, epochs, cfg)?;
        let delta = (ck.radius - prev_radius).abs();
        prev_radius = ck.radius;
        checkpoints.push(ck);
        if delta < cfg.gamma {
            converged = true;
            break;
        }
    }

    let last = checkpoints.last().expect("at least one checkpoint");
    let predicted = net.predict(&phi)?;
    if predicted != label {
        return Err(Error::CoreGeneration {
            label,
            message: format!(
                "point still classified as {predicted} after {epochs} steps (confidence {:.4})",
                last.confidence
            ),
        });
    }
    let core = CorePoint {
        label,
        point: Tensor::vector(phi)?,
        radius: last.radius,
        score: last.score,
        epochs_used: epochs,
    };
    Ok((
        core,
        CoreTrace {
            label,
            checkpoints,
            converged,
        },
    ))
}

/// Query set `F`: at most one core point per label, ordered by label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFingerprint")]
pub struct Fingerprint {
    pub victim_id: String,
    pub core_points: Vec<CorePoint>,
}

#[derive(Deserialize)]
struct RawFingerprint {
    victim_id: String,
    core_points: Vec<CorePoint>,
}

impl TryFrom<RawFingerprint> for Fingerprint {
    type Error = Error;

    fn try_from(raw: RawFingerprint) -> Result<Self> {
        Fingerprint::new(raw.victim_id, raw.core_points)
    }
}

impl Fingerprint {
    pub fn new(victim_id: impl Into<String>, mut core_points: Vec<CorePoint>) -> Result<Self> {
        if core_points.is_empty() {
            return Err(Error::InvalidConfig("fingerprint has no core points".into()));
        }
        core_points.sort_by_key(|c| c.label);
        if core_points.windows(2).any(|w| w[0].label == w[1].label) {
            return Err(Error::InvalidConfig("duplicate label in fingerprint".into()));
        }
        let dim = core_points[0].point.len();
        if core_points.iter().any(|c| c.point.len() != dim) {
            return Err(Error::InvalidConfig("core points differ in dimension".into()));
        }
        Ok(Self {
            victim_id: victim_id.into(),
            core_points,
        })
    }

    pub fn len(&self) -> usize {
        self.core_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.core_points.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.core_points.iter().map(|c| c.label).collect()
    }

    /// Keeps the `k` points with the largest radius.
    pub fn top_k(mut self, k: usize) -> Result<Self> {
        if k == 0 || k > self.core_points.len() {
            return Err(Error::InvalidConfig(format!(
                "top_k {k} must be in 1..={}",
                self.core_points.len()
            )));
        }
        // Stable sort: equal radii keep label order.
        self.core_points
            .sort_by(|a, b| b.radius.partial_cmp(&a.radius).unwrap_or(std::cmp::Ordering::Equal));
        self.core_points.truncate(k);
        self.core_points.sort_by_key(|c| c.label);
        Ok(self)
    }
}

/// Output of [`generate_fingerprint`].
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintRun {
    pub fingerprint: Fingerprint,
    /// Full checkpoint log for every label, including dropped ones.
    pub traces: Vec<CoreTrace>,
}

impl FingerprintRun {
    /// Fingerprint built from the `index`-th checkpoint of every trace
    /// (clamped to the last one). Index 0 is the unoptimized starting point.
    pub fn at_checkpoint(&self, net: &Network, index: usize) -> Result<Fingerprint> {
        let labels = self.fingerprint.labels();
        let points = self
            .traces
            .iter()
            .filter(|t| labels.contains(&t.label))
            .map(|t| {
                let ck = &t.checkpoints[index.min(t.checkpoints.len() - 1)];
                let z = net.forward(&ck.point)?;
                Ok(CorePoint {
                    label: t.label,
                    point: Tensor::vector(ck.point.clone())?,
                    radius: ck.radius,
                    score: z[t.label],
                    epochs_used: ck.epoch,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Fingerprint::new(self.fingerprint.victim_id.clone(), points)
    }
}

/// Starting point for `label` under `cfg.init`.
pub fn initial_point(label: usize, dim: usize, cfg: &CoreGenConfig, pool: Option<&LabeledDataset>) -> Result<Vec<f64>> {
    match cfg.init {
        InitStrategy::FromData { seed } => {
            let pool =
                pool.ok_or_else(|| Error::InvalidConfig("from-data initialization needs a sample pool".into()))?;
            let candidates: Vec<usize> = (0..pool.len()).filter(|&i| pool.ys[i] == label).collect();
            if candidates.is_empty() {
                return Err(Error::InsufficientData(format!("no pool sample with label {label}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(label as u64);
            let pick = candidates[rng.gen_range(0..candidates.len())];
            if pool.xs[pick].len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: pool.xs[pick].len(),
                });
            }
            Ok(pool.xs[pick].to_vec())
        }
        InitStrategy::UniformNoise { seed } => {
            let (lo, hi) = cfg.clip_box.unwrap_or((0.0, 1.0));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(label as u64);
            Ok((0..dim).map(|_| rng.gen_range(lo..hi)).collect())
        }
    }
}

/// One core point per label (generated in parallel), optionally reduced to
/// the `top_k` largest radii.
pub fn generate_fingerprint(
    net: &Network,
    victim_id: &str,
    cfg: &CoreGenConfig,
    pool: Option<&LabeledDataset>,
    top_k: Option<usize>,
) -> Result<FingerprintRun> {
    cfg.validate()?;
    let n = net.output_dim();
    if let Some(k) = top_k {
        if k == 0 || k > n {
            return Err(Error::InvalidConfig(format!("top_k {k} must be in 1..={n}")));
        }
    }
    let results: Vec<Result<(CorePoint, CoreTrace)>> = (0..n)
        .into_par_iter()
        .map(|label| {
            let start = initial_point(label, net.input_dim(), cfg, pool)?;
            generate_core_point(net, label, &start, cfg)
        })
        .collect();

    if results.iter().any(|r| r.is_err()) {
        let summary: Vec<String> = results
            .iter()
            .enumerate()
            .map(|(label, r)| match r {
                Ok((c, _)) => format!("label {label}: ok (radius {:.4})", c.radius),
                Err(e) => format!("label {label}: {e}"),
            })
            .collect();
        let label = results.iter().position(|r| r.is_err()).unwrap_or(0);
        return Err(Error::CoreGeneration {
            label,
            message: summary.join("; "),
        });
    }

    let (points, traces): (Vec<_>, Vec<_>) = results.into_iter().map(|r| r.expect("checked")).unzip();
    let mut fingerprint = Fingerprint::new(victim_id, points)?;
    if let Some(k) = top_k {
        fingerprint = fingerprint.top_k(k)?;
    }
    Ok(FingerprintRun { fingerprint, traces })
}

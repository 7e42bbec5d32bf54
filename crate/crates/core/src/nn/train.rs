use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, cross_entropy, soft_cross_entropy, softmax, Gradients, Layer, Network};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Plain minibatch SGD settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub l2_penalty: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            learning_rate: 0.05,
            batch_size: 16,
            seed: 0,
            l2_penalty: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return Err(Error::InvalidConfig("l2_penalty must be non-negative".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn with_epochs(&self, epochs: usize) -> Self {
        Self { epochs, ..self.clone() }
    }
}

/// Supervision for one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Hard(usize),
    /// A probability vector over classes.
    Soft(Vec<f64>),
}

impl Target {
    fn class(&self) -> usize {
        match self {
            Target::Hard(c) => *c,
            Target::Soft(p) => argmax(p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Trainable {
    #[default]
    All,
    /// Only the final dense layer is updated.
    LastLayer,
}

/// L-infinity projected gradient ascent on the cross-entropy loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub eps: f64,
    pub step: f64,
    pub iters: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub trainable: Trainable,
    /// Augment every hard-labelled sample with a PGD example built against
    /// the current parameters.
    pub adversarial: Option<PgdConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    /// Mean loss over the last epoch.
    pub final_loss: f64,
    /// Fraction of training samples whose prediction matches the target class.
    pub accuracy: f64,
}

/// PGD-L∞ example for `(x, label)`: `iters` signed-gradient steps of size
/// `step`, each projected onto the `eps` ball around `x` intersected with
/// `[0,1]^M`.
pub fn pgd_linf(net: &Network, x: &[f64], label: usize, cfg: &PgdConfig) -> Result<Vec<f64>> {
    let mut adv = x.to_vec();
    for _ in 0..cfg.iters {
        let grad = net.grad_loss_input(&adv, label)?;
        for ((a, g), origin) in adv.iter_mut().zip(&grad).zip(x) {
            let stepped = *a + cfg.step * g.signum() * (*g != 0.0) as u8 as f64;
            *a = stepped.clamp(origin - cfg.eps, origin + cfg.eps).clamp(0.0, 1.0);
        }
    }
    Ok(adv)
}

impl Network {
    /// Trains on a labelled dataset with hard cross-entropy.
    pub fn train(&mut self, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainReport> {
        let targets: Vec<Target> = data.ys.iter().map(|&y| Target::Hard(y)).collect();
        self.train_on(&data.xs, &targets, cfg, &TrainOptions::default())
    }

    /// Minibatch SGD on arbitrary targets. Deterministic given `cfg.seed`.
    pub fn train_on(
        &mut self,
        xs: &[Tensor],
        targets: &[Target],
        cfg: &TrainConfig,
        opts: &TrainOptions,
    ) -> Result<TrainReport> {
        cfg.validate()?;
        if xs.is_empty() {
            return Err(Error::InsufficientData("training set is empty".into()));
        }
        if xs.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: xs.len(),
                actual: targets.len(),
            });
        }
        let n_classes = self.output_dim();
        for (x, t) in xs.iter().zip(targets) {
            if x.len() != self.input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.input_dim(),
                    actual: x.len(),
                });
            }
            match t {
                Target::Hard(c) if *c >= n_classes => {
                    return Err(Error::InvalidConfig(format!("label {c} >= {n_classes}")))
                }
                Target::Soft(p) if p.len() != n_classes => {
                    return Err(Error::DimensionMismatch {
                        expected: n_classes,
                        actual: p.len(),
                    })
                }
                _ => {}
            }
        }
        if let Some(pgd) = &opts.adversarial {
            if !(pgd.eps > 0.0) {
                return Err(Error::InvalidConfig("pgd eps must be positive".into()));
            }
        }

        let trainable: Vec<bool> = {
            let dense = self.dense_indices();
            let last = *dense.last().expect("validated network has a dense layer");
            (0..self.layers.len())
                .map(|k| match opts.trainable {
                    Trainable::All => true,
                    Trainable::LastLayer => k == last,
                })
                .collect()
        };

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let mut grads = Gradients::zeros_like(self);
        let mut final_loss = f64::NAN;

        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut epoch_count = 0usize;
            for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
                grads.clear();
                let mut batch_loss = 0.0;
                let mut count = 0usize;
                for &i in batch {
                    batch_loss += self.accumulate(&xs[i], &targets[i], &mut grads);
                    count += 1;
                    if let (Some(pgd), Target::Hard(label)) = (&opts.adversarial, &targets[i]) {
                        let adv = pgd_linf(self, &xs[i], *label, pgd)?;
                        batch_loss += self.accumulate(&adv, &targets[i], &mut grads);
                        count += 1;
                    }
                }
                if !batch_loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: batch_idx,
                        loss: batch_loss,
                    });
                }
                self.sgd_step(&grads, count, cfg, &trainable);
                epoch_loss += batch_loss;
                epoch_count += count;
            }
            final_loss = epoch_loss / epoch_count as f64;
            if !final_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: 0,
                    loss: final_loss,
                });
            }
        }

        let hits = xs
            .iter()
            .zip(targets)
            .filter(|(x, t)| argmax(&self.forward_unchecked(x)) == t.class())
            .count();
        Ok(TrainReport {
            epochs: cfg.epochs,
            final_loss,
            accuracy: hits as f64 / xs.len() as f64,
        })
    }

    fn accumulate(&self, x: &[f64], target: &Target, grads: &mut Gradients) -> f64 {
        let trace = self.trace(x);
        let logits = trace.last().expect("non-empty trace");
        let mut seed = softmax(logits);
        let loss = match target {
            Target::Hard(c) => {
                seed[*c] -= 1.0;
                cross_entropy(logits, *c)
            }
            Target::Soft(p) => {
                for (s, pk) in seed.iter_mut().zip(p) {
                    *s -= pk;
                }
                soft_cross_entropy(logits, p)
            }
        };
        self.backward(&trace, seed, Some(grads));
        loss
    }

    fn sgd_step(&mut self, grads: &Gradients, count: usize, cfg: &TrainConfig, trainable: &[bool]) {
        let scale = 1.0 / count as f64;
        for (k, layer) in self.layers.iter_mut().enumerate() {
            if !trainable[k] {
                continue;
            }
            if let (Layer::Dense(d), Some((gw, gb))) = (layer, &grads.layers[k]) {
                for (w, g) in d.weight.iter_mut().zip(gw) {
                    *w -= cfg.learning_rate * (g * scale + cfg.l2_penalty * *w);
                }
                for (b, g) in d.bias.iter_mut().zip(gb) {
                    *b -= cfg.learning_rate * g * scale;
                }
            }
        }
        self.apply_masks();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ArchSpec};

    fn blobs() -> LabeledDataset {
        crate::data::make_synthetic(2, 2, 40, 0.05, 11).unwrap()
    }

    #[test]
    fn zero_epochs_rejected() {
        let mut net = Network::new(&ArchSpec::new(2, &[8], 2, Activation::Relu), 0).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(net.train(&blobs(), &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn separable_blobs_fit() {
        let data = blobs();
        let mut net = Network::new(&ArchSpec::new(2, &[8], 2, Activation::Relu), 1).unwrap();
        let report = net.train(&data, &TrainConfig::default()).unwrap();
        assert!(report.accuracy >= 0.99, "{report:?}");
        let xs = data.xs.iter().map(|x| x.as_slice());
        assert!(net.accuracy(xs, &data.ys) >= 0.99);
    }

    #[test]
    fn same_seed_same_parameters() {
        let data = blobs();
        let arch = ArchSpec::new(2, &[6, 6], 2, Activation::Tanh);
        let cfg = TrainConfig::default().with_epochs(5);
        let mut a = Network::new(&arch, 3).unwrap();
        let mut b = Network::new(&arch, 3).unwrap();
        a.train(&data, &cfg).unwrap();
        b.train(&data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn last_layer_mode_freezes_the_rest() {
        let data = blobs();
        let arch = ArchSpec::new(2, &[6], 2, Activation::Relu);
        let before = Network::new(&arch, 4).unwrap();
        let mut after = before.clone();
        let targets: Vec<Target> = data.ys.iter().map(|&y| Target::Hard(y)).collect();
        let opts = TrainOptions {
            trainable: Trainable::LastLayer,
            adversarial: None,
        };
        after
            .train_on(&data.xs, &targets, &TrainConfig::default().with_epochs(3), &opts)
            .unwrap();
        assert_eq!(before.layers[0], after.layers[0]);
        assert_ne!(before.layers[2], after.layers[2]);
    }

    #[test]
    fn divergence_is_reported() {
        let data = blobs();
        let mut net = Network::new(&ArchSpec::new(2, &[8], 2, Activation::Relu), 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            ..TrainConfig::default()
        };
        assert!(matches!(net.train(&data, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn pgd_respects_ball_and_box() {
        let net = Network::new(&ArchSpec::new(4, &[8], 3, Activation::Relu), 2).unwrap();
        let x = [0.0, 0.98, 0.5, 0.03];
        let cfg = PgdConfig {
            eps: 0.05,
            step: 0.02,
            iters: 10,
        };
        let adv = pgd_linf(&net, &x, 1, &cfg).unwrap();
        for (a, o) in adv.iter().zip(&x) {
            assert!((a - o).abs() <= 0.05 + 1e-15);
            assert!((0.0..=1.0).contains(a));
        }
        let none = pgd_linf(&net, &x, 1, &PgdConfig { iters: 0, ..cfg }).unwrap();
        assert_eq!(none, x.to_vec());
    }
}

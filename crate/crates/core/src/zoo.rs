//! The model population: victim, homologous models and piracy models.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, SplitPlan};
use crate::error::{Error, Result};
use crate::identify::ModelGroup;
use crate::nn::{
    argmax, softmax, Activation, ArchSpec, Network, PgdConfig, Target, TrainConfig, TrainOptions, Trainable,
};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModelKind {
    Victim,
    HmSa,
    HmDa,
    PmP,
    PmFl,
    PmFa,
    PmAdv,
    EmSaL,
    EmDaL,
    EmSaPr,
    EmDaPr,
}

impl ModelKind {
    pub const SUSPECTS: [ModelKind; 10] = [
        ModelKind::HmSa,
        ModelKind::HmDa,
        ModelKind::PmP,
        ModelKind::PmFl,
        ModelKind::PmFa,
        ModelKind::PmAdv,
        ModelKind::EmSaL,
        ModelKind::EmDaL,
        ModelKind::EmSaPr,
        ModelKind::EmDaPr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Victim => "VICTIM",
            ModelKind::HmSa => "HM_SA",
            ModelKind::HmDa => "HM_DA",
            ModelKind::PmP => "PM_P",
            ModelKind::PmFl => "PM_FL",
            ModelKind::PmFa => "PM_FA",
            ModelKind::PmAdv => "PM_ADV",
            ModelKind::EmSaL => "EM_SA_L",
            ModelKind::EmDaL => "EM_DA_L",
            ModelKind::EmSaPr => "EM_SA_PR",
            ModelKind::EmDaPr => "EM_DA_PR",
        }
    }

    /// Population group; the victim counts as a post-processing copy of itself.
    pub fn group(self) -> ModelGroup {
        match self {
            ModelKind::HmSa | ModelKind::HmDa => ModelGroup::HM,
            ModelKind::Victim | ModelKind::PmP | ModelKind::PmFl | ModelKind::PmFa | ModelKind::PmAdv => ModelGroup::PM,
            ModelKind::EmSaL | ModelKind::EmDaL | ModelKind::EmSaPr | ModelKind::EmDaPr => ModelGroup::EM,
        }
    }

    pub fn is_piracy(self) -> bool {
        self.group().is_piracy()
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        std::iter::once(ModelKind::Victim)
            .chain(ModelKind::SUSPECTS)
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub id: String,
    pub kind: ModelKind,
    /// Victim id for piracy models, `None` for independent ones.
    pub lineage: Option<String>,
    pub seed: u64,
    /// Accuracy on the model's own training objective (labels, or victim
    /// agreement for extraction surrogates).
    pub accuracy: f64,
    pub net: Network,
}

/// Number of models per suspect kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounts {
    pub hm_sa: usize,
    pub hm_da: usize,
    pub pm_p: usize,
    pub pm_fl: usize,
    pub pm_fa: usize,
    pub pm_adv: usize,
    pub em_sa_l: usize,
    pub em_da_l: usize,
    pub em_sa_pr: usize,
    pub em_da_pr: usize,
}

impl KindCounts {
    pub fn uniform(n: usize) -> Self {
        Self {
            hm_sa: n,
            hm_da: n,
            pm_p: n,
            pm_fl: n,
            pm_fa: n,
            pm_adv: n,
            em_sa_l: n,
            em_da_l: n,
            em_sa_pr: n,
            em_da_pr: n,
        }
    }

    pub fn get(&self, kind: ModelKind) -> usize {
        match kind {
            ModelKind::Victim => 1,
            ModelKind::HmSa => self.hm_sa,
            ModelKind::HmDa => self.hm_da,
            ModelKind::PmP => self.pm_p,
            ModelKind::PmFl => self.pm_fl,
            ModelKind::PmFa => self.pm_fa,
            ModelKind::PmAdv => self.pm_adv,
            ModelKind::EmSaL => self.em_sa_l,
            ModelKind::EmDaL => self.em_da_l,
            ModelKind::EmSaPr => self.em_sa_pr,
            ModelKind::EmDaPr => self.em_da_pr,
        }
    }
}

impl Default for KindCounts {
    fn default() -> Self {
        Self {
            hm_sa: 4,
            hm_da: 4,
            ..Self::uniform(2)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooConfig {
    pub counts: KindCounts,
    pub victim_arch: ArchSpec,
    /// Architecture used for the `*_DA` kinds.
    pub alt_arch: ArchSpec,
    /// Base training config for victim, homologous models and surrogates.
    pub train: TrainConfig,
    pub fine_tune_epochs: usize,
    /// Learning rate for every attack that starts from the victim's weights.
    pub fine_tune_learning_rate: f64,
    pub prune_fraction: f64,
    pub adv_epochs: usize,
    pub pgd: PgdConfig,
    pub extract_epochs: usize,
    pub seed: u64,
}

impl ZooConfig {
    /// Desk-scale defaults for `dim` inputs and `n_classes` outputs.
    pub fn desk(dim: usize, n_classes: usize, seed: u64) -> Self {
        Self {
            counts: KindCounts::default(),
            victim_arch: ArchSpec::new(dim, &[128], n_classes, Activation::Relu),
            alt_arch: ArchSpec::new(dim, &[96], n_classes, Activation::Tanh),
            train: TrainConfig {
                l2_penalty: 1e-4,
                ..TrainConfig::default()
            },
            fine_tune_epochs: 20,
            fine_tune_learning_rate: 0.01,
            prune_fraction: 0.3,
            adv_epochs: 20,
            pgd: PgdConfig {
                eps: 0.03,
                step: 0.01,
                iters: 5,
            },
            extract_epochs: 200,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.victim_arch.arch_id() == self.alt_arch.arch_id() {
            return Err(Error::InvalidConfig(
                "alternative architecture must differ from the victim's".into(),
            ));
        }
        if self.victim_arch.input_dim != self.alt_arch.input_dim
            || self.victim_arch.output_dim != self.alt_arch.output_dim
        {
            return Err(Error::InvalidConfig(
                "architectures disagree on input/output size".into(),
            ));
        }
        if !(self.fine_tune_learning_rate > 0.0 && self.fine_tune_learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("fine_tune_learning_rate must be positive".into()));
        }
        if !(self.prune_fraction > 0.0 && self.prune_fraction < 1.0) {
            return Err(Error::InvalidConfig("prune_fraction must be in (0,1)".into()));
        }
        if !(self.pgd.eps > 0.0) {
            return Err(Error::InvalidConfig("pgd eps must be positive".into()));
        }
        Ok(())
    }
}

pub fn train_victim(split: &SplitPlan, arch: &ArchSpec, cfg: &TrainConfig, seed: u64) -> Result<ModelRecord> {
    if split.victim.is_empty() {
        return Err(Error::InsufficientData("victim split is empty".into()));
    }
    let mut net = Network::new(arch, seed)?;
    let report = net.train(&split.victim, &cfg.with_seed(derive_seed(seed, "shuffle")))?;
    Ok(ModelRecord {
        id: "victim".into(),
        kind: ModelKind::Victim,
        lineage: None,
        seed,
        accuracy: report.accuracy,
        net,
    })
}

/// Independent model trained from scratch on `X_h`.
pub fn train_homologous(
    id: &str,
    split: &SplitPlan,
    arch: &ArchSpec,
    victim_arch_id: &str,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ModelRecord> {
    if split.homologous.is_empty() {
        return Err(Error::InsufficientData("homologous split is empty".into()));
    }
    let mut net = Network::new(arch, seed)?;
    let report = net.train(&split.homologous, &cfg.with_seed(derive_seed(seed, "shuffle")))?;
    let kind = if net.arch_id == victim_arch_id {
        ModelKind::HmSa
    } else {
        ModelKind::HmDa
    };
    Ok(ModelRecord {
        id: id.into(),
        kind,
        lineage: None,
        seed,
        accuracy: report.accuracy,
        net,
    })
}

fn require_victim(victim: &ModelRecord) -> Result<()> {
    if victim.kind != ModelKind::Victim {
        return Err(Error::InvalidConfig(format!("{} is not a victim model", victim.id)));
    }
    Ok(())
}

fn hard_targets(data: &LabeledDataset) -> Vec<Target> {
    data.ys.iter().map(|&y| Target::Hard(y)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FineTuneMode {
    LastLayer,
    All,
}

/// Copy of the victim fine-tuned on labelled attack data. Zero epochs
/// returns an unchanged copy.
pub fn fine_tune(
    id: &str,
    victim: &ModelRecord,
    attack: &LabeledDataset,
    mode: FineTuneMode,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ModelRecord> {
    require_victim(victim)?;
    let mut net = victim.net.clone();
    let accuracy = if cfg.epochs == 0 {
        net.accuracy(attack.inputs(), &attack.ys)
    } else {
        let opts = TrainOptions {
            trainable: match mode {
                FineTuneMode::LastLayer => Trainable::LastLayer,
                FineTuneMode::All => Trainable::All,
            },
            adversarial: None,
        };
        net.train_on(&attack.xs, &hard_targets(attack), &cfg.with_seed(seed), &opts)?
            .accuracy
    };
    Ok(ModelRecord {
        id: id.into(),
        kind: match mode {
            FineTuneMode::LastLayer => ModelKind::PmFl,
            FineTuneMode::All => ModelKind::PmFa,
        },
        lineage: Some(victim.id.clone()),
        seed,
        accuracy,
        net,
    })
}

/// Fine-pruning: masks the least-active `prune_fraction` of the last hidden
/// layer's units (by mean |activation| on `attack`, which is the plain mean
/// for ReLU), then fine-tunes every layer with the mask held.
pub fn fine_prune(
    id: &str,
    victim: &ModelRecord,
    attack: &LabeledDataset,
    prune_fraction: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ModelRecord> {
    require_victim(victim)?;
    if !(prune_fraction > 0.0 && prune_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "prune_fraction {prune_fraction} must be in (0,1)"
        )));
    }
    if attack.is_empty() {
        return Err(Error::InsufficientData("attack data is empty".into()));
    }
    let mut net = victim.net.clone();
    let dense = net.dense_indices();
    if dense.len() < 2 {
        return Err(Error::InvalidConfig("fine-pruning needs a hidden layer".into()));
    }
    let layer = dense[dense.len() - 2];
    let units = net.dense(layer).expect("dense index").out_dim;
    let n_prune = (prune_fraction * units as f64).floor() as usize;
    if n_prune >= units {
        return Err(Error::InvalidConfig("prune_fraction would remove every unit".into()));
    }
    // Post-activation output of `layer` (or its raw output if nothing follows).
    let act_slot = if layer + 1 < dense[dense.len() - 1] {
        layer + 2
    } else {
        layer + 1
    };
    let mut mean = vec![0.0; units];
    for x in attack.inputs() {
        let trace = net.trace(x);
        for (m, a) in mean.iter_mut().zip(&trace[act_slot]) {
            *m += a.abs() / attack.len() as f64;
        }
    }
    let mut order: Vec<usize> = (0..units).collect();
    order.sort_by(|&a, &b| {
        mean[a]
            .partial_cmp(&mean[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut mask = vec![true; units];
    for &u in &order[..n_prune] {
        mask[u] = false;
    }
    net.dense_mut(layer).expect("dense index").unit_mask = Some(mask);
    net.apply_masks();
    let report = net.train_on(
        &attack.xs,
        &hard_targets(attack),
        &cfg.with_seed(seed),
        &TrainOptions::default(),
    )?;
    Ok(ModelRecord {
        id: id.into(),
        kind: ModelKind::PmP,
        lineage: Some(victim.id.clone()),
        seed,
        accuracy: report.accuracy,
        net,
    })
}

/// Copy of the victim fine-tuned on attack data augmented with PGD-L∞
/// examples against the current parameters.
pub fn adversarial_train(
    id: &str,
    victim: &ModelRecord,
    attack: &LabeledDataset,
    pgd: &PgdConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ModelRecord> {
    require_victim(victim)?;
    if !(pgd.eps > 0.0) {
        return Err(Error::InvalidConfig("pgd eps must be positive".into()));
    }
    let mut net = victim.net.clone();
    let opts = TrainOptions {
        trainable: Trainable::All,
        adversarial: (pgd.iters > 0).then_some(*pgd),
    };
    let report = net.train_on(&attack.xs, &hard_targets(attack), &cfg.with_seed(seed), &opts)?;
    Ok(ModelRecord {
        id: id.into(),
        kind: ModelKind::PmAdv,
        lineage: Some(victim.id.clone()),
        seed,
        accuracy: report.accuracy,
        net,
    })
}

/// Label-only access to a model.
pub struct LabelApi<'a>(&'a Network);

impl LabelApi<'_> {
    pub fn label(&self, x: &[f64]) -> Result<usize> {
        self.0.predict(x)
    }
}

/// Score access: the full logit vector.
pub struct ScoreApi<'a>(&'a Network);

impl ScoreApi<'_> {
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.0.forward(x)
    }
}

/// Query-only handle to the victim used by extraction attacks.
pub enum VictimApi<'a> {
    Label(LabelApi<'a>),
    Prob(ScoreApi<'a>),
}

impl<'a> VictimApi<'a> {
    pub fn label_only(victim: &'a ModelRecord) -> Self {
        VictimApi::Label(LabelApi(&victim.net))
    }

    pub fn with_scores(victim: &'a ModelRecord) -> Self {
        VictimApi::Prob(ScoreApi(&victim.net))
    }
}

/// Trains a freshly initialized surrogate on victim answers over attack
/// inputs: argmax labels (label mode) or softmax probabilities (prob mode).
pub fn extract(
    id: &str,
    victim: &ModelRecord,
    api: &VictimApi<'_>,
    attack: &LabeledDataset,
    surrogate: &ArchSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ModelRecord> {
    require_victim(victim)?;
    if attack.is_empty() {
        return Err(Error::InsufficientData("attack data is empty".into()));
    }
    let targets = attack
        .inputs()
        .map(|x| match api {
            VictimApi::Label(h) => h.label(x).map(Target::Hard),
            VictimApi::Prob(h) => h.logits(x).map(|z| Target::Soft(softmax(&z))),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut net = Network::new(surrogate, seed)?;
    net.train_on(
        &attack.xs,
        &targets,
        &cfg.with_seed(derive_seed(seed, "shuffle")),
        &TrainOptions::default(),
    )?;
    let agreement = attack
        .inputs()
        .zip(&targets)
        .filter(|(x, t)| {
            let want = match t {
                Target::Hard(c) => *c,
                Target::Soft(p) => argmax(p),
            };
            argmax(&net.forward_unchecked(x)) == want
        })
        .count() as f64
        / attack.len() as f64;
    let same_arch = net.arch_id == victim.net.arch_id;
    let kind = match (api, same_arch) {
        (VictimApi::Label(_), true) => ModelKind::EmSaL,
        (VictimApi::Label(_), false) => ModelKind::EmDaL,
        (VictimApi::Prob(_), true) => ModelKind::EmSaPr,
        (VictimApi::Prob(_), false) => ModelKind::EmDaPr,
    };
    Ok(ModelRecord {
        id: id.into(),
        kind,
        lineage: Some(victim.id.clone()),
        seed,
        accuracy: agreement,
        net,
    })
}

/// Victim plus every suspect, suspects ordered by (kind, index).
#[derive(Debug, Clone, PartialEq)]
pub struct Zoo {
    pub victim: ModelRecord,
    pub suspects: Vec<ModelRecord>,
}

impl Zoo {
    pub fn all(&self) -> impl Iterator<Item = &ModelRecord> {
        std::iter::once(&self.victim).chain(&self.suspects)
    }
}

/// Trains the victim, then every suspect in parallel.
pub fn build_zoo(split: &SplitPlan, cfg: &ZooConfig) -> Result<Zoo> {
    cfg.validate()?;
    let victim = train_victim(split, &cfg.victim_arch, &cfg.train, derive_seed(cfg.seed, "victim"))?;

    let jobs: Vec<(ModelKind, usize)> = ModelKind::SUSPECTS
        .iter()
        .flat_map(|&k| (0..cfg.counts.get(k)).map(move |i| (k, i)))
        .collect();
    let suspects = jobs
        .par_iter()
        .map(|&(kind, index)| build_suspect(kind, index, &victim, split, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Zoo { victim, suspects })
}

fn build_suspect(
    kind: ModelKind,
    index: usize,
    victim: &ModelRecord,
    split: &SplitPlan,
    cfg: &ZooConfig,
) -> Result<ModelRecord> {
    let id = format!("{}_{index}", kind.as_str().to_lowercase());
    let seed = derive_seed(cfg.seed, &id);
    let attack = &split.attacker;
    let victim_arch_id = &cfg.victim_arch.arch_id();
    let tune = TrainConfig {
        learning_rate: cfg.fine_tune_learning_rate,
        ..cfg.train.with_epochs(cfg.fine_tune_epochs)
    };
    let record = match kind {
        ModelKind::Victim => unreachable!("victim is not a suspect kind"),
        ModelKind::HmSa => train_homologous(&id, split, &cfg.victim_arch, victim_arch_id, &cfg.train, seed)?,
        ModelKind::HmDa => train_homologous(&id, split, &cfg.alt_arch, victim_arch_id, &cfg.train, seed)?,
        ModelKind::PmFl => fine_tune(&id, victim, attack, FineTuneMode::LastLayer, &tune, seed)?,
        ModelKind::PmFa => fine_tune(&id, victim, attack, FineTuneMode::All, &tune, seed)?,
        ModelKind::PmP => fine_prune(&id, victim, attack, cfg.prune_fraction, &tune, seed)?,
        ModelKind::PmAdv => adversarial_train(
            &id,
            victim,
            attack,
            &cfg.pgd,
            &TrainConfig {
                epochs: cfg.adv_epochs,
                ..tune.clone()
            },
            seed,
        )?,
        ModelKind::EmSaL | ModelKind::EmDaL | ModelKind::EmSaPr | ModelKind::EmDaPr => {
            let api = match kind {
                ModelKind::EmSaL | ModelKind::EmDaL => VictimApi::label_only(victim),
                _ => VictimApi::with_scores(victim),
            };
            let arch = match kind {
                ModelKind::EmSaL | ModelKind::EmSaPr => &cfg.victim_arch,
                _ => &cfg.alt_arch,
            };
            extract(
                &id,
                victim,
                &api,
                attack,
                arch,
                &cfg.train.with_epochs(cfg.extract_epochs),
                seed,
            )?
        }
    };
    debug_assert_eq!(record.kind, kind);
    Ok(record)
}

use std::sync::OnceLock;

use corepoint::data::SplitPlan;
use corepoint::harness::{build_split, ExperimentConfig};
use corepoint::nn::{argmax, pgd_linf, Network, PgdConfig};
use corepoint::zoo::{
    adversarial_train, build_zoo, extract, fine_prune, fine_tune, train_homologous, train_victim, FineTuneMode,
    KindCounts, ModelKind, ModelRecord, VictimApi, Zoo, ZooConfig,
};

struct Fixture {
    split: SplitPlan,
    cfg: ZooConfig,
    zoo: Zoo,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let exp = ExperimentConfig::demo();
        let split = build_split(&exp).unwrap();
        let cfg = ZooConfig {
            counts: KindCounts::uniform(1),
            ..exp.zoo_config()
        };
        let zoo = build_zoo(&split, &cfg).unwrap();
        Fixture { split, cfg, zoo }
    })
}

fn victim() -> &'static ModelRecord {
    &fixture().zoo.victim
}

fn accuracy_on(net: &Network, split_part: &corepoint::data::LabeledDataset) -> f64 {
    net.accuracy(split_part.inputs(), &split_part.ys)
}

fn dense_params(net: &Network) -> Vec<(Vec<f64>, Vec<f64>)> {
    net.dense_indices()
        .into_iter()
        .map(|i| {
            let d = net.dense(i).unwrap();
            (d.weight.clone(), d.bias.clone())
        })
        .collect()
}

#[test]
fn victim_fits_the_synthetic_task() {
    assert_eq!(victim().kind, ModelKind::Victim);
    assert!(victim().accuracy >= 0.95, "victim accuracy {}", victim().accuracy);
}

#[test]
fn victim_training_is_deterministic() {
    let f = fixture();
    let a = train_victim(&f.split, &f.cfg.victim_arch, &f.cfg.train, 7).unwrap();
    let b = train_victim(&f.split, &f.cfg.victim_arch, &f.cfg.train, 7).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_victim_split_is_rejected() {
    let f = fixture();
    let mut split = f.split.clone();
    split.victim = split.victim.subset("empty", &[]);
    assert!(train_victim(&split, &f.cfg.victim_arch, &f.cfg.train, 0).is_err());
}

#[test]
fn homologous_models_are_independent() {
    let f = fixture();
    let mut split = f.split.clone();
    split.homologous = split.victim.clone();
    let arch = &f.cfg.victim_arch;
    let hm = train_homologous("hm", &split, arch, &arch.arch_id(), &f.cfg.train, 99).unwrap();
    assert_eq!(hm.kind, ModelKind::HmSa);
    assert!(hm.lineage.is_none());
    assert_ne!(dense_params(&hm.net), dense_params(&victim().net));
    assert!(hm.accuracy >= 0.9);

    let da = train_homologous("hm", &f.split, &f.cfg.alt_arch, &arch.arch_id(), &f.cfg.train, 99).unwrap();
    assert_eq!(da.kind, ModelKind::HmDa);
    assert_ne!(da.net.arch_id, victim().net.arch_id);
}

#[test]
fn last_layer_fine_tune_freezes_the_body() {
    let f = fixture();
    let pm = f.zoo.suspects.iter().find(|m| m.kind == ModelKind::PmFl).unwrap();
    let (before, after) = (dense_params(&victim().net), dense_params(&pm.net));
    assert_eq!(before[..before.len() - 1], after[..after.len() - 1]);
    assert_ne!(before.last(), after.last());
    assert_eq!(pm.lineage.as_deref(), Some("victim"));
}

#[test]
fn zero_epoch_fine_tune_is_a_copy() {
    let f = fixture();
    let cfg = f.cfg.train.with_epochs(0);
    let pm = fine_tune("copy", victim(), &f.split.attacker, FineTuneMode::All, &cfg, 1).unwrap();
    assert_eq!(pm.net, victim().net);
}

#[test]
fn fine_tuning_keeps_accuracy() {
    let f = fixture();
    let base = accuracy_on(&victim().net, &f.split.attacker);
    for kind in [ModelKind::PmFl, ModelKind::PmFa] {
        let pm = f.zoo.suspects.iter().find(|m| m.kind == kind).unwrap();
        assert!(accuracy_on(&pm.net, &f.split.attacker) >= base - 0.05, "{kind}");
    }
}

#[test]
fn fine_pruning_masks_and_keeps_accuracy() {
    let f = fixture();
    let cfg = f.cfg.train.with_epochs(f.cfg.fine_tune_epochs);
    assert!(fine_prune("p", victim(), &f.split.attacker, 0.0, &cfg, 1).is_err());
    assert!(fine_prune("p", victim(), &f.split.attacker, 1.0, &cfg, 1).is_err());

    let pm = f.zoo.suspects.iter().find(|m| m.kind == ModelKind::PmP).unwrap();
    let dense = pm.net.dense_indices();
    let layer = pm.net.dense(dense[dense.len() - 2]).unwrap();
    let mask = layer.unit_mask.as_ref().expect("pruned layer carries a mask");
    let dead: Vec<usize> = (0..mask.len()).filter(|&u| !mask[u]).collect();
    assert_eq!(dead.len(), (f.cfg.prune_fraction * mask.len() as f64).floor() as usize);
    let next = pm.net.dense(dense[dense.len() - 1]).unwrap();
    for &u in &dead {
        assert_eq!(layer.bias[u], 0.0);
        for row in next.weight.chunks_exact(next.in_dim) {
            assert_eq!(row[u], 0.0);
        }
    }
    let base = accuracy_on(&victim().net, &f.split.attacker);
    assert!((accuracy_on(&pm.net, &f.split.attacker) - base).abs() <= 0.1);
}

#[test]
fn adversarial_training_improves_robustness() {
    let f = fixture();
    let pm = f.zoo.suspects.iter().find(|m| m.kind == ModelKind::PmAdv).unwrap();
    let robust = |net: &Network| {
        let data = &f.split.attacker;
        data.inputs()
            .zip(&data.ys)
            .filter(|(x, &y)| {
                let adv = pgd_linf(net, x, y, &f.cfg.pgd).unwrap();
                argmax(&net.forward(&adv).unwrap()) == y
            })
            .count() as f64
            / data.len() as f64
    };
    assert!(robust(&pm.net) > robust(&victim().net));
}

#[test]
fn pgd_without_iterations_is_plain_fine_tuning() {
    let f = fixture();
    let cfg = f.cfg.train.with_epochs(2);
    let none = PgdConfig { iters: 0, ..f.cfg.pgd };
    let adv = adversarial_train("a", victim(), &f.split.attacker, &none, &cfg, 5).unwrap();
    let ft = fine_tune("f", victim(), &f.split.attacker, FineTuneMode::All, &cfg, 5).unwrap();
    assert_eq!(adv.net, ft.net);
}

#[test]
fn extraction_agrees_with_the_victim() {
    let f = fixture();
    for m in f
        .zoo
        .suspects
        .iter()
        .filter(|m| m.kind.group() == corepoint::identify::ModelGroup::EM)
    {
        assert!(m.accuracy >= 0.9, "{} agreement {}", m.id, m.accuracy);
        let agree = f
            .split
            .attacker
            .inputs()
            .filter(|x| m.net.predict(x).unwrap() == victim().net.predict(x).unwrap())
            .count() as f64
            / f.split.attacker.len() as f64;
        assert_eq!(agree, m.accuracy);
    }
}

#[test]
fn extraction_is_reproducible() {
    let f = fixture();
    let cfg = f.cfg.train.with_epochs(3);
    let api = VictimApi::label_only(victim());
    let a = extract("e", victim(), &api, &f.split.attacker, &f.cfg.alt_arch, &cfg, 3).unwrap();
    let b = extract("e", victim(), &api, &f.split.attacker, &f.cfg.alt_arch, &cfg, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.kind, ModelKind::EmDaL);
    let api = VictimApi::with_scores(victim());
    let c = extract("e", victim(), &api, &f.split.attacker, &f.cfg.victim_arch, &cfg, 3).unwrap();
    assert_eq!(c.kind, ModelKind::EmSaPr);
}

#[test]
fn zoo_covers_the_taxonomy_with_consistent_lineage() {
    let zoo = &fixture().zoo;
    let kinds: Vec<ModelKind> = zoo.suspects.iter().map(|m| m.kind).collect();
    assert_eq!(kinds, ModelKind::SUSPECTS.to_vec());
    for m in zoo.all() {
        match m.kind {
            ModelKind::Victim | ModelKind::HmSa | ModelKind::HmDa => assert!(m.lineage.is_none(), "{}", m.id),
            _ => assert_eq!(m.lineage.as_deref(), Some(zoo.victim.id.as_str()), "{}", m.id),
        }
        assert!(m.accuracy >= 0.85, "{} accuracy {}", m.id, m.accuracy);
    }
}

#[test]
fn zoo_generation_is_deterministic() {
    let f = fixture();
    let again = build_zoo(&f.split, &f.cfg).unwrap();
    assert_eq!(again, f.zoo);
}

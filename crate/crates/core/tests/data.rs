use corepoint::data::{make_synthetic, split_225};
use corepoint::nn::{Activation, ArchSpec, Network, Target, TrainConfig, TrainOptions};

#[test]
fn linear_model_separates_the_synthetic_mixture() {
    let data = make_synthetic(5, 16, 200, 0.08, 3).unwrap();
    let (even, odd): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|i| i % 2 == 0);
    let (train, test) = (data.subset("train", &even), data.subset("test", &odd));
    let mut net = Network::new(&ArchSpec::new(16, &[], 5, Activation::Relu), 1).unwrap();
    let targets: Vec<Target> = train.ys.iter().map(|&y| Target::Hard(y)).collect();
    let cfg = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    net.train_on(&train.xs, &targets, &cfg, &TrainOptions::default())
        .unwrap();
    let acc = net.accuracy(test.inputs(), &test.ys);
    assert!(acc >= 0.95, "linear accuracy {acc}");
}

#[test]
fn splits_are_reproducible_and_sized() {
    let data = make_synthetic(5, 16, 100, 0.1, 9).unwrap();
    let a = split_225(&data, 0.5, 4).unwrap();
    let b = split_225(&data, 0.5, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.victim.len(), 200);
    assert_eq!(a.attacker.len(), 100);
    let shared = a.homologous_idx.iter().filter(|i| a.victim_idx.contains(i)).count();
    assert_eq!(shared, 100);
}

use corepoint::data::{make_synthetic, split_225};
use corepoint::fingerprint::deepfool_radius;
use corepoint::identify::{calibrate_metric, cos_dist, cos_matrix, l1_dist, SuspectTranscript};
use corepoint::nn::{argmax, cross_entropy, softmax, Activation, ArchSpec, LayerSpec, Network};
use corepoint::stats::spearman;
use corepoint::Tensor;
use proptest::prelude::*;

fn finite_vec(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

/// Smallest |pre-activation| over all ReLU layers at `x`.
fn min_relu_preactivation(net: &Network, x: &[f64]) -> f64 {
    let mut h = x.to_vec();
    let mut min = f64::INFINITY;
    for (i, spec) in net.layer_specs().into_iter().enumerate() {
        match spec {
            LayerSpec::Dense { .. } => {
                let d = net.dense(i).unwrap();
                h = d
                    .weight
                    .chunks_exact(d.in_dim)
                    .zip(&d.bias)
                    .map(|(row, b)| row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>() + b)
                    .collect();
            }
            LayerSpec::Activation { activation, .. } => {
                if activation == Activation::Relu {
                    min = h.iter().fold(min, |m, v| m.min(v.abs()));
                }
                h = h
                    .iter()
                    .map(|&v| match activation {
                        Activation::Relu => v.max(0.0),
                        Activation::Tanh => v.tanh(),
                    })
                    .collect();
            }
        }
    }
    min
}

/// Five-point central difference of `f` along coordinate `j`.
fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], j: usize, h: f64) -> f64 {
    let at = |d: f64| {
        let mut y = x.to_vec();
        y[j] += d;
        f(&y)
    };
    (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(z in finite_vec(6, -50.0, 50.0)) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(argmax(&p), argmax(&z));
    }

    #[test]
    fn softmax_is_shift_invariant(z in finite_vec(5, -20.0, 20.0), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        for (a, b) in softmax(&z).iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_is_negative_log_softmax(z in finite_vec(4, -10.0, 10.0), t in 0usize..4) {
        let expected = -softmax(&z)[t].ln();
        prop_assert!((cross_entropy(&z, t) - expected).abs() < 1e-9);
        prop_assert!(cross_entropy(&z, t) >= 0.0);
    }

    #[test]
    fn input_gradients_match_finite_differences(
        seed in any::<u64>(),
        relu in any::<bool>(),
        x in finite_vec(5, 0.0, 1.0),
        target in 0usize..3,
    ) {
        let act = if relu { Activation::Relu } else { Activation::Tanh };
        let net = Network::new(&ArchSpec::new(5, &[7, 6], 3, act), seed).unwrap();
        let h = 1e-4;
        prop_assume!(min_relu_preactivation(&net, &x) > 1e-2);
        let g = net.grad_loss_input(&x, target).unwrap();
        let (_, jac) = net.jacobian(&x).unwrap();
        for j in 0..x.len() {
            let fd = central_diff(|y| cross_entropy(&net.forward(y).unwrap(), target), &x, j, h);
            prop_assert!(rel_err(g[j], fd) < 1e-6, "loss grad {} vs {}", g[j], fd);
            for (c, row) in jac.iter().enumerate() {
                let fd = central_diff(|y| net.forward(y).unwrap()[c], &x, j, h);
                prop_assert!(rel_err(row[j], fd) < 1e-6, "logit {c} grad {} vs {}", row[j], fd);
            }
        }
    }

    #[test]
    fn deepfool_matches_distance_to_nearest_hyperplane(
        w in finite_vec(12, -2.0, 2.0),
        b in finite_vec(3, -1.0, 1.0),
        x in finite_vec(4, -1.0, 1.0),
    ) {
        let net = Network::linear(w.clone(), b.clone(), 4).unwrap();
        let z = net.forward(&x).unwrap();
        let top = argmax(&z);
        let exact = (0..3)
            .filter(|&l| l != top)
            .map(|l| {
                let diff: f64 = (0..4).map(|j| (w[l * 4 + j] - w[top * 4 + j]).powi(2)).sum();
                (z[top] - z[l]).abs() / diff.sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        prop_assume!(exact.is_finite() && exact > 1e-9);
        let out = deepfool_radius(&net, &x, 50, 0.0).unwrap();
        prop_assert!(out.converged);
        prop_assert!(out.iters <= 2);
        prop_assert!((out.radius - exact).abs() / exact < 1e-3);
    }

    #[test]
    fn transcript_metrics_are_distances(
        a in finite_vec(12, -5.0, 5.0),
        b in finite_vec(12, -5.0, 5.0),
        scale in 0.01f64..100.0,
    ) {
        let rows = |v: &[f64]| v.chunks(4).map(<[f64]>::to_vec).collect::<Vec<_>>();
        prop_assume!(rows(&a).iter().chain(rows(&b).iter()).all(|r| r.iter().any(|v| v.abs() > 1e-3)));
        let ta = SuspectTranscript::new("a", vec![0, 1, 2], rows(&a)).unwrap();
        let tb = SuspectTranscript::new("b", vec![0, 1, 2], rows(&b)).unwrap();
        prop_assert_eq!(l1_dist(&ta, &ta).unwrap(), 0.0);
        prop_assert!(cos_dist(&ta, &ta).unwrap().abs() < 1e-15);
        prop_assert_eq!(l1_dist(&ta, &tb).unwrap(), l1_dist(&tb, &ta).unwrap());
        prop_assert!((cos_dist(&ta, &tb).unwrap() - cos_dist(&tb, &ta).unwrap()).abs() < 1e-15);
        prop_assert!(l1_dist(&ta, &tb).unwrap() >= 0.0);
        prop_assert!(cos_dist(&ta, &tb).unwrap() >= 0.0);
        let m = cos_matrix(&ta).unwrap();
        let scaled: Vec<Vec<f64>> = rows(&a).iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        let ms = cos_matrix(&SuspectTranscript::new("s", vec![0, 1, 2], scaled).unwrap()).unwrap();
        for i in 0..3 {
            prop_assert!((m[i][i] - 1.0).abs() < 1e-12);
            for j in 0..3 {
                prop_assert!((m[i][j] - ms[i][j]).abs() < 1e-12);
                prop_assert!(m[i][j].abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn calibrated_threshold_separates_separable_populations(
        piracy in prop::collection::vec(0.0f64..1.0, 1..8),
        homologous in prop::collection::vec(1.5f64..3.0, 1..8),
    ) {
        let c = calibrate_metric(&piracy, &homologous).unwrap();
        prop_assert!(!c.overlapping && c.margin > 0.0);
        prop_assert!(piracy.iter().all(|&p| p < c.threshold));
        prop_assert!(homologous.iter().all(|&h| h >= c.threshold));
    }

    #[test]
    fn spearman_is_bounded(a in finite_vec(8, -1.0, 1.0), b in finite_vec(8, -1.0, 1.0)) {
        if let Some(r) = spearman(&a, &b) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        }
        if let Some(r) = spearman(&a, &a) {
            prop_assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_json_round_trip_is_exact(v in finite_vec(9, -1e300, 1e300)) {
        let t = Tensor::new(vec![3, 3], v).unwrap();
        let back: Tensor = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        prop_assert_eq!(back, t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn split_overlap_follows_the_grid(step in 0usize..=10, seed in any::<u64>()) {
        let g = step as f64 / 10.0;
        let data = make_synthetic(4, 3, 25, 0.05, seed).unwrap();
        let split = split_225(&data, g, seed).unwrap();
        prop_assert!((split.measured_overlap() - g).abs() <= 1.0 / split.victim.len() as f64);
        for part in [&split.victim, &split.homologous, &split.attacker] {
            let counts = part.class_counts();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }
        prop_assert!(split.victim_idx.iter().all(|i| !split.attacker_idx.contains(i)));
    }

    #[test]
    fn network_json_round_trip_is_exact(seed in any::<u64>()) {
        let net = Network::new(&ArchSpec::new(4, &[5], 3, Activation::Tanh), seed).unwrap();
        let back: Network = serde_json::from_str(&serde_json::to_string(&net).unwrap()).unwrap();
        prop_assert_eq!(back, net);
    }
}

use hexagan::data::{inject_mcar, kfold_split, load_csv_from_reader, minmax_scale, sample_batch, two_gaussians, DirtyDataset, LoadOptions};
use hexagan::engine::{input_gradient_graph, Activation, Mlp, RmsPropState, Tape, Tensor};
use hexagan::eval::{f1_score, rmse_missing, run_cv_experiment, Protocol};
use hexagan::losses::{cross_entropy, gp_mi, loss_d_cg, loss_d_mi, CriticBalance};
use hexagan::networks::{compose_imputed, Component, HexaGanParams, InitScheme};
use hexagan::trainer::{balance_targets, classifier_step, conditional_step, imputation_step, train, TrainConfig, TrainState};
use hexagan::HexaError;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Tensor::from_matrix(rows, cols, v).unwrap())
}

fn mask(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop::bool::ANY, rows * cols)
        .prop_map(move |v| Tensor::from_matrix(rows, cols, v.into_iter().map(|b| b as u8 as f64).collect()).unwrap())
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 8,
        n_critic: 2,
        n_cg: 2,
        checkpoint_every: 0,
        ..Default::default()
    }
}

fn snapshot(params: &HexaGanParams, c: Component) -> Vec<Vec<f64>> {
    params
        .network(c)
        .layers()
        .iter()
        .flat_map(|l| [l.weight.data().to_vec(), l.bias.data().to_vec()])
        .collect()
}

fn csv_bytes(rows: &[[f64; 3]], labels: &[&str]) -> String {
    let mut s = String::from("a,b,c,label\n");
    for (r, l) in rows.iter().zip(labels) {
        s.push_str(&format!("{},{},{},{l}\n", r[0], r[1], r[2]));
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backward_is_linear(a in matrix(3, 3, -2.0, 2.0), ca in -3.0f64..3.0, cb in -3.0f64..3.0) {
        let grad = |wf: f64, wg: f64| {
            let mut t = Tape::new();
            let x = t.parameter(a.clone());
            let f = t.sigmoid(x).unwrap();
            let f = t.sum(f).unwrap();
            let g = t.square(x).unwrap();
            let g = t.sum(g).unwrap();
            let f = t.scale(f, wf).unwrap();
            let g = t.scale(g, wg).unwrap();
            let total = t.add(f, g).unwrap();
            t.backward(total).unwrap().get(x)
        };
        let (gf, gg, both) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(ca, cb));
        for k in 0..a.len() {
            let expect = ca * gf.data()[k] + cb * gg.data()[k];
            prop_assert!((both.data()[k] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn input_gradient_of_a_linear_network_ignores_the_input(x1 in matrix(2, 3, -1.0, 1.0), x2 in matrix(2, 3, -1.0, 1.0), seed in 0u64..100) {
        let net = Mlp::he_init(&[3, 4, 2], &[Activation::Linear, Activation::Linear], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let at = |x: &Tensor| {
            let mut t = Tape::new();
            let bound = net.bind(&mut t, false);
            let xi = t.constant(x.clone());
            let g = input_gradient_graph(&mut t, &bound, xi, 1).unwrap();
            t.value(g).clone()
        };
        prop_assert_eq!(at(&x1), at(&x2));
    }

    #[test]
    fn rmsprop_with_zero_gradients_is_the_identity(p in matrix(3, 2, -5.0, 5.0)) {
        let mut param = p.clone();
        let mut opt = RmsPropState::new([&param], 1e-3, 0.9, 1e-8);
        for _ in 0..3 {
            opt.step(vec![&mut param], &[Tensor::zeros(3, 2)]).unwrap();
        }
        prop_assert_eq!(param, p);
    }

    #[test]
    fn softmax_entries_are_probabilities(a in matrix(4, 5, -30.0, 30.0)) {
        let mut t = Tape::new();
        let x = t.constant(a);
        let s = t.softmax_rows(x).unwrap();
        for row in 0..4 {
            let r = t.value(s).row(row);
            prop_assert!(r.iter().all(|&v| v > 0.0 && v < 1.0) || r.contains(&1.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pipeline_keeps_masks_boolean_and_observed_values_in_range(
        rows in prop::collection::vec([-50.0f64..50.0, 0.0f64..1.0, 1e3f64..1e4], 4..30),
        rate in 0.0f64..0.9,
        seed in 0u64..1000,
    ) {
        let labels: Vec<&str> = (0..rows.len()).map(|j| if j % 2 == 0 { "p" } else { "q" }).collect();
        let raw = load_csv_from_reader(csv_bytes(&rows, &labels).as_bytes(), &LoadOptions::new("label")).unwrap();
        let scaled = minmax_scale(&raw).unwrap();
        let dirty = inject_mcar(&scaled, rate, seed).unwrap();
        for ds in [&scaled, &dirty] {
            for (&m, &x) in ds.mask.data().iter().zip(ds.x.data()) {
                prop_assert!(m == 0.0 || m == 1.0);
                prop_assert!(m == 0.0 || (0.0..=1.0).contains(&x));
            }
        }
        for (&before, &after) in scaled.mask.data().iter().zip(dirty.mask.data()) {
            prop_assert!(after <= before, "a missing cell became observed");
        }
    }

    #[test]
    fn pipeline_is_a_pure_function_of_bytes_and_seed(
        rows in prop::collection::vec([-5.0f64..5.0, 0.0f64..1.0, 0.0f64..9.0], 4..20),
        seed in 0u64..1000,
    ) {
        let labels: Vec<&str> = (0..rows.len()).map(|j| if j % 3 == 0 { "p" } else { "q" }).collect();
        let bytes = csv_bytes(&rows, &labels);
        let run = || -> DirtyDataset {
            let raw = load_csv_from_reader(bytes.as_bytes(), &LoadOptions::new("label")).unwrap();
            inject_mcar(&minmax_scale(&raw).unwrap(), 0.3, seed).unwrap()
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a.mask, b.mask);
        prop_assert_eq!(a.label_mask, b.label_mask);
    }

    #[test]
    fn kfold_partitions_every_index(n in 2usize..200, k in 2usize..10, seed in 0u64..1000) {
        prop_assume!(k <= n);
        let split = kfold_split(n, k, seed).unwrap();
        let mut all: Vec<usize> = (0..k).flat_map(|f| split.test(f).to_vec()).collect();
        let sizes: Vec<usize> = (0..k).map(|f| split.test(f).len()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for f in 0..k {
            prop_assert_eq!(split.train(f).len() + split.test(f).len(), n);
        }
    }

    #[test]
    fn composing_never_alters_observed_cells(x in matrix(5, 4, 0.0, 1.0), m in mask(5, 4), xbar in matrix(5, 4, 0.0, 1.0)) {
        let out = compose_imputed(&x, &m, &xbar).unwrap();
        for k in 0..x.len() {
            let expect = if m.data()[k] == 1.0 { x.data()[k] } else { xbar.data()[k] };
            prop_assert_eq!(out.data()[k].to_bits(), expect.to_bits());
        }
    }

    #[test]
    fn network_outputs_stay_in_range(x in matrix(6, 4, 0.0, 1.0), m in mask(6, 4), z in matrix(6, 4, 0.0, 1.0), seed in 0u64..50) {
        let p = HexaGanParams::init(4, 3, 4, InitScheme::He, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (x_hat, h) = p.impute_with_hidden(&x, &m, &z).unwrap();
        prop_assert!(x_hat.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(h.data().iter().all(|&v| v >= 0.0));
        let probs = p.predict_proba(&x_hat).unwrap();
        for j in 0..6 {
            prop_assert!((probs.row(j).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let y = Tensor::from_rows(&(0..6).map(|j| { let mut r = vec![0.0; 3]; r[j % 3] = 1.0; r }).collect::<Vec<_>>());
        let h_c = p.network(Component::GenCg).infer(&z.hstack(&y).unwrap()).unwrap();
        prop_assert!(h_c.data().iter().all(|&v| v >= 0.0));
        let score = p.network(Component::DiscCg).infer(&h.hstack(&y).unwrap()).unwrap();
        prop_assert!(score.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let (again, _) = p.impute_with_hidden(&x, &m, &z).unwrap();
        prop_assert_eq!(again, x_hat);
    }

    #[test]
    fn hidden_critic_loss_is_antisymmetric(f in matrix(5, 1, 0.0, 1.0), r in matrix(4, 1, 0.0, 1.0)) {
        let mut t = Tape::new();
        let (fi, ri) = (t.constant(f), t.constant(r));
        let a = loss_d_cg(&mut t, fi, ri).unwrap();
        let b = loss_d_cg(&mut t, ri, fi).unwrap();
        prop_assert_eq!(t.value(a).item(), -t.value(b).item());
    }

    #[test]
    fn fully_observed_rows_send_no_gradient_through_fake_terms(s in matrix(4, 4, -3.0, 3.0)) {
        for balance in [CriticBalance::PerUnit, CriticBalance::Joint] {
            let mut t = Tape::new();
            let si = t.parameter(s.clone());
            let l = loss_d_mi(&mut t, si, &Tensor::ones(4, 3), Some(&[true; 4]), None, balance).unwrap();
            let g = t.backward(l).unwrap().get(si);
            // Per-unit balance skips columns without fake entries altogether.
            let expect = if balance == CriticBalance::Joint { -0.25 } else { 0.0 };
            prop_assert!(g.data().iter().all(|&v| v == expect), "{balance:?}: {g:?}");
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative(p in matrix(3, 4, 0.01, 1.0), target in 0usize..4) {
        let mut t = Tape::new();
        let sums: Vec<f64> = (0..3).map(|j| p.row(j).iter().sum()).collect();
        let probs = Tensor::from_rows(&(0..3).map(|j| p.row(j).iter().map(|v| v / sums[j]).collect::<Vec<_>>()).collect::<Vec<_>>());
        let targets = Tensor::from_rows(&(0..3).map(|_| { let mut r = vec![0.0; 4]; r[target] = 1.0; r }).collect::<Vec<_>>());
        let pi = t.constant(probs);
        let ce = cross_entropy(&mut t, pi, &targets).unwrap();
        prop_assert!(t.value(ce).item() >= 0.0);
        let exact = t.constant(targets.clone());
        let zero = cross_entropy(&mut t, exact, &targets).unwrap();
        prop_assert!(t.value(zero).item().abs() < 1e-9);
    }

    #[test]
    fn penalties_are_nonnegative_and_vanish_for_constant_critics(x in matrix(5, 3, 0.0, 1.0), m in mask(5, 3), seed in 0u64..50) {
        let y = Tensor::from_rows(&(0..5).map(|j| if j % 2 == 0 { [1.0, 0.0] } else { [0.0, 1.0] }).collect::<Vec<_>>());
        let acts = [Activation::Relu, Activation::Relu, Activation::Relu, Activation::Linear];
        let widths = [5, 3, 2, 3, 4];
        let random = Mlp::he_init(&widths, &acts, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let constant = Mlp::zeros(&widths, &acts).unwrap();
        for (net, vanishes) in [(random, false), (constant, true)] {
            for centered_at_one in [false, true] {
                let mut t = Tape::new();
                let bound = net.bind(&mut t, true);
                let (xi, yi) = (t.constant(x.clone()), t.constant(y.clone()));
                let gp = gp_mi(&mut t, &bound, xi, yi, &m, None, centered_at_one).unwrap();
                let v = t.value(gp).item();
                prop_assert!(v >= 0.0);
                if vanishes && !centered_at_one {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn generated_rows_fill_every_class_to_the_largest(counts in prop::collection::vec(0usize..40, 2..6)) {
        let targets = balance_targets(&counts);
        let filled: Vec<usize> = counts.iter().zip(&targets).map(|(c, t)| c + t).collect();
        prop_assert!(filled.iter().all(|&f| f == *counts.iter().max().unwrap()));
    }

    #[test]
    fn rmse_ignores_observed_cells(x in matrix(4, 3, 0.0, 1.0), x_hat in matrix(4, 3, 0.0, 1.0), noise in matrix(4, 3, -5.0, 5.0), m in mask(4, 3)) {
        prop_assume!(m.data().contains(&0.0));
        let shifted = x_hat.zip_map(&m, |v, _| v).unwrap();
        let mut perturbed = shifted.clone();
        for k in 0..perturbed.len() {
            if m.data()[k] == 1.0 {
                perturbed.data_mut()[k] += noise.data()[k];
            }
        }
        prop_assert_eq!(rmse_missing(&x, &shifted, &m).unwrap(), rmse_missing(&x, &perturbed, &m).unwrap());
    }

    #[test]
    fn f1_ignores_sample_order(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..40), seed in 0u64..1000) {
        prop_assume!(pairs.iter().any(|&(_, t)| t == 1));
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let mut shuffled = pairs.clone();
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let (sp, st): (Vec<usize>, Vec<usize>) = shuffled.into_iter().unzip();
        prop_assert_eq!(f1_score(&pred, &truth, 1).unwrap(), f1_score(&sp, &st, 1).unwrap());
    }
}

#[test]
fn each_step_touches_only_its_own_networks() {
    let ds = inject_mcar(&minmax_scale(&two_gaussians(32, 8, 1).unwrap()).unwrap(), 0.2, 2).unwrap();
    let cfg = tiny_config();
    let mut state = TrainState::new(ds.d(), ds.n_classes(), &cfg).unwrap();
    let rows: Vec<usize> = (0..8).collect();
    let batch = sample_batch(&ds, &rows, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    type Step = fn(&mut TrainState, &TrainConfig, &hexagan::data::Batch) -> hexagan::Result<()>;
    let steps: [(&str, Step, &[Component]); 3] = [
        ("imputation", imputation_step, &[Component::Encoder, Component::GenMi, Component::DiscMi]),
        ("conditional", conditional_step, &[Component::GenCg, Component::DiscCg]),
        ("classifier", classifier_step, &[Component::Classifier]),
    ];
    for (name, step, owned) in steps {
        let before: Vec<_> = Component::ALL.iter().map(|&c| snapshot(&state.params, c)).collect();
        step(&mut state, &cfg, &batch).unwrap();
        for (i, &c) in Component::ALL.iter().enumerate() {
            let changed = snapshot(&state.params, c) != before[i];
            assert_eq!(changed, owned.contains(&c), "{name} step and {c:?}");
        }
    }
}

#[test]
fn update_counts_follow_the_schedule() {
    let ds = two_gaussians(32, 3, 4).unwrap();
    let cfg = TrainConfig { epochs: 1, ..tiny_config() };
    let state = train(&ds, &cfg, None, &mut ()).unwrap();
    let batches = 32 / cfg.batch_size;
    assert_eq!(state.updates_of(Component::DiscMi), cfg.n_critic * batches);
    assert_eq!(state.updates_of(Component::DiscCg), cfg.n_critic * cfg.n_cg * batches);
    assert_eq!(state.updates_of(Component::GenCg), cfg.n_cg * batches);
    assert_eq!(state.updates_of(Component::Classifier), batches);
}

#[test]
fn training_is_bitwise_reproducible() {
    let ds = inject_mcar(&two_gaussians(40, 3, 5).unwrap(), 0.2, 6).unwrap();
    let run = || {
        let s = train(&ds, &tiny_config(), None, &mut ()).unwrap();
        let mut bytes = Vec::new();
        s.params.save(&mut bytes).unwrap();
        (bytes, s.history)
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_losses_stop_training() {
    let ds = inject_mcar(&two_gaussians(40, 3, 7).unwrap(), 0.3, 8).unwrap();
    let mut cfg = tiny_config();
    cfg.epochs = 20;
    cfg.learning_rate = 1e150;
    cfg.weights.alpha1 = 1e300;
    match train(&ds, &cfg, None, &mut ()) {
        Err(HexaError::Divergence { .. }) => {}
        Err(e) => panic!("expected a divergence error, got {e}"),
        Ok(s) => panic!("training finished with finite params: {}", s.params.is_finite()),
    }
}

#[test]
fn test_rows_never_reach_a_training_batch() {
    let ds = two_gaussians(40, 3, 9).unwrap();
    let cfg = TrainConfig { epochs: 1, ..tiny_config() };
    let protocol = Protocol { folds: 4, repeats: 2, ..Default::default() };
    let records = run_cv_experiment(&ds, &cfg, &protocol, &mut |_| {}).unwrap();
    assert_eq!(records.len(), 8);
    assert!(records.iter().all(|r| r.leaked_batches == 0));
}

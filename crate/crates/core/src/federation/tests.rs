use super::*;
use crate::data::{self, PartitionMode};
use crate::nn::{Activation, Loss};

fn setup(num_clients: usize) -> (ArchSpec, FederatedData) {
    let d = data::synth::synth_clusters(600, 6, 3, 1.5, 11).unwrap();
    let (train, test) = data::train_test_split(&d, 0.8, 5).unwrap();
    let partition = data::partition(&train, num_clients, PartitionMode::Iid, 3).unwrap();
    let public = data::public_batch(&test, 20, 3, 8).unwrap();
    let arch = ArchSpec::mlp(&[6, 8, 3], Activation::Relu, Loss::CrossEntropy).unwrap();
    (
        arch,
        FederatedData {
            train,
            partition,
            test,
            public,
        },
    )
}

fn config(name: SchemeName, dp: bool) -> FederationConfig {
    FederationConfig {
        scheme: Scheme::new(name, dp),
        num_clients: 8,
        sampling: 0.5,
        rounds: 3,
        local: LocalTraining {
            iterations: 4,
            learning_rate: 0.2,
            batch_size: 10,
        },
        ratio: 0.25,
        t_init: 3,
        sigma: 1.0,
        delta: 1e-5,
        sensitivity: Sensitivity::Fixed(1.0),
        calibration_trials: 5,
        frac_bits: 32,
        lambda_max: 64,
        seeds: Seeds::default(),
    }
}

#[test]
fn every_scheme_runs_and_is_deterministic() {
    let (arch, data) = setup(8);
    for name in SchemeName::ALL {
        for dp in [false, true] {
            let a = run_experiment(config(name, dp), arch.clone(), &data).unwrap();
            let b = run_experiment(config(name, dp), arch.clone(), &data).unwrap();
            assert_eq!(a, b, "{name:?} dp={dp}");
            assert_eq!(a.trace.len(), 3);
            assert_eq!(a.trace[0].epsilon.is_some(), dp);
        }
    }
}

#[test]
fn zero_rounds_gives_empty_trace() {
    let (arch, data) = setup(8);
    let mut c = config(SchemeName::FlTop, false);
    c.rounds = 0;
    let r = run_experiment(c, arch, &data).unwrap();
    assert!(r.trace.is_empty());
    assert!(r.summary.is_none());
}

#[test]
fn reinit_schemes_keep_unselected_weights_at_init() {
    let (arch, data) = setup(8);
    for name in [SchemeName::FlTop, SchemeName::FlBas4] {
        let mut fed = Federation::new(config(name, false), arch.clone(), &data).unwrap();
        for t in 1..=3 {
            fed.run_round(t).unwrap();
        }
        let set = fed.fixed_set().unwrap().clone();
        for i in 0..arch.param_count() {
            if !set.contains(i) {
                assert_eq!(fed.global()[i], fed.w0()[i]);
            }
        }
    }
}

#[test]
fn no_reinit_schemes_only_touch_selected_coordinates() {
    let (arch, data) = setup(8);
    let mut fed = Federation::new(config(SchemeName::FlBasic, false), arch, &data).unwrap();
    let before = fed.global().clone();
    let report = fed.run_round(1).unwrap();
    for i in 0..before.len() {
        if !report.index_set.contains(i) {
            assert_eq!(fed.global()[i], before[i]);
        }
    }
    assert_eq!(report.message_len, fed.retained());
}

#[test]
fn full_ratio_top_k_matches_standard_with_equal_shards() {
    let (arch, data) = setup(8);
    let sizes = data.partition.sizes();
    assert!(sizes.iter().all(|&s| s == sizes[0]));
    let mut top = config(SchemeName::FlTop, false);
    top.ratio = 1.0;
    let a = run_experiment(top, arch.clone(), &data).unwrap();
    let b = run_experiment(config(SchemeName::FlStd, false), arch, &data).unwrap();
    let strip = |t: &[RoundMetrics]| -> Vec<(f64, f64)> {
        t.iter().map(|m| (m.accuracy, m.auroc)).collect()
    };
    assert_eq!(strip(&a.trace), strip(&b.trace));
}

#[test]
fn masked_aggregate_equals_plain_mean_of_private_updates() {
    let (arch, data) = setup(8);
    let mut c = config(SchemeName::FlTop, true);
    c.sensitivity = Sensitivity::Fixed(0.05);
    let fed = Federation::new(c, arch, &data).unwrap();
    let round = 1;
    let cohort = fed.sample_cohort(round);
    let set = fed.round_set(round).unwrap();
    let start = client::client_start(fed.global(), fed.w0(), &set, &fed.spec).unwrap();
    let updates: Vec<CompressedUpdate> = cohort
        .iter()
        .map(|&k| {
            client::local_update(
                fed.arch(),
                &fed.client_data(k),
                &start,
                fed.w0(),
                &set,
                &fed.spec,
                &fed.config.local,
                fed.train_seed(round, k),
            )
            .unwrap()
        })
        .collect();
    let m = cohort.len();
    let mut expect = vec![0.0; set.len()];
    for (u, &k) in updates.iter().zip(&cohort) {
        let clipped = privacy::clip(u, 0.05).unwrap();
        assert!(clipped.l2_norm() <= 0.05 + 1e-12);
        let noise_seed = seed::derive(fed.config.seeds.noise, &[round as u64, k as u64]);
        let noised = privacy::add_client_noise(&clipped, 0.05, 1.0, m, noise_seed).unwrap();
        for (e, v) in expect.iter_mut().zip(noised.values()) {
            *e += v / m as f64;
        }
    }
    let masked = fed.encrypt_updates(round, &cohort, updates).unwrap();
    let (agg, clamps) = fed.server_aggregate_masked(&masked).unwrap();
    assert_eq!(clamps, 0);
    // each client contributes at most half a unit in the last place
    let tol = m as f64 * 2f64.powi(-33) + 1e-12;
    for (a, e) in agg.iter().zip(&expect) {
        assert!((a - e).abs() <= tol, "{a} vs {e}");
    }
}

#[test]
fn dp_needs_a_finite_privacy_bound() {
    let (arch, data) = setup(8);
    let mut c = config(SchemeName::FlTop, true);
    c.sigma = 1e-9;
    assert!(Federation::new(c, arch, &data).is_err());
}

#[test]
fn bandwidth_and_privacy_columns() {
    let (arch, data) = setup(8);
    let n = arch.param_count();
    let r = run_experiment(config(SchemeName::FlTop, true), arch.clone(), &data).unwrap();
    let k = r.summary.as_ref().unwrap().k;
    let ratio = k as f64 / n as f64;
    let acc = MomentsAccountant::new(1.0, 0.5, 64).unwrap();
    for m in &r.trace {
        let expect = ratio * n as f64 * 32.0 * m.round as f64 * 0.5 / 8000.0;
        assert!((m.up_kb - expect).abs() < 1e-9);
        assert!((m.down_kb - expect).abs() < 1e-9);
        let eps = acc.epsilon(m.round as u64, 1e-5).unwrap().epsilon;
        assert_eq!(m.epsilon, Some(eps));
    }
    // per-round random sets force an uncompressed download
    let r = run_experiment(config(SchemeName::FlBasic, false), arch, &data).unwrap();
    let m = &r.trace[0];
    assert!((m.down_kb - n as f64 * 32.0 * 0.5 / 8000.0).abs() < 1e-9);
    assert!(m.epsilon.is_none());
}

#[test]
fn invalid_configs_are_rejected() {
    let (arch, data) = setup(8);
    let mut c = config(SchemeName::FlTop, true);
    c.sampling = 0.1;
    assert!(matches!(Federation::new(c, arch.clone(), &data), Err(Error::Config(_))));
    let mut c = config(SchemeName::FlTop, false);
    c.ratio = 0.0;
    assert!(matches!(Federation::new(c, arch.clone(), &data), Err(Error::Config(_))));
    let mut c = config(SchemeName::FlTop, false);
    c.num_clients = 4;
    assert!(Federation::new(c, arch, &data).is_err());
}

#[test]
fn sensitivity_parses_number_or_keyword() {
    let s: Sensitivity = serde_json::from_str("2.5").unwrap();
    assert_eq!(s, Sensitivity::Fixed(2.5));
    let s: Sensitivity = serde_json::from_str("\"calibrate\"").unwrap();
    assert_eq!(s, Sensitivity::Calibrate);
    assert!(serde_json::from_str::<Sensitivity>("\"auto\"").is_err());
}

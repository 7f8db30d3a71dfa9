use proptest::prelude::*;
use udama::baselines::BaselineKind;
use udama::bench::*;
use udama::netgraph::NetConfig;
use udama::synthcohort::ShiftSpec;
use udama::trainer::TrainConfig;

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.precision = Precision::F64;
    c.source_n = 60;
    c.target_n = 40;
    c.source.series_length_raw = 30;
    c.target.series_length_raw = 30;
    c.net = NetConfig { recurrent_units: 4, meta_hidden: 8, disc_hidden: 5, ..NetConfig::default() };
    c.train = TrainConfig { max_epochs: 3, patience: 2, batch_size: 8, ..TrainConfig::default() };
    c.pretrain_max_epochs = 3;
    c.seeds = vec![0, 1];
    c.folds = 2;
    c
}

#[test]
fn config_round_trips_with_stable_hash() {
    let mut c = tiny();
    c.shifts = vec![ShiftSpec { offset: -2.5, noise_std: 0.5 }];
    c.methods = vec![Method::Udama, Method::Baseline(BaselineKind::Wdgrl)];
    let text = c.to_kv();
    let back = ExperimentConfig::from_kv(&text).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.config_hash(), c.config_hash());
    assert_eq!(back.to_kv(), text);
    assert_ne!(ExperimentConfig::default().config_hash(), c.config_hash());
}

#[test]
fn output_location_does_not_change_the_hash() {
    let a = tiny();
    let mut b = tiny();
    b.out_dir = "elsewhere".into();
    b.record_wall_time = true;
    assert_eq!(a.config_hash(), b.config_hash());
}

#[test]
fn config_errors_name_the_key() {
    let err = ExperimentConfig::from_kv("folds = 2\nfolsd = 3\n").unwrap_err().to_string();
    assert!(err.contains("folsd"), "{err}");
    let err = ExperimentConfig::from_kv("split_train_frac = 1.5\n").unwrap_err().to_string();
    assert!(err.contains("split_train_frac"), "{err}");
    let err = ExperimentConfig::from_kv("seeds = \n").unwrap_err().to_string();
    assert!(err.contains("seeds"), "{err}");
    let err = ExperimentConfig::from_kv("methods = udama,dsn\n").unwrap_err().to_string();
    assert!(err.contains("dsn"), "{err}");
    let err = ExperimentConfig::from_kv("net.ts_features = 3\n").unwrap_err().to_string();
    assert!(err.contains("net.ts_features"), "{err}");
}

#[test]
fn every_default_key_is_documented() {
    let text = ExperimentConfig::default().to_kv();
    let mut documented = false;
    for line in text.lines() {
        if line.starts_with('#') {
            documented = true;
        } else if line.contains('=') {
            assert!(documented, "undocumented key: {line}");
        }
    }
}

#[test]
fn cv_emits_one_record_per_fold_and_seed() {
    let mut c = tiny();
    c.folds = 3;
    c.seeds = vec![4];
    let recs = run_cv(&c, Method::Baseline(BaselineKind::Transfer)).unwrap();
    assert_eq!(recs.len(), 3);
    assert_eq!(recs.iter().map(|r| r.fold).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(recs.iter().all(|r| r.config_hash == c.config_hash() && r.schema_version == SCHEMA_VERSION));
    assert!(recs.iter().all(|r| r.y_true.len() == 12 && r.y_pred.len() == 12));
}

#[test]
fn splits_are_disjoint_and_cover_the_target() {
    let h = Harness::<f64>::new(tiny()).unwrap();
    for seed in 0..4 {
        for fold in 0..3 {
            let (tr, te) = h.split(fold, seed);
            assert_eq!(tr.len(), 28);
            assert!(tr.iter().all(|i| !te.contains(i)));
            let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..40).collect::<Vec<_>>());
        }
    }
    assert_ne!(h.split(0, 0), h.split(1, 0));
}

#[test]
fn identical_config_gives_identical_record_bytes() {
    let c = tiny();
    let a = records_to_jsonl(&run_cv(&c, Method::Udama).unwrap()).unwrap();
    let b = records_to_jsonl(&run_cv(&c, Method::Udama).unwrap()).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    write_records(&path, &records_from_jsonl(&a).unwrap()).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), a);
}

#[test]
fn every_method_runs_through_the_harness() {
    let mut c = tiny();
    c.seeds = vec![0];
    c.folds = 1;
    let mut h = Harness::<f64>::new(c).unwrap();
    for m in std::iter::once(Method::Udama).chain(BaselineKind::ALL.map(Method::Baseline)) {
        let out = h.run(&RunSpec::new("cv", m, 0, 0, 0.5)).unwrap();
        let rec = out.record;
        assert_eq!(rec.method, m.to_string());
        assert!(rec.metrics.unwrap().mse.is_finite());
        let adversarial = matches!(m, Method::Udama | Method::Baseline(BaselineKind::Dann));
        assert_eq!(rec.injection_frac.is_some(), adversarial, "{m}");
    }
}

#[test]
fn schema_version_is_checked() {
    let mut c = tiny();
    c.seeds = vec![0];
    c.folds = 1;
    let recs = run_cv(&c, Method::Baseline(BaselineKind::OutOfDomainSupervised)).unwrap();
    let text = records_to_jsonl(&recs).unwrap().replace("\"schema_version\":1", "\"schema_version\":9");
    assert!(records_from_jsonl(&text).is_err());
}

#[test]
fn sweep_covers_the_grid_and_keeps_failed_cells() {
    let mut c = tiny();
    c.injection_ratios = vec![0.01, 0.05, 0.10, 0.30, 0.50, 1.00, 5.0];
    let recs = injection_sweep(&c).unwrap();
    assert_eq!(recs.len(), 7 * 2);
    // 28 target-train rows: 1% injects nothing, 5% injects one sample (too few
    // for domain moments), 500% exceeds the 60-sample source pool.
    for r in &recs {
        let frac = r.injection_frac.unwrap();
        let failed = r.error.is_some();
        assert_eq!(failed, frac == 0.05 || frac == 5.0, "{frac}: {:?}", r.error);
        let count = (frac * 28.0 + 0.5).floor();
        assert!((r.injection_source_frac.unwrap() - count / 60.0).abs() < 1e-12);
    }
    let table = sweep_table(&recs);
    for line in table.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols[4].is_empty() {
            continue;
        }
        let q: Vec<f64> = cols[6..11].iter().map(|v| v.parse().unwrap()).collect();
        assert!(q.windows(2).all(|w| w[0] <= w[1]), "{line}");
    }
    c.seeds = vec![0];
    assert!(injection_sweep(&c).is_err());
}

#[test]
fn ablation_pairs_three_variants() {
    let mut c = tiny();
    c.folds = 1;
    let recs = ablation(&c).unwrap();
    assert_eq!(recs.len(), 3 * 2);
    for pair in recs.chunks(3) {
        let names: Vec<&str> = pair.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(names, ["udama_coarse_only", "udama_fine_only", "udama"]);
        assert!(pair.iter().all(|r| r.y_true == pair[0].y_true && r.seed == pair[0].seed));
    }
    let mut h = Harness::<f64>::new(c.clone()).unwrap();
    let alpha = c.train.weights.alpha;
    let mut spec = RunSpec::new("ablation", Method::Udama, 0, 0, c.injection_frac);
    spec.weights = Some(udama::objectives::LossWeights { alpha, lambda1: 1.0, lambda2: 0.0 });
    assert!(h.run(&spec).unwrap().trace.epochs.iter().all(|e| e.l_gll.is_none()));
    spec.weights = Some(udama::objectives::LossWeights { alpha, lambda1: 0.0, lambda2: 1.0 });
    assert!(h.run(&spec).unwrap().trace.epochs.iter().all(|e| e.l_cse.is_none()));
}

#[test]
fn stress_records_kl_next_to_both_methods() {
    let mut c = tiny();
    c.seeds = vec![0];
    c.folds = 1;
    c.shifts = vec![NO_SHIFT, ShiftSpec { offset: 4.0, noise_std: 1.0 }];
    let recs = stress_test(&c).unwrap();
    assert_eq!(recs.len(), 4);
    let h = Harness::<f64>::new(c.clone()).unwrap();
    assert_eq!(recs[0].label_kl.unwrap(), h.label_kl(&NO_SHIFT).unwrap());
    assert_eq!(recs[0].method, "udama");
    assert_eq!(recs[1].method, "dann");
    let table = stress_table(&recs);
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().next().unwrap().contains("udama_corr_mean,udama_corr_std"));
    c.shifts.clear();
    assert!(stress_test(&c).is_err());
}

#[test]
fn label_kl_grows_with_the_offset() {
    let mut c = tiny();
    c.source_n = 2000;
    c.target_n = 200;
    let h = Harness::<f64>::new(c).unwrap();
    let kl = |o: f64| h.label_kl(&ShiftSpec { offset: o, noise_std: 1.0 }).unwrap();
    let (k0, k3, k6) = (kl(0.0), kl(3.0), kl(6.0));
    assert!(k0 < k3 && k3 < k6, "{k0} {k3} {k6}");
}

#[test]
fn test_labels_never_reach_training() {
    let mut c = tiny();
    c.seeds = vec![2];
    c.folds = 1;
    let mut clean = Harness::<f64>::new(c.clone()).unwrap();
    let mut poked = Harness::<f64>::new(c).unwrap();
    let (_, test) = poked.split(0, 2);
    for &i in &test {
        poked.target.y[i] += 100.0;
    }
    for m in [
        Method::Udama,
        Method::Baseline(BaselineKind::InDomainSupervised),
        Method::Baseline(BaselineKind::Transfer),
        Method::Baseline(BaselineKind::DeepCoral),
    ] {
        let spec = RunSpec::new("cv", m, 0, 2, 0.5);
        let a = clean.run(&spec).unwrap();
        let b = poked.run(&spec).unwrap();
        assert_eq!(a.params, b.params, "{m}");
        assert_ne!(a.record.metrics, b.record.metrics);
    }
}

fn fake(method: &str, corr: f64, mse: f64) -> RunRecord {
    RunRecord {
        schema_version: SCHEMA_VERSION,
        experiment: "cv".into(),
        method: method.into(),
        fold: 0,
        seed: 0,
        injection_frac: None,
        injection_source_frac: None,
        shift_offset: 0.0,
        shift_noise: 0.0,
        label_kl: None,
        metrics: Some(udama::objectives::MetricRecord { mse, mae: 1.0, r2: 0.5, corr: Some(corr), hellinger: 0.1, kl: 0.2 }),
        best_epoch: Some(1),
        stop_epoch: Some(2),
        config_hash: "h".into(),
        wall_time_s: None,
        error: None,
        y_true: vec![30.0, 35.0, 40.0],
        y_pred: vec![31.0, 34.0, 41.0],
    }
}

#[test]
fn single_record_has_zero_spread() {
    let t = method_table(&[fake("udama", 0.7, 4.0)]);
    let row: Vec<&str> = t.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "udama");
    assert_eq!(row[1], "1");
    assert_eq!(row[5], "0");
}

#[test]
fn aggregation_matches_hand_computation() {
    let recs = [fake("a", 0.6, 2.0), fake("a", 0.7, 4.0), fake("a", 0.8, 9.0)];
    let row: Vec<f64> = method_table(&recs).lines().nth(1).unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert!((row[3] - 0.7).abs() < 1e-12);
    assert!((row[4] - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
    assert!((row[5] - 5.0).abs() < 1e-12);
    assert!((row[6] - (26.0f64 / 3.0).sqrt()).abs() < 1e-12);
}

#[test]
fn report_is_a_pure_function_of_records() {
    let recs = vec![fake("udama", 0.7, 4.0), fake("transfer", 0.6, 5.0)];
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let f1 = make_report(&recs, d1.path()).unwrap();
    let f2 = make_report(&recs, d2.path()).unwrap();
    assert_eq!(f1.len(), 5);
    for (a, b) in f1.iter().zip(&f2) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
    let hist: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d1.path().join("histograms.json")).unwrap()).unwrap();
    assert_eq!(hist["bin_edges"].as_array().unwrap().len(), 21);
    assert_eq!(hist["methods"].as_array().unwrap().len(), 2);
    assert!(make_report(&[], d1.path()).is_err());
}

proptest! {
    #[test]
    fn quantiles_are_ordered(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let q: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&p| quantile(&v, p)).collect();
        prop_assert!(q.windows(2).all(|w| w[0] <= w[1]));
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        prop_assert_eq!(q[0], lo);
        prop_assert_eq!(q[4], hi);
    }

    #[test]
    fn spread_is_nonnegative_and_shift_invariant(v in prop::collection::vec(-1e3f64..1e3, 1..40), c in -100.0f64..100.0) {
        let (m, s) = mean_std(&v).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let (m2, s2) = mean_std(&shifted).unwrap();
        prop_assert!(s >= 0.0);
        prop_assert!((m2 - m - c).abs() < 1e-9);
        prop_assert!((s2 - s).abs() < 1e-8);
    }
}

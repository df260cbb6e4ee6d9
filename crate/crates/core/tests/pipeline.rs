use std::path::{Path, PathBuf};

use fairsam_core::corruption::{corrupt_dataset, CorruptionKind, CorruptionSpec};
use fairsam_core::datagen::{load_csv, save_csv};
use fairsam_core::harness::{
    emit_report, ood_eval, read_reports, render_report, run_experiment, split_for_seed, sweep_severity, train_seed,
    DataConfig, DataSource, ExperimentConfig, ReportFormat, SeedStatus, TABLE_CSV_HEADER,
};
use fairsam_core::optim::Method;
use fairsam_core::{Error, Group};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn small() -> ExperimentConfig {
    ExperimentConfig::load(&fixture("small.cfg")).unwrap()
}

#[test]
fn small_run_every_method() {
    let cfg = small();
    for m in Method::ALL {
        let report = run_experiment(&cfg.with_method(m)).unwrap();
        assert_eq!(report.method, m);
        assert_eq!(report.seeds.len(), 3);
        assert_eq!(report.aggregate.len(), 2);
        for s in &report.seeds {
            assert_eq!(s.status, SeedStatus::Completed, "{m:?}");
            assert_eq!(s.loss_trace.len(), 4);
            for c in &s.conditions {
                assert!(c.degradation.is_consistent(), "{m:?}");
            }
        }
    }
}

#[test]
fn reports_survive_json_round_trip() {
    let cfg = small();
    let report = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    emit_report(std::slice::from_ref(&report), ReportFormat::Json, &path).unwrap();
    let back = read_reports(&path).unwrap();
    assert_eq!(back.len(), 1);
    assert_eq!(back[0].to_json_without_clock().unwrap(), report.to_json_without_clock().unwrap());

    let csv = render_report(&back, ReportFormat::Csv).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(TABLE_CSV_HEADER));
    // one clean row plus one per corruption
    assert_eq!(lines.count(), 3);
}

#[test]
fn csv_rows_match_medians() {
    let report = run_experiment(&small()).unwrap();
    let csv = render_report(std::slice::from_ref(&report), ReportFormat::Csv).unwrap();
    let row: Vec<&str> = csv.lines().nth(2).unwrap().split(',').collect();
    let m = report.aggregate[0].median;
    let delta_p: f64 = row[8].parse().unwrap();
    assert!((delta_p - m.delta_p).abs() < 1e-4);
}

#[test]
fn sweep_has_one_row_per_method_severity_seed() {
    let sw = sweep_severity(&small(), &[1, 3]).unwrap();
    let csv = sw.to_csv();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 3);
    assert!(csv.starts_with("method,severity,seed,acc,delta_p,corruption\n"));
    for r in &sw.rows {
        assert!((0.0..=1.0).contains(&r.acc));
        assert!(r.delta_p >= 0.0);
    }
}

#[test]
fn generated_csv_trains_like_generated_data() {
    let cfg = small();
    let full = cfg.data.materialize(0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    save_csv(&full, &path).unwrap();
    let loaded = load_csv(&path).unwrap();
    assert_eq!(loaded.x().data(), full.x().data());

    let a = train_seed(&cfg, 0, Some(&full)).unwrap();
    let b = train_seed(&cfg, 0, Some(&loaded)).unwrap();
    assert_eq!(a.model.params().values(), b.model.params().values());
}

#[test]
fn split_helper_matches_training_split() {
    let cfg = small();
    let full = cfg.data.materialize(1).unwrap();
    let (_, test) = split_for_seed(&cfg, &full, 1).unwrap();
    let trained = train_seed(&cfg, 1, None).unwrap();
    assert_eq!(trained.test.x().data(), test.x().data());
}

#[test]
fn csv_fixture_config() {
    let cfg = ExperimentConfig::load(&fixture("tiny_csv.cfg")).unwrap();
    assert_eq!(cfg.data.path.as_deref(), Some(fixture("tiny.csv").as_path()));
    let ds = cfg.data.materialize(0).unwrap();
    assert_eq!(ds.len(), 20);
    assert_eq!(ds.count(Group::Disadvantaged), 8);
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.seeds[0].test_size, 10);
}

#[test]
fn corrupted_files_stay_in_unit_box() {
    let ds = load_csv(&fixture("tiny.csv")).unwrap();
    for kind in [CorruptionKind::GaussianNoise, CorruptionKind::ImpulseNoise, CorruptionKind::Blur] {
        let c = corrupt_dataset(&ds, &CorruptionSpec::new(kind, 5, 1).unwrap()).unwrap();
        assert_eq!(c.y(), ds.y());
        assert_eq!(c.groups(), ds.groups());
        assert!(c.x().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn shifted_ood_set_degrades() {
    let mut cfg = small().with_method(Method::Vanilla);
    cfg.train.epochs = 40;
    let mut params = cfg.data.synthetic.unwrap();
    // move s⁻ along the class axis; s⁺ keeps its distribution
    params.shift = 0.3;
    cfg.ood = Some(DataConfig {
        source: DataSource::Synthetic,
        n: Some(400),
        seed: Some(99),
        synthetic: Some(params),
        path: None,
    });
    let ood = cfg.ood.as_ref().unwrap().materialize(0).unwrap();
    let report = ood_eval(&cfg, &ood).unwrap();
    let m = report.median.unwrap();
    assert!(m.acc_corrupted.overall < m.acc_clean.overall);
    assert!(m.delta_p_minus > m.delta_p_plus + 0.05, "{m:?}");
    for s in &report.seeds {
        assert!(s.degradation.unwrap().is_consistent());
    }
}

#[test]
fn bad_configs_are_rejected() {
    let base = std::fs::read_to_string(fixture("small.cfg")).unwrap();
    let unknown = base.replace("epochs = 4", "epochs = 4\nepoch = 4");
    assert!(matches!(ExperimentConfig::from_toml_str(&unknown), Err(Error::ConfigParse(_))));
    let sev = base.replace("severity = 2", "severity = 6");
    assert!(ExperimentConfig::from_toml_str(&sev).is_err());
    let beta = base.replace("rho = 0.05", "rho = 0.05\nbeta = 1.0");
    assert!(matches!(ExperimentConfig::from_toml_str(&beta), Err(Error::InvalidConfig(_))));
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use satinfer::orchestrator::ScenarioConfig;

fn satinfer(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_satinfer"))
        .args(args)
        .arg("--output-dir")
        .arg(out)
        .env_remove("SATINFER_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toml(cfg: &ScenarioConfig) -> String {
    cfg.to_toml_string().unwrap()
}

fn bundled_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = ScenarioConfig::default();
    cfg.samples.count = 40;
    cfg.samples.image_height = 128;
    cfg.samples.image_width = 128;
    cfg.run.training_samples = 60;
    cfg.training.epochs = 10;
    let path = dir.join("small.toml");
    fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    path
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-scenario.toml");
    let o = satinfer(&["run", "--config", missing.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no-such-scenario.toml"), "{}", stderr(&o));
}

#[test]
fn misspelled_field_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("typo.toml");
    fs::write(&path, "[confidence]\nthreshold = [0.5, 0.4]\n").unwrap();
    let o = satinfer(&["run", "-c", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("threshold"), "{}", stderr(&o));

    fs::write(&path, "[preprocess]\nalpha = 0.9\nbeta = 0.1\n").unwrap();
    let o = satinfer(&["run", "-c", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("preprocess.alpha"), "{}", stderr(&o));
}

#[test]
fn bundled_config_is_the_default() {
    let cfg = ScenarioConfig::load(&bundled_config()).unwrap();
    assert_eq!(toml(&cfg), toml(&ScenarioConfig::default()));
}

#[test]
fn default_scenario_runs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = satinfer(&["run", "-q"], out);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["samples"], 1000);
    assert_eq!(metrics["version"], 1);
    let traces = fs::read(a.join("traces.csv")).unwrap();
    assert_eq!(traces, fs::read(b.join("traces.csv")).unwrap());
    let resolved = ScenarioConfig::load(&a.join("resolved_config.toml")).unwrap();
    assert_eq!(toml(&resolved), toml(&ScenarioConfig::default()));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let first = dir.path().join("first");
    let o = satinfer(&["run", "-q", "-c", cfg.to_str().unwrap(), "--seed", "99"], &first);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let resolved = first.join("resolved_config.toml");
    assert_eq!(ScenarioConfig::load(&resolved).unwrap().samples.seed, 99);

    let second = dir.path().join("second");
    let o = satinfer(&["run", "-q", "-c", resolved.to_str().unwrap()], &second);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["traces.csv", "metrics.json", "resolved_config.toml"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn trained_network_is_reused_by_later_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let trained = dir.path().join("trained");
    let o = satinfer(&["train-confidence", "-q", "-c", cfg.to_str().unwrap()], &trained);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(fs::read(trained.join("confidence.pcn")).unwrap().starts_with(b"PCN1"));
    let resolved = trained.join("resolved_config.toml");
    assert!(ScenarioConfig::load(&resolved).unwrap().run.net_path.is_some());

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(satinfer(&["run", "-q", "-c", cfg.to_str().unwrap()], &a).status.code(), Some(0));
    assert_eq!(satinfer(&["run", "-q", "-c", resolved.to_str().unwrap()], &b).status.code(), Some(0));
    assert_eq!(fs::read(a.join("traces.csv")).unwrap(), fs::read(b.join("traces.csv")).unwrap());
}

#[test]
fn horizon_only_runs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ScenarioConfig {
        policy: satinfer::orchestrator::Policy::GroundOnly,
        ..ScenarioConfig::default()
    };
    cfg.samples.count = 5;
    cfg.samples.image_height = 64;
    cfg.samples.image_width = 64;
    cfg.constellation.horizon_s = 60.0;
    cfg.constellation.set_mask(80.0);
    let path = dir.path().join("short.toml");
    fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    let o = satinfer(&["run", "-q", "-c", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["incomplete"], 5);
}

#[test]
fn calibration_to_zero_reports_the_upper_bound() {
    let dir = tempfile::tempdir().unwrap();
    let o = satinfer(&["calibrate-mask", "--target", "0"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("89"));
    let cfg = ScenarioConfig::load(&dir.path().join("resolved_config.toml")).unwrap();
    assert_eq!(cfg.constellation.ground_stations[0].site.min_elevation_deg, 89.0);
}

#[test]
fn calibration_to_full_contact_is_unreachable() {
    let dir = tempfile::tempdir().unwrap();
    let o = satinfer(&["calibrate-mask", "--target", "1"], dir.path());
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("achievable range"), "{}", stderr(&o));
}

#[test]
fn calibrated_mask_reproduces_the_target() {
    let dir = tempfile::tempdir().unwrap();
    let o = satinfer(&["calibrate-mask", "--target", "0.0433"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cfg = ScenarioConfig::load(&dir.path().join("resolved_config.toml")).unwrap();
    let mask = cfg.constellation.ground_stations[0].site.min_elevation_deg;
    assert!(mask > 0.0 && mask < 89.0);
    let fraction = cfg.constellation.mean_contact_fraction().unwrap();
    assert!((fraction - 0.0433).abs() <= 0.0005, "{fraction}");
}

#[test]
fn experiment_subcommands_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let c = cfg.to_str().unwrap();

    let o = satinfer(&["sweep", "-q", "-c", c, "--fractions", "0,0.5,1"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let sweep = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().next(), Some("fraction,offloaded,confidence_simi,random_simi"));
    assert_eq!(sweep.lines().count(), 4);

    let o = satinfer(&["mask-experiment", "-q", "-c", c, "--fractions", "0,0.8", "--samples", "10"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("masking.csv")).unwrap().lines().count(), 7);

    let o = satinfer(&["contact-report", "-q", "-c", c], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("contact_report.json")).unwrap()).unwrap();
    assert_eq!(report["pairs"].as_array().unwrap().len(), 10);
    assert!(fs::read_to_string(dir.path().join("contacts.csv")).unwrap().starts_with("satellite,ground_station"));

    let o = satinfer(&["sweep", "-q", "-c", c, "--fractions", "2"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn output_dir_defaults_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_satinfer"))
        .args(["calibrate-mask", "-q", "--target", "0"])
        .env("SATINFER_OUTPUT_DIR", dir.path().join("env-out"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("env-out/resolved_config.toml").exists());
}

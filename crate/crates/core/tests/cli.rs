mod common;

use std::process::Command;

use activebed::experiment::Scenario;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_activebed"))
}

#[test]
fn emits_a_loadable_default_config() {
    let out = bin().args(["emit-default-config", "--scenario", "structural"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = activebed::experiment::CampaignConfig::from_json(&text).unwrap();
    assert_eq!(cfg.scenario, Scenario::Structural);
}

#[test]
fn config_problems_exit_with_2() {
    let out = bin().args(["emit-default-config", "--scenario", "nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"scenario\": \"parametric\"}").unwrap();
    let out = bin().args(["run", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin().args(["run", "--config"]).arg(dir.path().join("missing.json")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runs_a_small_campaign_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, common::tiny(Scenario::Parametric).to_json()).unwrap();
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["run", "--stages", "2", "--mode", "predictive", "--seed", "11", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stages"], 2);
    assert_eq!(manifest["master_seed"], 11);
    assert_eq!(manifest["mode"], "predictive");
}

#[test]
fn gradient_validation_passes() {
    let out = bin()
        .args(["validate-gradients", "--scenario", "parametric", "--draws", "3"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

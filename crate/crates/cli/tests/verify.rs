use std::process::Command;

use hdro_cli::checks::{gradient_check, model_latent_grad, run_verify, sign_flipped_latent_grad, VerifyLevel};
use hdro_cli::commands::cmd_verify;

#[test]
fn fast_suite_passes_and_is_written() {
    let tmp = tempfile::tempdir().unwrap();
    let report = cmd_verify(VerifyLevel::Fast, model_latent_grad, tmp.path()).unwrap();
    for c in &report.checks {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
    assert!(report.ensure_passed().is_ok());
    assert!(tmp.path().join("verify.json").is_file());
}

#[test]
fn flipped_latent_gradient_is_caught() {
    let c = gradient_check(20, 9, sign_flipped_latent_grad);
    assert!(!c.passed, "{}", c.detail);
    let report = run_verify(VerifyLevel::Fast, sign_flipped_latent_grad);
    assert!(!report.passed);
    assert_eq!(report.ensure_passed().unwrap_err().exit_code(), 2);
}

#[test]
fn injected_fault_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hdro"))
        .args(["verify", "--inject-fault", "sign-flip", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("[FAIL] gradients"));
}

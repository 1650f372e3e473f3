use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use morphflow_cli::manifest::verify_stage_dir;
use morphflow_cli::{Pipeline, PipelineConfig, Stage};

fn morphflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphflow")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// A config small enough to run every stage in a few seconds.
fn small_config(dir: &Path) -> PathBuf {
    let text = format!(
        r#"
seed = 5
[paths]
stage_dir = "{}"
[synth]
vertices = 200
bank_subjects = 6
bank_vertices = 300
targets = 3
au_train = 24
au_test = 8
[transfer]
kappa = 3
[flow]
hidden = [16, 16]
layers = 4
[flow.train]
epochs = 10
[fit]
max_iterations = 30
"#,
        dir.join("stages").display()
    );
    let p = dir.join("small.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn help_and_version_exit_zero() {
    for flag in ["--help", "--version"] {
        let o = morphflow(&[flag]);
        assert_eq!(o.status.code(), Some(0), "{flag}");
        assert!(!o.stdout.is_empty());
    }
}

#[test]
fn usage_errors_exit_one() {
    let o = morphflow(&["no-such-stage"]);
    assert_eq!(o.status.code(), Some(1));
    let o = morphflow(&["--seed", "abc", "synth"]);
    assert_eq!(o.status.code(), Some(1));
    let o = morphflow(&["--config", "/nonexistent/morphflow.toml", "synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/morphflow.toml"), "{}", stderr(&o));
}

#[test]
fn bad_config_lists_every_problem_and_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "[synth]\nn_id = 0\n[transfer]\nkappa = 0\n[latent]\ninterpolation_step = 0.3\n").unwrap();
    let o = morphflow(&["--config", p.to_str().unwrap(), "synth"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for section in ["[synth]", "[transfer]", "[latent]"] {
        assert!(err.contains(section), "missing {section} in {err}");
    }

    fs::write(&p, "[synth]\nn_idd = 3\n").unwrap();
    let o = morphflow(&["--config", p.to_str().unwrap(), "synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("n_idd"), "{}", stderr(&o));
}

#[test]
fn stage_out_of_order_names_its_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    let o = morphflow(&["--stage-dir", dir.path().to_str().unwrap(), "fit"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("missing model artifact"), "{err}");
    assert!(err.contains("morphflow hosvd"), "{err}");
    assert!(!dir.path().join(".fit.partial").exists());
    assert!(!dir.path().join("fit").exists());
}

#[test]
fn shipped_configs_are_valid() {
    for name in ["desk.toml", "full.toml"] {
        let c = PipelineConfig::load(&configs_dir().join(name)).unwrap();
        Pipeline::new(c).unwrap();
    }
    let desk = PipelineConfig::load(&configs_dir().join("desk.toml")).unwrap();
    assert_eq!(desk, PipelineConfig::default());
}

#[test]
fn stage_by_stage_run_reports_every_target() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    for stage in Stage::ALL {
        let o = morphflow(&["--config", cfg, stage.name()]);
        assert_eq!(o.status.code(), Some(0), "{}: {}", stage.name(), stderr(&o));
    }
    let stages = dir.path().join("stages");
    let summary = fs::read_to_string(stages.join("report/summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 3 + 1);
    assert!(rows.last().unwrap().starts_with("all,"));
    assert_eq!(verify_stage_dir(&stages).unwrap(), Stage::ALL.len());

    // Rerunning an upstream stage with a new seed invalidates downstream records.
    let o = morphflow(&["--config", cfg, "--seed", "6", "synth"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let err = verify_stage_dir(&stages).unwrap_err().to_string();
    assert!(err.contains("changed since it was recorded"), "{err}");
}

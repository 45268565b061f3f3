use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
name = "cli"
seed = 2

[corpus]
size = 120

[splits]
member = 12
shadow = 12

[target]
epochs = 4

[shadow]
epochs = 4

[mfe]
epochs = 2

[attack]
mlp_epochs = 5

[eval]
tsne = false
"#;

fn mmi(args: &[&str], runs: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmi"))
        .args(args)
        .env("MMI_RUNS_DIR", runs)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_lists_every_flag_and_subcommand() {
    let tmp = tempfile::tempdir().unwrap();
    let top = stdout(&mmi(&["--help"], tmp.path()));
    for sub in ["run", "gen-data", "train-target", "train-shadow", "train-mfe", "attack-mb", "attack-fb", "evaluate", "report", "scenario"] {
        assert!(top.contains(sub), "{sub} missing from\n{top}");
    }
    let run = stdout(&mmi(&["run", "--help"], tmp.path()));
    for flag in ["--config", "--out", "--seed", "--stage", "--scenario", "--name", "--fresh"] {
        assert!(run.contains(flag), "{flag} missing from\n{run}");
    }
    let stage = stdout(&mmi(&["attack-mb", "--help"], tmp.path()));
    for flag in ["--config", "--out", "--seed"] {
        assert!(stage.contains(flag), "{flag} missing from\n{stage}");
    }
}

#[test]
fn scenario_command_classifies_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mmi(&["scenario", "CRFV"], tmp.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "shadow=CR target=FV class=constrained");
    let o = mmi(&["scenario", "FVFR"], tmp.path());
    assert!(stdout(&o).contains("class=data-only"));
    let o = mmi(&["scenario", "FXFR"], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("position 2"), "{}", stderr(&o));
}

#[test]
fn missing_artifact_fails_with_stage_name() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let o = mmi(&["attack-mb", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("stage `attack-mb` failed") && err.contains("missing upstream artifact"), "{err}");
}

#[test]
fn stages_compose_to_run_and_honor_runs_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    for sub in ["gen-data", "train-target", "train-shadow", "train-mfe", "attack-mb", "attack-fb", "evaluate", "report"] {
        let o = mmi(&[sub, "--config", cfg], tmp.path());
        assert!(o.status.success(), "{sub}: {}", stderr(&o));
    }
    let staged = tmp.path().join("cli");
    assert!(staged.join("reports/mb/summary.txt").exists());
    assert!(staged.join("reports/fb/predictions.csv").exists());

    let out = tmp.path().join("elsewhere");
    let o = mmi(&["run", "--config", cfg, "--out", out.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("FRFR mb: accuracy"));
    for f in ["reports/mb/predictions.csv", "reports/fb/predictions.csv"] {
        assert_eq!(fs::read(staged.join(f)).unwrap(), fs::read(out.join("cli").join(f)).unwrap(), "{f}");
    }

    let o = mmi(&["run", "--config", cfg, "--out", out.to_str().unwrap(), "--seed", "3", "--name", "other"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("other/reports/fb/summary.txt").exists());
    let shown = stdout(&mmi(&["show-config", "--config", cfg, "--seed", "9"], tmp.path()));
    assert!(shown.contains("seed = 9"), "{shown}");
}

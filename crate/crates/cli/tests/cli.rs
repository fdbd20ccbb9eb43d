use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
hidden_dim = 32
batch_size = 4
phase1_iters = 6
phase2_iters = 6
ddim_iters = 6
teacher_warmup_iters = 4
train_pairs = 8
heldout_pairs = 4
eval_samples = 16
log_every = 2
image_size = 8
";

fn kdflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdflow"))
        .args(args)
        .current_dir(dir)
        .env_remove("RESTORECT_SEED")
        .output()
        .expect("spawn kdflow")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn check_passes_and_writes_report() {
    let d = tempfile::tempdir().unwrap();
    let o = kdflow(d.path(), &["check", "--out", "r"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = std::fs::read_to_string(d.path().join("r/check_report.json")).unwrap();
    assert!(report.contains("\"failed\": 0"));
    assert!(report.contains("grad.op.matmul"));
    assert!(stdout(&o).starts_with("checks: "));
}

#[test]
fn grad_check_reports_only_gradients_as_csv() {
    let d = tempfile::tempdir().unwrap();
    let o = kdflow(d.path(), &["grad-check", "--out", "g", "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(d.path().join("g/grad_check_report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("name,kind,pass,metric,detail"));
    assert!(lines.all(|l| l.starts_with("grad.") && l.contains(",gradient,true,")));
}

#[test]
fn demo_hvi_without_arguments() {
    let d = tempfile::tempdir().unwrap();
    let o = kdflow(d.path(), &["demo-hvi"]);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(d.path().join("kdflow-out/hvi_sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "hue,h_polar,v_polar,i_polar");
    assert_eq!(rows.len(), 1 + 360 + 2);
    let coords = |l: &str| l.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>();
    let (a, b) = (coords(rows[rows.len() - 2]), coords(rows[rows.len() - 1]));
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-2));
}

#[test]
fn demo_diffusion_respects_steps_and_format() {
    let d = tempfile::tempdir().unwrap();
    let o = kdflow(d.path(), &["demo-diffusion", "--steps", "5", "--format", "json", "--out", "x"]);
    assert_eq!(o.status.code(), Some(0));
    let json = std::fs::read_to_string(d.path().join("x/diffusion.json")).unwrap();
    assert_eq!(json.matches("\"iteration\"").count(), 6);
    let bad = kdflow(d.path(), &["demo-diffusion", "--steps", "5,6"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    let o = kdflow(d.path(), &["check", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    for cmd in ["train-phase1", "train-phase2", "distill"] {
        let o = kdflow(d.path(), &[cmd]);
        assert_eq!(o.status.code(), Some(2), "{cmd}");
        assert!(stderr(&o).contains("--config"), "{cmd}: {}", stderr(&o));
    }
    assert_eq!(kdflow(d.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(kdflow(d.path(), &["demo-hvi", "--format", "xml"]).status.code(), Some(2));
}

#[test]
fn help_lists_every_flag() {
    let d = tempfile::tempdir().unwrap();
    for cmd in ["check", "train-phase1", "train-phase2", "distill", "compare-samplers", "demo-hvi", "demo-diffusion", "grad-check"] {
        let o = kdflow(d.path(), &[cmd, "--help"]);
        assert_eq!(o.status.code(), Some(0));
        let h = stdout(&o);
        for flag in ["--config", "--seed", "--out", "--steps", "--format", "--timing"] {
            assert!(h.contains(flag), "{cmd} help lacks {flag}");
        }
    }
}

#[test]
fn compare_samplers_emits_two_rows_per_step() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let o = kdflow(d.path(), &["compare-samplers", "--config", &cfg, "--steps", "1,2,3,4,5", "--out", "s"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.path().join("s/samplers.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "sampler,steps,frechet,mse,wall_ms");
    assert_eq!(rows.len(), 11);
    assert_eq!(rows.iter().filter(|r| r.starts_with("rf,")).count(), 5);
    assert_eq!(rows.iter().filter(|r| r.starts_with("ddim,")).count(), 5);
}

#[test]
fn phases_run_separately_and_distill_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let o = kdflow(d.path(), &["train-phase2", "--config", &cfg, "--out", "p"]);
    assert_eq!(o.status.code(), Some(1), "phase 2 needs phase-1 checkpoints");

    let o = kdflow(d.path(), &["train-phase1", "--config", &cfg, "--out", "p"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("phase1: 6 iterations"));
    assert!(d.path().join("p/checkpoints/phase1/rex").is_dir());
    let o = kdflow(d.path(), &["train-phase2", "--config", &cfg, "--out", "p"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("phase2: 6 iterations"));
    assert!(d.path().join("p/checkpoints/student").is_dir());

    let a = kdflow(d.path(), &["distill", "--config", &cfg, "--out", "a"]);
    let b = kdflow(d.path(), &["distill", "--config", &cfg, "--out", "b"]);
    assert_eq!((a.status.code(), b.status.code()), (Some(0), Some(0)));
    assert_eq!(stdout(&a).lines().count(), 2);
    let read = |p: &str| std::fs::read(d.path().join(p)).unwrap();
    assert_eq!(read("a/metrics.csv"), read("b/metrics.csv"));
    let c = kdflow(d.path(), &["distill", "--config", &cfg, "--out", "c", "--seed", "7"]);
    assert_eq!(c.status.code(), Some(0));
    assert_ne!(read("a/metrics.csv"), read("c/metrics.csv"));
}

#[test]
fn seed_flag_beats_environment() {
    let d = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, args: &[&str]| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_kdflow"));
        c.args(args).current_dir(d.path()).env_remove("RESTORECT_SEED");
        if let Some(v) = env {
            c.env("RESTORECT_SEED", v);
        }
        let o = c.output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        std::fs::read(d.path().join(args[2]).join("diffusion.csv")).unwrap()
    };
    let base = run(None, &["demo-diffusion", "--out", "e0", "--seed", "5"]);
    let env_only = run(Some("5"), &["demo-diffusion", "--out", "e1"]);
    let both = run(Some("9"), &["demo-diffusion", "--out", "e2", "--seed", "5"]);
    let other = run(Some("9"), &["demo-diffusion", "--out", "e3"]);
    assert_eq!(base, env_only);
    assert_eq!(base, both);
    assert_ne!(base, other);
    let mut c = Command::new(env!("CARGO_BIN_EXE_kdflow"));
    let o = c.args(["demo-diffusion", "--out", "e4"]).current_dir(d.path()).env("RESTORECT_SEED", "abc").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

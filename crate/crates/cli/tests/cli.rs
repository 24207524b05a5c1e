use std::path::Path;
use std::process::{Command, Output};

fn ldd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "\
env.n_classes=4
env.holdout_fraction=0.25
demos.count=12
pretrain.epochs=1
pretrain.max_batches_per_epoch=2
vae.epochs=1
vae.max_batches_per_epoch=2
rl.total_frames=64
rl.n_actors=2
rl.unroll=8
rl.eval_every=32
rl.eval_episodes=4
";

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&ldd(&[])), 1);
    assert_eq!(code(&ldd(&["frobnicate"])), 1);
    assert_eq!(code(&ldd(&["eval", "--split", "sideways"])), 1);
    assert_eq!(code(&ldd(&["--help"])), 0);
}

#[test]
fn config_problems_exit_two_with_lines() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.txt", "rl.gamma=0.9\nrl.alpha_x=1\nbogus=2\n");
    let o = ldd(&["train", "-c", &bad]);
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    assert!(e.contains("rl.alpha_x (line 2)") && e.contains("bogus (line 3)"), "{e}");

    let typed = write(dir.path(), "typed.txt", "# c\n\nrl.alpha_d=abc\n");
    let o = ldd(&["train", "-c", &typed]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    // ldd needs a teacher and none is configured
    let ok = write(dir.path(), "ok.txt", &format!("{TINY}paths.out_dir={}\n", dir.path().join("o").display()));
    let o = ldd(&["train", "-c", &ok]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("paths.teacher"), "{}", stderr(&o));
}

#[test]
fn missing_artifacts_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt").display().to_string();
    let o = ldd(&["eval", "--checkpoint", &missing]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let demos = d.join("demos.lddm").display().to_string();
    let teacher = d.join("teacher.ckpt").display().to_string();
    let cfg = write(
        d,
        "cfg.txt",
        &format!("{TINY}paths.demos={demos}\npaths.teacher={teacher}\npaths.out_dir={}\n", d.join("run").display()),
    );

    let o = ldd(&["gen-demos", "-c", &cfg, "-o", &demos, "--vocab", &d.join("vocab.tsv").display().to_string()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("12 expert demonstrations"));
    assert!(d.join("vocab.tsv").exists());

    let o = ldd(&["pretrain", "-c", &cfg, "-o", &teacher]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(d.join("teacher.csv").exists());

    let o = ldd(&["train", "-c", &cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = d.join("run/metrics.csv");
    let text = std::fs::read_to_string(&metrics).unwrap();
    assert!(text.starts_with("frames,episodes,variant,seed,"));
    assert_eq!(text.lines().count(), 1 + 3);

    let ckpt = d.join("run/final.ckpt").display().to_string();
    let a = ldd(&["eval", "-c", &cfg, "--checkpoint", &ckpt, "--split", "eval", "--episodes", "20"]);
    let b = ldd(&["eval", "-c", &cfg, "--checkpoint", &ckpt, "--split", "eval", "--episodes", "20"]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).starts_with("win_rate "));
    // a teacher checkpoint is a valid policy (zero heads)
    assert_eq!(code(&ldd(&["eval", "-c", &cfg, "--checkpoint", &teacher, "--episodes", "3"])), 0);

    let svg = d.join("curves.svg");
    let o = ldd(&["plot", "-o", &svg.display().to_string(), &metrics.display().to_string()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(std::fs::read_to_string(&svg).unwrap().contains("class=\"mean\""));
    let o = ldd(&["plot", "-o", &svg.display().to_string(), &cfg]);
    assert_eq!(code(&o), 3);
}

#[test]
fn matrix_fans_out_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    let cfg = write(
        dir.path(),
        "m.txt",
        &format!("{TINY}matrix.variants=ldd,scratch\nmatrix.seeds=0,1,2\npaths.out_dir={}\n", out.display()),
    );
    let o = ldd(&["matrix", "-c", &cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("ran")).count(), 6);
    let runs: Vec<_> = std::fs::read_dir(out.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 6);
    for r in &runs {
        assert!(r.join("manifest.json").exists() && r.join("metrics.csv").exists());
    }
    let o = ldd(&["matrix", "-c", &cfg]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("skipped")).count(), 6);
}

#[test]
fn alpha_d_sweep_runs_one_matrix_per_weight() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let cfg = write(
        dir.path(),
        "s.txt",
        &format!("{TINY}matrix.variants=ldd\nmatrix.seeds=0\npaths.out_dir={}\n", out.display()),
    );
    let o = ldd(&["matrix", "-c", &cfg, "--alpha-d-sweep", "0.1,1,10"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for v in ["0.1", "1", "10"] {
        let m = out.join(format!("alpha_d-{v}/runs/ldd-expert-full-s0/manifest.json"));
        let text = std::fs::read_to_string(&m).unwrap();
        assert!(text.contains(&format!("rl.alpha_d={v}")), "{v}");
    }
}

#[test]
fn grad_check_passes() {
    let o = ldd(&["grad-check", "--configs", "2"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("ok")));
    assert!(stdout(&o).contains("joint_loss"));
}

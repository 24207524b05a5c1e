use proptest::prelude::*;

use super::config::*;
use super::matrix::*;
use super::oracle::{check_loss, LossKind, TOLERANCE};
use super::plot::*;
use super::*;
use crate::rl::{Variant, METRICS_HEADER};

#[test]
fn empty_file_gives_defaults() {
    let c = ExperimentConfig::parse("").unwrap();
    assert_eq!(c, ExperimentConfig::default());
    assert_eq!(c.rl.gamma, 0.99);
    assert_eq!(c.rl.weights.alpha_v, 0.5);
    assert_eq!(c.rl.weights.beta_h, 0.05);
    assert_eq!(c.rl.optimizer.lr, 1e-4);
    assert_eq!(c.rl.optimizer.beta1, 0.99);
    assert_eq!(c.rl.optimizer.beta2, 0.999);
    assert_eq!(c.rl.optimizer.eps, 1e-6);
}

#[test]
fn type_error_names_its_line() {
    let e = ExperimentConfig::parse("# comment\nrl.gamma=0.9\nrl.alpha_d=abc\n").unwrap_err();
    match e {
        ConfigError::Type { line, key, .. } => {
            assert_eq!(line, 3);
            assert_eq!(key, "rl.alpha_d");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn unknown_keys_are_all_listed() {
    let e = ExperimentConfig::parse("rl.alpha_x=1\nrl.gamma=0.9\nfoo=2\n").unwrap_err();
    assert_eq!(e, ConfigError::Unknown(vec![(1, "rl.alpha_x".into()), (3, "foo".into())]));
    let msg = e.to_string();
    assert!(msg.contains("rl.alpha_x (line 1)") && msg.contains("foo (line 3)"), "{msg}");
}

#[test]
fn syntax_duplicate_and_range_errors() {
    assert!(matches!(ExperimentConfig::parse("rl.gamma 0.9"), Err(ConfigError::Syntax { line: 1, .. })));
    assert!(matches!(
        ExperimentConfig::parse("rl.gamma=0.9\nrl.gamma=0.8"),
        Err(ConfigError::Duplicate { line: 2, first: 1, .. })
    ));
    assert!(matches!(
        ExperimentConfig::parse("\nrl.gamma=1.5"),
        Err(ConfigError::Invalid { line: 2, .. })
    ));
    assert!(matches!(ExperimentConfig::parse("rl.lr=nan"), Err(ConfigError::Type { .. })));
}

#[test]
fn sections_prefix_keys() {
    let a = ExperimentConfig::parse("[rl]\nalpha_d = 0.25\nvariant = scratch\n[env]\nlanguage=no_message").unwrap();
    let b = ExperimentConfig::parse("rl.alpha_d=0.25\nrl.variant=scratch\nenv.language=no_message").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rl.variant, Variant::Scratch);
    assert_eq!(a.env.language, Language::NoMessage);
}

#[test]
fn rmsprop_picks_its_own_defaults() {
    let c = ExperimentConfig::parse("rl.optimizer=rmsprop").unwrap();
    assert_eq!(c.rl.optimizer.lr, 5e-4);
    assert_eq!(c.rl.optimizer.eps, 0.01);
    assert_eq!(c.rl.optimizer.alpha, 0.99);
    let c = ExperimentConfig::parse("rl.optimizer=rmsprop\nrl.lr=1e-3").unwrap();
    assert_eq!(c.rl.optimizer.lr, 1e-3);
}

#[test]
fn missing_path_is_reported() {
    let c = ExperimentConfig::default();
    assert_eq!(
        c.require_path("paths.teacher"),
        Err(ConfigError::Missing {
            key: "paths.teacher".into()
        })
    );
    let c = ExperimentConfig::parse("paths.teacher=/tmp/t.ckpt").unwrap();
    assert_eq!(c.require_path("paths.teacher").unwrap(), "/tmp/t.ckpt");
}

#[test]
fn defaults_round_trip() {
    let c = ExperimentConfig::default();
    let text = c.to_text();
    assert_eq!(ExperimentConfig::parse(&text).unwrap(), c);
    assert_eq!(text.lines().filter(|l| l.contains('=')).count(), ExperimentConfig::keys().len());
}

fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        0.01f64..0.99,
        0u64..1_000_000,
        prop::sample::select(Variant::ALL.to_vec()),
        prop::collection::vec(0u64..100, 1..5),
        prop::option::of(1u64..100_000),
        1e-6f64..1.0,
        prop::bool::ANY,
        "[a-z/]{1,12}",
    )
        .prop_map(|(g, frames, v, seeds, ck, lr, rms, path)| {
            let mut c = ExperimentConfig::default();
            c.rl.gamma = g;
            c.rl.total_frames = frames;
            c.rl.variant = v;
            c.matrix.seeds = seeds;
            c.rl.checkpoint_every = ck;
            c.rl.optimizer.lr = lr;
            if rms {
                c.rl.optimizer.kind = crate::numerics::OptimizerKind::Rmsprop;
            }
            c.paths.out_dir = Some(path);
            c
        })
}

proptest! {
    #[test]
    fn serialized_configs_reparse_equal(c in arb_config()) {
        let again = ExperimentConfig::parse(&c.to_text()).unwrap();
        prop_assert_eq!(&again, &c);
        prop_assert_eq!(again.to_text(), c.to_text());
    }
}

#[test]
fn train_config_respects_variant_rules() {
    let c = ExperimentConfig::default();
    for v in Variant::ALL {
        let t = c.train_config(v, 3, Language::Full);
        t.validate().unwrap();
        assert_eq!(t.shaping_lambda.is_some(), v == Variant::RewardShaping);
        assert_eq!(t.inverse.is_some(), v == Variant::Inverse);
    }
}

#[test]
fn matrix_fan_out() {
    let c = ExperimentConfig::parse("matrix.variants=ldd,scratch\nmatrix.seeds=0,1,2").unwrap();
    let m = ExperimentMatrix::from_config(&c).unwrap();
    assert_eq!(m.cells.len(), 6);
    let ids: std::collections::BTreeSet<String> = m.cells.iter().map(|c| c.id()).collect();
    assert_eq!(ids.len(), 6);

    // scratch ignores the demo source, so it is not duplicated per source
    let c = ExperimentConfig::parse("matrix.variants=ldd,scratch\nmatrix.seeds=0,1\nmatrix.demo_sources=expert,random").unwrap();
    let m = ExperimentMatrix::from_config(&c).unwrap();
    assert_eq!(m.cells.len(), 2 * 2 + 2);
    // matched seeds: every ldd seed has a scratch partner
    for cell in m.cells.iter().filter(|c| c.variant == Variant::Ldd) {
        assert!(m.cells.iter().any(|o| o.variant == Variant::Scratch && o.seed == cell.seed));
    }
}

#[test]
fn manifest_is_atomic_and_verifiable() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    let text = ExperimentConfig::default().to_text();
    let m = RunManifest {
        run_id: "x".into(),
        config_hash: config_hash(&text),
        config: text,
        source_revision: source_revision(),
        variant: "ldd".into(),
        seed: 0,
        inputs: vec![],
        outputs: Default::default(),
        wall_clock_secs: 1.5,
        status: RunStatus::Complete,
        error: None,
    };
    m.write_atomic(&path).unwrap();
    assert!(!dir.path().join("manifest.json.tmp").exists());
    let back = RunManifest::read(&path).unwrap();
    assert_eq!(back, m);
    assert!(back.verify());
    let reparsed = ExperimentConfig::parse(&back.config).unwrap();
    assert_eq!(reparsed, ExperimentConfig::default());
    let mut tampered = back;
    tampered.config.push_str("rl.seed=9\n");
    assert!(!tampered.verify());
}

#[test]
fn pool_map_keeps_order() {
    let xs: Vec<u64> = (0..37).collect();
    let ys = pool_map(&xs, 4, |x| x * x);
    assert_eq!(ys, xs.iter().map(|x| x * x).collect::<Vec<_>>());
}

fn csv(variant: &str, seed: u64, wins: &[f64]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for (i, w) in wins.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{variant},{seed},{w:.6},0.5,0,NaN,NaN,NaN,NaN,0\n",
            i * 1000,
            i * 10
        ));
    }
    s
}

#[test]
fn plot_two_variants() {
    let curves: Vec<Curve> = [
        csv("ldd", 0, &[0.1, 0.5, 0.9]),
        csv("ldd", 1, &[0.3, 0.7, 0.9]),
        csv("scratch", 0, &[0.1, 0.2, 0.3]),
    ]
    .iter()
    .map(|t| read_curve(t, "train_win_rate").unwrap())
    .collect();
    let b = bands(&curves);
    assert_eq!(b.len(), 2);
    assert_eq!(b[0].variant, "ldd");
    assert_eq!(b[0].runs, 2);
    let (f, mean, lo, hi) = b[0].points[1];
    assert_eq!(f, 1000.0);
    assert!((mean - 0.6).abs() < 1e-12 && lo == 0.5 && hi == 0.7);
    let svg = render_svg(&b, "t", "train_win_rate");
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("class=\"mean\"").count(), 2);
    assert_eq!(svg.matches("class=\"band\"").count(), 2);
}

#[test]
fn plot_rejects_foreign_csv() {
    assert!(read_curve("a,b\n1,2\n", "a").is_err());
    assert!(read_curve(&csv("ldd", 0, &[0.1]), "nope").is_err());
}

#[test]
fn loss_gradients_match_finite_differences() {
    for kind in LossKind::ALL {
        for seed in 0..5 {
            let r = check_loss(kind, seed).unwrap();
            assert!(r.max_rel_error < TOLERANCE, "{kind:?} seed {seed}: {r:?}");
            assert!(r.checked > 0);
        }
    }
}

#[test]
fn validation_errors_are_classified() {
    let e: HarnessError = ConfigError::Missing { key: "k".into() }.into();
    assert!(e.is_validation());
    assert!(!HarnessError::Io("x".into()).is_validation());
}

#[test]
fn alpha_d_sweep_shares_everything_else() {
    let c = ExperimentConfig::parse("matrix.variants=ldd\nmatrix.seeds=0,1").unwrap();
    let sweep = alpha_d_sweep(&c, &[0.1, 1.0, 10.0], std::path::Path::new("/out"));
    assert_eq!(sweep.len(), 3);
    let dirs: Vec<String> = sweep.iter().map(|(_, d)| d.display().to_string()).collect();
    assert_eq!(dirs, ["/out/alpha_d-0.1", "/out/alpha_d-1", "/out/alpha_d-10"]);
    for ((cfg, _), v) in sweep.iter().zip([0.1, 1.0, 10.0]) {
        assert_eq!(cfg.rl.weights.alpha_d, v);
        let mut same = cfg.clone();
        same.rl.weights.alpha_d = c.rl.weights.alpha_d;
        assert_eq!(same, c);
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use adaptmeta::autodiff::Tensor;
use adaptmeta::prng::PrngKey;
use adaptmeta_cli::config::{ConfigError, RunConfig};
use adaptmeta_cli::pipeline::{
    cmd_collect, cmd_evaluate, cmd_meta_train, cmd_report, cmd_train_acmrr, cmd_train_ensemble, load_dataset,
    load_ours, sample_ids, EvalInputs, Existing, PipelineError,
};
use adaptmeta_cli::store::{read_trajectory, Checkpoint, StoreError};

/// Seconds-scale budget; large enough for every stage to do real work.
fn tiny() -> RunConfig {
    RunConfig {
        preset: "desk".into(),
        n_traj: 3,
        collect_duration: 5.0,
        m_values: vec![2],
        ensemble_epochs: 3,
        meta_refs: 2,
        meta_duration: 1.0,
        meta_horizon: 0.5,
        meta_steps: 4,
        acmrr_steps: 4,
        n_test: 2,
        test_duration: 1.0,
        n_seeds: 1,
        eval_gains: "nominal".into(),
        checkpoint_every: 2,
        ..RunConfig::desk()
    }
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn unknown_config_keys_are_rejected() {
    let err = RunConfig::resolve("seed = 1\nmeta_stpes = 3\n", Vec::new()).unwrap_err();
    assert!(
        matches!(err, ConfigError::Parse(ref m) if m.contains("meta_stpes")),
        "{err}"
    );
    let err = RunConfig::resolve("seed = \"one\"\n", Vec::new()).unwrap_err();
    assert!(matches!(err, ConfigError::Parse(_)));
    let err = RunConfig::resolve("meta_refs = 1\n", Vec::new()).unwrap_err();
    assert!(matches!(err, ConfigError::Invalid { key: "meta_refs", .. }));
}

#[test]
fn env_overrides_file_and_file_overrides_preset() {
    let text = "preset = \"desk\"\nseed = 4\nmeta_steps = 7\n";
    let env = vec![
        ("ADAPTMETA_SEED".to_string(), "9".to_string()),
        ("ADAPTMETA_M_VALUES".to_string(), "[2, 3]".to_string()),
        ("ADAPTMETA_EVAL_GAINS".to_string(), "grid".to_string()),
        ("UNRELATED".to_string(), "x".to_string()),
    ];
    let cfg = RunConfig::resolve(text, env).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.meta_steps, 7);
    assert_eq!(cfg.m_values, vec![2, 3]);
    assert_eq!(cfg.eval_gains, "grid");
    assert_eq!(cfg.n_traj, RunConfig::desk().n_traj);
    let bad = vec![("ADAPTMETA_NOT_A_KEY".to_string(), "1".to_string())];
    assert!(RunConfig::resolve("", bad).is_err());
}

#[test]
fn presets_serialize_and_resolve_to_themselves() {
    for cfg in [RunConfig::default(), RunConfig::desk()] {
        assert_eq!(RunConfig::resolve(&cfg.to_toml(), Vec::new()).unwrap(), cfg);
    }
    let shipped = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");
    assert_eq!(
        RunConfig::load(Some(Path::new(shipped)), Vec::new()).unwrap(),
        RunConfig::desk()
    );
}

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Checkpoint::new("test").meta("answer", 42);
    let awkward = vec![0.1, -1.0 / 3.0, 1e-300, f64::MAX, 5e-324, -0.0];
    c.push("a", Tensor::matrix(2, 3, awkward.clone()).unwrap());
    c.extend("s", &[Tensor::scalar(std::f64::consts::PI), Tensor::vector(vec![1.5])]);
    let path = dir.path().join("x.ckpt");
    c.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, c);
    let bits: Vec<u64> = back.get("a").unwrap().data().iter().map(|x| x.to_bits()).collect();
    assert_eq!(bits, awkward.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_eq!(back.meta_parse::<u32>("answer", &path).unwrap(), 42);
    assert!(back.meta_str("missing", &path).is_err());
}

#[test]
fn collect_writes_manifest_and_reruns_byte_identically() {
    let cfg = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_collect(&cfg, a.path(), Existing::Fail).unwrap();
    cmd_collect(&cfg, b.path(), Existing::Fail).unwrap();
    let logs = load_dataset(a.path()).unwrap();
    assert_eq!(logs.len(), cfg.n_traj);
    for log in &logs {
        let w = log.wind.unwrap();
        assert!((cfg.train_wind_lo..=cfg.train_wind_hi).contains(&w));
    }
    assert_eq!(files(a.path()), files(b.path()));
    // A non-empty directory needs --force.
    assert!(matches!(
        cmd_collect(&cfg, a.path(), Existing::Fail),
        Err(PipelineError::NotEmpty(_))
    ));
    cmd_collect(&cfg, a.path(), Existing::Replace).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
    let other = RunConfig { seed: 1, ..cfg };
    let c = tempfile::tempdir().unwrap();
    cmd_collect(&other, c.path(), Existing::Fail).unwrap();
    assert_ne!(files(a.path())["traj_0000.csv"], files(c.path())["traj_0000.csv"]);
}

#[test]
fn trajectory_loader_rejects_bad_rows_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    let header = "t,x,y,phi,xdot,ydot,phidot,u1,u2,u3\n";
    let row = |t: f64| format!("{t},0,0,0,0,0,0,0,9.81,0\n");
    fs::write(&path, format!("{header}{}{}{}", row(0.0), row(0.01), row(0.01))).unwrap();
    match read_trajectory(&path, 0, None) {
        Err(StoreError::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected a parse error, got {other:?}"),
    }
    fs::write(&path, format!("{header}{}0.01,0,nan,0,0,0,0,0,9.81,0\n", row(0.0))).unwrap();
    match read_trajectory(&path, 0, None) {
        Err(StoreError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    fs::write(&path, format!("t,x\n{}", row(0.0))).unwrap();
    assert!(read_trajectory(&path, 0, None).is_err());
    fs::write(&path, format!("{header}{}{}", row(0.0), row(0.01))).unwrap();
    assert_eq!(read_trajectory(&path, 0, None).unwrap().states.len(), 2);
}

#[test]
fn sampling_rejects_m_above_dataset_size() {
    let key = PrngKey::from_seed(3);
    let ids = sample_ids(key, 10, 4).unwrap();
    assert_eq!(ids.len(), 4);
    assert!(ids.windows(2).all(|w| w[0] < w[1]) && ids[3] < 10);
    assert_eq!(ids, sample_ids(key, 10, 4).unwrap());
    assert!(matches!(sample_ids(key, 3, 4), Err(PipelineError::Input(_))));

    let cfg = tiny();
    let data = tempfile::tempdir().unwrap();
    cmd_collect(&cfg, data.path(), Existing::Fail).unwrap();
    let out = tempfile::tempdir().unwrap();
    let err = cmd_train_ensemble(&cfg, data.path(), out.path(), Existing::Fail, 0, 4).unwrap_err();
    assert!(err.to_string().contains("exceeds"), "{err}");
}

#[test]
fn stages_chain_and_resume_reproduces_uninterrupted_training() {
    let cfg = tiny();
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    cmd_collect(&cfg, &data, Existing::Fail).unwrap();

    let ens = root.path().join("ens");
    let models = cmd_train_ensemble(&cfg, &data, &ens, Existing::Fail, 0, 2).unwrap();
    assert_eq!(models.len(), 2);
    let ckpts = files(&ens).keys().filter(|k| k.ends_with(".ckpt")).count();
    assert_eq!(ckpts, 2);

    // Straight through.
    let direct = root.path().join("direct");
    cmd_meta_train(&cfg, &ens, &direct, Existing::Fail).unwrap().unwrap();
    // Stopped after two steps, then continued from the state checkpoint.
    let split = root.path().join("split");
    let short = RunConfig {
        meta_steps: 2,
        ..cfg.clone()
    };
    cmd_meta_train(&short, &ens, &split, Existing::Fail).unwrap();
    fs::remove_file(split.join("params.ckpt")).unwrap();
    let resumed = cmd_meta_train(&cfg, &ens, &split, Existing::Resume).unwrap().unwrap();
    assert_eq!(resumed.step, cfg.meta_steps);
    let (d, s) = (files(&direct), files(&split));
    for name in ["params.ckpt", "curve.csv", "state.ckpt"] {
        assert_eq!(d[name], s[name], "{name} differs after resume");
    }
    let (params, id) = load_ours(&direct).unwrap();
    assert_eq!((id.replicate, id.m), (0, 2));
    assert!(params.gains().k.iter().flatten().all(|x| x.is_finite()));

    let direct = root.path().join("acmrr-direct");
    cmd_train_acmrr(&cfg, &data, &direct, Existing::Fail, 0, 2).unwrap();
    let split = root.path().join("acmrr-split");
    let short = RunConfig {
        acmrr_steps: 2,
        ..cfg.clone()
    };
    cmd_train_acmrr(&short, &data, &split, Existing::Fail, 0, 2).unwrap();
    fs::remove_file(split.join("features.ckpt")).unwrap();
    cmd_train_acmrr(&cfg, &data, &split, Existing::Resume, 0, 2).unwrap();
    let (d, s) = (files(&direct), files(&split));
    for name in ["features.ckpt", "curve.csv", "state.ckpt"] {
        assert_eq!(d[name], s[name], "{name} differs after resume");
    }
}

#[test]
fn evaluation_needs_checkpoints_except_for_pid() {
    let cfg = tiny();
    let out = tempfile::tempdir().unwrap();
    let err = cmd_evaluate(&cfg, &EvalInputs::default(), out.path(), Existing::Fail).unwrap_err();
    assert!(err.to_string().contains("without a checkpoint"), "{err}");

    let pid = RunConfig {
        methods: vec!["pid".into()],
        m_values: vec![2, 5],
        n_seeds: 2,
        ..cfg
    };
    let report = cmd_evaluate(&pid, &EvalInputs::default(), out.path(), Existing::Fail).unwrap();
    // One aggregate per (M, replicate); one row per test trajectory in each.
    assert_eq!(report.aggregates.len(), 4);
    assert_eq!(report.rows.len(), 4 * pid.n_test);
    assert!(report
        .aggregates
        .iter()
        .all(|a| a.count == pid.n_test && a.method == "pid"));
    assert_eq!(report.test_sets.len(), 2);
    for name in [
        "rows.csv",
        "aggregate.csv",
        "summary.csv",
        "test_sets.csv",
        "config.toml",
    ] {
        assert!(out.path().join(name).exists(), "{name}");
    }
}

#[test]
fn report_covers_every_method_and_skips_finished_stages() {
    let cfg = tiny();
    let out = tempfile::tempdir().unwrap();
    let mut stages = Vec::new();
    let report = cmd_report(&cfg, out.path(), false, |s| stages.push(s.to_string())).unwrap();
    // ours with learned and nominal gains, acmrr, pid.
    assert_eq!(report.aggregates.len(), 4);
    let methods: Vec<(&str, &str)> = report
        .aggregates
        .iter()
        .map(|a| (a.method.as_str(), a.gain_id.as_str()))
        .collect();
    assert_eq!(
        methods,
        [("ours", "learned"), ("ours", "0"), ("acmrr", "0"), ("pid", "0")]
    );
    assert!(stages.iter().any(|s| s.contains("meta-train")));
    let before = files(out.path());
    let again = cmd_report(&cfg, out.path(), false, |_| {}).unwrap();
    assert_eq!(again.rows.len(), report.rows.len());
    assert_eq!(files(out.path()), before);
}

#[test]
fn binary_runs_stages_and_strict_flags_divergence() {
    let exe = env!("CARGO_BIN_EXE_adaptmeta");
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("tiny.toml");
    fs::write(&config, tiny().to_toml()).unwrap();
    let data = root.path().join("data");
    let run = |args: &[&str], env: &[(&str, &str)]| {
        let mut c = Command::new(exe);
        c.args(args).env_clear();
        for (k, v) in env {
            c.env(k, v);
        }
        c.output().unwrap()
    };
    let cfg = config.to_str().unwrap();
    let o = run(
        &[
            "collect",
            "--config",
            cfg,
            "--out",
            data.to_str().unwrap(),
            "--threads",
            "1",
        ],
        &[],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(load_dataset(&data).unwrap().len(), 3);
    let o = run(&["collect", "--config", cfg, "--out", data.to_str().unwrap()], &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));

    let eval = root.path().join("eval");
    let pid = [("ADAPTMETA_METHODS", "[\"pid\"]")];
    let args = ["evaluate", "--config", cfg, "--out", eval.to_str().unwrap(), "--strict"];
    let o = run(&args, &pid);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("pid"));

    // A state bound this small counts every run as diverged.
    let blowup = [pid[0], ("ADAPTMETA_MAX_STATE", "1e-3")];
    let o = run(&[&args[..], &["--force"]].concat(), &blowup);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&[&args[..5], &["--force"]].concat(), &blowup);
    assert!(o.status.success());

    let o = run(
        &["collect", "--config", cfg, "--out", data.to_str().unwrap()],
        &[("ADAPTMETA_BOGUS", "1")],
    );
    assert!(!o.status.success());
}

use std::path::Path;
use std::process::{Command, Output};

fn pal(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pal")).args(args).current_dir(dir).env_remove("PAL_SEED").output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = pal(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const FAST: [&str; 6] = ["--epochs", "2", "--set", "train.lr_decay_epoch=1", "--set", "train.warmup_epochs=1"];

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pal(&[], dir.path()).status.code(), Some(2));
    assert_eq!(pal(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(pal(&["ablate", "--table", "6"], dir.path()).status.code(), Some(2));
    assert_eq!(pal(&["eval-episodes"], dir.path()).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_1_and_explain() {
    let dir = tempfile::tempdir().unwrap();
    let out = pal(&["eval-episodes", "--checkpoint", "missing.palw"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    std::fs::write(dir.path().join("bad.toml"), "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = pal(&["train-variant", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = pal(&["train-main", "--variant", "PAL"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--partner"));

    let out = Command::new(env!("CARGO_BIN_EXE_pal"))
        .args(["train-partner", "--epochs", "1"])
        .current_dir(dir.path())
        .env("PAL_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_eval_and_dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = ok(&["gen-data", "--out", "data"], d);
    assert!(gen.contains("center oracle accuracy"), "{gen}");
    let mut args = vec!["train-variant", "--data", "data", "--variant", "PAL", "--out", "run"];
    args.extend(FAST);
    ok(&args, d);
    for f in ["partner.palw", "main.palw", "main.palc", "partner_metrics.csv", "main_metrics.csv"] {
        assert!(d.join("run").join(f).is_file(), "{f}");
    }

    let summary = ok(&["eval-episodes", "--checkpoint", "run/main.palw", "--episodes", "40", "--out", "eval.csv"], d);
    assert!(summary.trim().contains(" ± "), "{summary}");
    let csv = std::fs::read_to_string(d.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 40 + 1);

    ok(&["dump-embeddings", "--checkpoint", "run/main.palw", "--split", "data/novel.pald", "--out", "emb.csv"], d);
    let mut rd = csv::Reader::from_path(d.join("emb.csv")).unwrap();
    assert_eq!(&rd.headers().unwrap()[0], "label");
    let mut rows = 0;
    for rec in rd.records() {
        let rec = rec.unwrap();
        let norm = rec.iter().skip(1).map(|v| v.parse::<f64>().unwrap().powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6, "{norm}");
        rows += 1;
    }
    assert!(rows > 0);
}

#[test]
fn ablation_csv_has_exactly_the_table_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--table", "4", "--out", "abl", "--set", "eval.episodes=20"];
    args.extend(FAST);
    ok(&args, dir.path());
    let text = std::fs::read_to_string(dir.path().join("abl/table4.csv")).unwrap();
    let names: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["CE_only", "Partner_CT", "Partner_CE", "PAL"]);
}

#[test]
fn seed_flag_and_env_select_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let hash = |extra: &[&str], env: Option<&str>, out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_pal"));
        c.args(["train-partner", "--out", out]).args(FAST).args(extra).current_dir(d).env_remove("PAL_SEED");
        if let Some(v) = env {
            c.env("PAL_SEED", v);
        }
        let o = c.output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap().rsplit(' ').next().unwrap().trim().to_string()
    };
    let a = hash(&["--seed", "4"], None, "a");
    assert_eq!(a, hash(&[], Some("4"), "b"));
    assert_ne!(a, hash(&["--seed", "5"], None, "c"));
    // The flag wins over the environment.
    assert_eq!(a, hash(&["--seed", "4"], Some("9"), "d"));
}

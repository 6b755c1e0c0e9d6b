use std::path::Path;
use std::process::{Command, Output};

fn duplex(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duplex"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn duplex")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen_small(dir: &Path) {
    let o = duplex(
        &[
            "gen", "--out", "data", "--seed", "4", "--states", "3", "--objects", "4", "--dim", "8",
            "--train-per-pair", "6", "--val-per-pair", "2", "--test-per-pair", "2", "--seen-fraction", "0.6",
        ],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "data/manifest.txt");
}

#[test]
fn gen_train_eval_retrieve() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_small(dir);
    std::fs::write(dir.join("cfg.txt"), "manifest=data/manifest.txt\nepochs=3\ntoken_dim=8\nhidden=12\nbatch_size=8\n").unwrap();
    let o = duplex(&["train", "--config", "cfg.txt", "--out", "run", "--lambda", "0.5"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("epoch=1 loss="), "{}", lines[0]);
    assert!(lines[2].contains(" val_auc=") && lines[2].contains(" lr="));
    assert_eq!(std::fs::read_to_string(dir.join("run/train.log")).unwrap(), stdout(&o));
    let cfg = std::fs::read_to_string(dir.join("run/config.txt")).unwrap();
    assert!(cfg.contains("lambda=0.5\n") && cfg.contains("dim=8\n"), "{cfg}");

    let o = duplex(
        &["eval", "--checkpoint", "run/best.dupc", "--manifest", "data/manifest.txt", "--world", "open", "--out", "rep"],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let keys: Vec<&str> = text.lines().map(|l| l.split('=').next().unwrap()).collect();
    assert_eq!(keys, ["mode", "world", "S", "U", "HM", "AUC"]);
    assert!(text.contains("world=open"));
    assert_eq!(std::fs::read_to_string(dir.join("rep/report.txt")).unwrap(), text);
    let csv = std::fs::read_to_string(dir.join("rep/curve.csv")).unwrap();
    assert!(csv.starts_with("bias,seen_acc,unseen_acc\n-inf,"));

    let o = duplex(
        &["retrieve", "--checkpoint", "run/best.dupc", "--manifest", "data/manifest.txt", "--query", "0", "--k", "3"],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let hits: Vec<&str> = out.lines().collect();
    assert_eq!(hits.len(), 3);
    assert!(hits[0].starts_with("rank=1 id="));
}

#[test]
fn training_is_deterministic_across_processes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_small(dir);
    for run in ["a", "b"] {
        let o = duplex(
            &["train", "--manifest", "data/manifest.txt", "--out", run, "--epochs", "2", "--seed", "9"],
            dir,
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["best.dupc", "last.dupc", "train.log"] {
        assert_eq!(
            std::fs::read(dir.join("a").join(f)).unwrap(),
            std::fs::read(dir.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn errors_are_one_machine_readable_line() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_small(dir);
    let cases: [(&[&str], &str); 6] = [
        (&["eval", "--checkpoint", "missing.dupc", "--manifest", "data/manifest.txt"], "missing_file"),
        (&["train", "--manifest", "data/manifest.txt", "--out", "r", "--epochs", "0"], "config"),
        (&["train", "--manifest", "data/manifest.txt", "--out", "r", "--gamma", "1.5"], "config"),
        (&["train", "--manifest", "nowhere/manifest.txt", "--out", "r"], "missing_file"),
        (&["train", "--out", "r"], "config"),
        (&["train", "--out", "r", "--no-such-flag"], "usage"),
    ];
    for (args, kind) in cases {
        let o = duplex(args, dir);
        assert!(!o.status.success(), "{args:?} succeeded");
        let err = stderr(&o);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with(&format!("error={kind} detail=")), "{args:?}: {err}");
    }
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    for tau in ["1", "0.01"] {
        let o = duplex(&["gradcheck", "--tau", tau], tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
        let out = stdout(&o);
        // 15 groups for full and sp, 14 for vp (γ is fixed there)
        assert_eq!(out.lines().filter(|l| l.starts_with("branch=")).count(), 44);
        assert!(out.lines().last().unwrap().starts_with("max_rel_err="));
    }
}

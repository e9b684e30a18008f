use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn poserec(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poserec"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("run poserec")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn tree(dir: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let rel = p.strip_prefix(dir).unwrap().display().to_string();
        if p.is_dir() {
            out.extend(tree(&p).into_iter().map(|s| format!("{rel}/{s}")));
        } else {
            out.insert(rel);
        }
    }
    out
}

const SMALL: [&str; 6] = [
    "--set",
    "videos_per_class=6",
    "--set",
    "items_per_class=6",
    "--set",
    "shared_items=2",
];

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut synth = vec!["synth", "--out", "data"];
    synth.extend(SMALL);
    ok(&poserec(&synth, root));
    fs::write(root.join("train.cfg"), "# short run\nepochs=2\nlr=1e-3\nbatch_size=8\n").unwrap();
    ok(&poserec(
        &[
            "train",
            "--data",
            "data",
            "--config",
            "train.cfg",
            "--set",
            "epochs=1",
            "--quiet",
            "--out",
            "run",
        ],
        root,
    ));
    let run = root.join("run");
    for f in [
        "model.psrc",
        "config.txt",
        "dataset.txt",
        "split.csv",
        "train_log.csv",
        "epoch_log.csv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    // command line beats file beats defaults
    let echoed = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echoed.contains("epochs=1\n") && echoed.contains("batch_size=8\n") && echoed.contains("n_neg=5\n"));

    let eval = ok(&poserec(
        &[
            "eval",
            "--checkpoint",
            "run/model.psrc",
            "--split",
            "test",
            "--protocol",
            "ins,cat",
            "--k",
            "5,10",
            "--baselines",
            "--out",
            "ev",
        ],
        root,
    ));
    let rows: Vec<&str> = eval.lines().collect();
    assert_eq!(rows[0], "protocol,k,recall,ndcg,model");
    assert_eq!(rows.len(), 1 + 2 * 2 * 3);
    assert_eq!(fs::read_to_string(root.join("ev/eval.csv")).unwrap(), eval);

    let rec = ok(&poserec(
        &[
            "recommend",
            "--checkpoint",
            "run/model.psrc",
            "--video",
            "data/poses.jsonl",
            "--video-id",
            "c1_v002",
            "--top",
            "5",
        ],
        root,
    ));
    let lines: Vec<&str> = rec.lines().collect();
    assert_eq!(lines.len(), 5);
    for (i, l) in lines.iter().enumerate() {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 3);
        assert_eq!(f[0], (i + 1).to_string());
        f[2].parse::<f64>().unwrap();
    }

    ok(&poserec(
        &["export-emb", "--checkpoint", "run/model.psrc", "--out", "emb"],
        root,
    ));
    let emb = fs::read_to_string(root.join("emb/embeddings.csv")).unwrap();
    let header = emb.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 2 + 256);
    // 8 classes of 6 items, 2 shared, 4 prototypes
    assert_eq!(emb.lines().count(), 1 + 8 * 6 + 2 + 4);
    assert!(emb.contains("\n__proto_3,__prototype,"));
}

#[test]
fn reruns_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut synth = vec!["synth", "--seed", "3", "--out", "data"];
    synth.extend(SMALL);
    ok(&poserec(&synth, root));
    for out in ["a", "b"] {
        ok(&poserec(
            &[
                "train",
                "--data",
                "data",
                "--set",
                "epochs=1",
                "--set",
                "batch_size=8",
                "--seed",
                "9",
                "--quiet",
                "--out",
                out,
            ],
            root,
        ));
    }
    let files = tree(&root.join("a"));
    assert_eq!(files, tree(&root.join("b")));
    for f in files.iter().filter(|f| f.as_str() != "dataset.txt") {
        assert_eq!(
            fs::read(root.join("a").join(f)).unwrap(),
            fs::read(root.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn writes_stay_inside_out() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut synth = vec!["synth", "--out", "data"];
    synth.extend(SMALL);
    ok(&poserec(&synth, root));
    let before = tree(root);
    ok(&poserec(
        &[
            "sweep",
            "--axis",
            "K",
            "--values",
            "1,2",
            "--data",
            "data",
            "--set",
            "epochs=1",
            "--set",
            "batch_size=8",
            "--quiet",
            "--out",
            "sw",
        ],
        root,
    ));
    let after: BTreeSet<String> = tree(root).difference(&before).cloned().collect();
    assert!(after.iter().all(|f| f.starts_with("sw/")), "{after:?}");
    let csv = fs::read_to_string(root.join("sw/sweep.csv")).unwrap();
    assert!(csv.starts_with("axis,value,protocol,k,recall,ndcg,model\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert!(csv.lines().skip(1).all(|l| l.starts_with("K,")));
}

#[test]
fn factor_and_item_sweeps_expand() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut synth = vec![
        "synth",
        "--out",
        "data",
        "--set",
        "factor_count=3",
        "--set",
        "factor_dim=8",
    ];
    synth.extend(SMALL);
    ok(&poserec(&synth, root));
    let out = ok(&poserec(
        &[
            "sweep",
            "--axis",
            "factors",
            "--values",
            "all",
            "--data",
            "data",
            "--set",
            "epochs=1",
            "--set",
            "batch_size=8",
            "--k",
            "5",
            "--quiet",
            "--out",
            "f",
        ],
        root,
    ));
    let values: Vec<&str> = out.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values, ["0", "1", "2"]);
    assert!(fs::read_to_string(root.join("f/factors_1/config.txt"))
        .unwrap()
        .contains("factor_mask=101\n"));

    let out = ok(&poserec(
        &[
            "sweep",
            "--axis",
            "items",
            "--values",
            "0.5",
            "--data",
            "data",
            "--set",
            "epochs=1",
            "--set",
            "batch_size=8",
            "--k",
            "5",
            "--quiet",
            "--out",
            "i",
        ],
        root,
    ));
    assert_eq!(out.lines().count(), 2);
}

#[test]
fn gradcheck_exit_code_follows_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let out = poserec(&["gradcheck", "--entries", "2", "--out", "g"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(tmp.path().join("g/gradcheck.csv").exists());
    // an impossible tolerance is a numerical failure
    let out = poserec(&["gradcheck", "--entries", "2", "--tolerance", "0"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let usage = poserec(&["train", "--bogus"], root);
    assert_eq!(usage.status.code(), Some(1));
    assert!(!usage.stderr.is_empty());
    assert_eq!(poserec(&["frobnicate"], root).status.code(), Some(1));
    assert_eq!(poserec(&["--help"], root).status.code(), Some(0));
    assert_eq!(poserec(&["train", "--help"], root).status.code(), Some(0));
    assert_eq!(
        poserec(&["eval", "--checkpoint", "x.psrc", "--protocol", "bad"], root)
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        poserec(&["train", "--data", "missing", "--out", "o"], root)
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        poserec(&["train", "--data", "missing", "--set", "lr=abc", "--out", "o"], root)
            .status
            .code(),
        Some(1)
    );
    fs::write(root.join("bad.psrc"), b"not a checkpoint").unwrap();
    assert_eq!(
        poserec(
            &[
                "export-emb",
                "--checkpoint",
                "bad.psrc",
                "--items",
                "bad.psrc",
                "--out",
                "o"
            ],
            root
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        poserec(&["synth", "--set", "n_classes=0", "--out", "s"], root)
            .status
            .code(),
        Some(2)
    );
}

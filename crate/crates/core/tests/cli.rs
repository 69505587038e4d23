mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ctrl_cnn::data::{load_corpus, write_corpus};
use ctrl_cnn::synthetic::embeddings_text;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ctrl-cnn"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let t = common::task(30, 10, 10, 0.0, 11);
        fs::write(root.join("train.txt"), write_corpus(&t.train)).unwrap();
        fs::write(root.join("val.txt"), write_corpus(&t.validation)).unwrap();
        fs::write(root.join("test.txt"), write_corpus(&t.test)).unwrap();
        fs::write(root.join("g.txt"), embeddings_text(&t.general)).unwrap();
        fs::write(root.join("d.txt"), embeddings_text(&t.domain)).unwrap();
        Fixture { _dir: dir, root }
    }

    fn p(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (tr, va, te, g, d, o) = (self.p("train.txt"), self.p("val.txt"), self.p("test.txt"), self.p("g.txt"), self.p("d.txt"), self.p(out));
        let mut args = vec![
            "train", "--variant", "ctrl", "--mode", "async", "--train", &tr, "--validation", &va, "--test", &te,
            "--emb-general", &g, "--emb-domain", &d, "--general-dim", "30", "--domain-dim", "10",
            "--narrow-filters", "8", "--wide-filters", "8", "--channels", "16", "--bottleneck", "8",
            "--max-epochs", "3", "--patience", "2", "--global-patience", "1", "--max-steps", "3",
            "--lr-step1", "0.003", "--lr-step2", "0.006", "--batch-size", "8", "--out", &o,
        ];
        args.extend_from_slice(extra);
        run(&args)
    }
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn train_writes_artifacts_and_replays() {
    let f = Fixture::new();
    let stdout = ok(&f.train("a", &["--seed", "7"]));
    assert!(stdout.contains("val_f1") && stdout.contains("test_f1"), "{stdout}");
    let a = Path::new(&f.p("a")).to_path_buf();
    for name in ["best.ckpt", "curves.tsv", "manifest.txt"] {
        assert!(a.join(name).is_file(), "{name}");
    }
    assert!(fs::read_dir(a.join("checkpoints")).unwrap().count() > 0);

    ok(&f.train("b", &["--seed", "7"]));
    let ckpt = |d: &str| fs::read(Path::new(&f.p(d)).join("best.ckpt")).unwrap();
    let curves = |d: &str| fs::read_to_string(Path::new(&f.p(d)).join("curves.tsv")).unwrap();
    assert_eq!(ckpt("a"), ckpt("b"));
    assert_eq!(curves("a"), curves("b"));

    // the manifest alone replays the run
    let manifest = a.join("manifest.txt").display().to_string();
    let c = f.p("c");
    ok(&run(&["train", "--config", &manifest, "--out", &c]));
    assert_eq!(ckpt("a"), ckpt("c"));

    ok(&f.train("d", &["--seed", "8"]));
    assert_ne!(ckpt("a"), ckpt("d"));
}

#[test]
fn missing_train_is_a_usage_error() {
    let o = run(&["train", "--emb-general", "g", "--emb-domain", "d"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--train"));
}

#[test]
fn eval_predict_and_export() {
    let f = Fixture::new();
    ok(&f.train("run", &[]));
    let ck = Path::new(&f.p("run")).join("best.ckpt").display().to_string();
    let dump = f.p("dump.txt");
    let out = ok(&run(&["eval", "--checkpoint", &ck, "--data", &f.p("test.txt"), "--dump", &dump]));
    assert!(out.lines().any(|l| l.starts_with("f1\t")), "{out}");
    let (dumped, _) = load_corpus(&dump).unwrap();
    let (test, _) = load_corpus(f.p("test.txt")).unwrap();
    assert_eq!(dumped.len(), test.len());
    assert!(dumped.iter().zip(&test).all(|(a, b)| a.tokens == b.tokens));

    fs::write(f.p("raw.txt"), "w30 a1 a2 w40\n\nw50 a3\n").unwrap();
    let spans = ok(&run(&["predict", "--checkpoint", &ck, "--input", &f.p("raw.txt")]));
    for line in spans.lines() {
        assert_eq!(line.split('\t').count(), 4, "{line}");
    }

    let csv = f.p("curves.csv");
    let curves = Path::new(&f.p("run")).join("curves.tsv").display().to_string();
    ok(&run(&["export-curves", &curves, "--out", &csv]));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("run,epoch,"));
    assert!(text.lines().skip(1).any(|l| l.ends_with(",1")));
}

#[test]
fn corrupted_checkpoint_fails() {
    let f = Fixture::new();
    ok(&f.train("run", &[]));
    let ck = Path::new(&f.p("run")).join("best.ckpt");
    let mut bytes = fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&ck, bytes).unwrap();
    let o = run(&["eval", "--checkpoint", &ck.display().to_string(), "--data", &f.p("test.txt")]);
    assert_ne!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
    assert!(o.stdout.is_empty());
}

#[test]
fn gradcheck_command() {
    let out = ok(&run(&["gradcheck", "--ops", "conv1d"]));
    assert_eq!(out.lines().count(), 1);
    assert!(out.starts_with("conv1d"));
    let o = run(&["gradcheck", "--ops", "conv1d", "--include-broken"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(run(&["gradcheck", "--ops", "nope"]).status.code(), Some(1));
}

//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so
//! the lines show up under `cargo test` without `--nocapture`.

mod common;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ctrl_cnn::checkpoint::group_bytes;
use ctrl_cnn::data::{build_tables, load_corpus, load_embeddings, split_validation, write_corpus, Label, Vocab};
use ctrl_cnn::eval::{aggregate_runs, label_prf};
use ctrl_cnn::gradcheck::{run_suite, TOLERANCE};
use ctrl_cnn::layers::{DoubleEmbedding, Group};
use ctrl_cnn::synthetic::embeddings_text;
use ctrl_cnn::trainer::{async_train, evaluate, export_curves, parse_curves, run_phase, train, Phase, RunLog, TrainConfig, TrainData, TrainMode};
use ctrl_cnn::{seed, Execution, Mode, Model, ModelConfig, Variant};
use rand::Rng;

const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const IDENTITY_TOL: f64 = 1e-9;
const FREEZE_BUDGET: Duration = Duration::from_secs(120);
const HANDOFF_TOL: f64 = 1e-9;
const OVERFIT_F1: f64 = 0.99;
const OVERFIT_EPOCHS: usize = 300;
const OVERFIT_BUDGET: Duration = Duration::from_secs(300);
const EVAL_SEQUENCES: usize = 1000;
const CURVE_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const REFERENCE_DECNN_LAPTOP_F1: f64 = 81.59;
const REFERENCE_F1_BAND: f64 = 1.5;

/// Sequential execution stands in for a single core.
const ONE_CORE: Execution = Execution::Sequential;

type Criterion = (&'static str, Box<dyn Fn() -> Verdict>);

struct Verdict {
    pass: Option<bool>,
    detail: String,
}

fn pass(ok: bool, detail: String) -> Verdict {
    Verdict { pass: Some(ok), detail }
}

fn c1_gradcheck() -> Verdict {
    let start = Instant::now();
    let results = match run_suite(&[], false, 0) {
        Ok(r) => r,
        Err(e) => return pass(false, e.to_string()),
    };
    let elapsed = start.elapsed();
    let worst = results.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let ok = results.iter().all(|r| r.passed()) && elapsed < GRADCHECK_BUDGET;
    pass(
        ok,
        format!(
            "{} checks, worst {} at {:.2e} (tol {TOLERANCE:e}), {:.1}s",
            results.len(),
            worst.name,
            worst.max_rel_error,
            elapsed.as_secs_f64()
        ),
    )
}

fn c2_identity_at_init() -> Verdict {
    let vocab = 60;
    let emb = DoubleEmbedding::random(vocab, 300, 100, 0.5, 21);
    let cfg = |variant| ModelConfig {
        variant,
        vocab_size: vocab,
        seed: 21,
        ..Default::default()
    };
    let ctrl = Model::with_embedding(&cfg(Variant::Ctrl), emb.clone()).unwrap();
    let decnn = Model::with_embedding(&cfg(Variant::DeCnn), emb).unwrap();
    let shared = ctrl
        .params()
        .iter()
        .filter(|p| matches!(p.group, Group::Cnn | Group::Fc))
        .all(|p| decnn.param(&p.name).is_some_and(|q| q.value == p.value));
    let mut rng = seed::rng(22);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let len = rng.gen_range(1..=30);
        let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(1..vocab)).collect();
        let (a, _) = ctrl.forward_sentence(&ids, Mode::Eval, &mut seed::rng(0)).unwrap();
        let (b, _) = decnn.forward_sentence(&ids, Mode::Eval, &mut seed::rng(0)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    pass(
        shared && worst <= IDENTITY_TOL,
        format!("shared conv/fc weights: {shared}; max |Δlogit| {worst:.1e} over 100 sentences"),
    )
}

fn c3_freeze_invariance() -> Verdict {
    let start = Instant::now();
    let t = common::task(20, 10, 0, 0.0, 31);
    let d = common::data(&t, false);
    let mut model = common::build(&t, Variant::Ctrl, 31);
    let cfg = TrainConfig {
        lr_step1: 3e-3,
        lr_step2: 6e-3,
        batch_size: 5,
        max_epochs: 10,
        exec: ONE_CORE,
        ..Default::default()
    };
    let mut log = RunLog::default();
    let mut details = Vec::new();
    let mut ok = true;
    for (phase, frozen, moving) in [
        (Phase::Step1, vec![Group::Ctrl, Group::Fc, Group::Emb], vec![Group::Cnn]),
        (Phase::Step2, vec![Group::Cnn, Group::Emb], vec![Group::Ctrl, Group::Fc]),
    ] {
        let before = group_bytes(&model, &frozen);
        let active_before = group_bytes(&model, &moving);
        let out = run_phase(&mut model, &d, phase, &cfg, &mut log).unwrap();
        let same = group_bytes(&model, &frozen) == before;
        let moved = group_bytes(&model, &moving) != active_before;
        ok &= same && moved;
        details.push(format!("{phase}: frozen unchanged {same}, active moved {moved} ({} epochs)", out.epochs));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < FREEZE_BUDGET;
    pass(ok, format!("{}; {:.1}s", details.join("; "), elapsed.as_secs_f64()))
}

fn c4_handoff() -> Verdict {
    let t = common::task(40, 20, 0, 0.1, 41);
    let d = common::data(&t, false);
    let mut model = common::build(&t, Variant::Ctrl, 41);
    let cfg = TrainConfig {
        lr_step1: 3e-3,
        lr_step2: 6e-3,
        batch_size: 8,
        max_epochs: 8,
        patience: 3,
        exec: ONE_CORE,
        seed: 41,
        ..Default::default()
    };
    let out = async_train(&mut model, &d, &cfg).unwrap();
    let m = &out.log.markers;
    let worst = m
        .windows(2)
        .map(|w| (w[1].start.loss - w[0].best.loss).abs())
        .fold(0.0, f64::max);
    pass(
        m.len() >= 2 && worst <= HANDOFF_TOL,
        format!("{} phases, max |start(k+1) - best(k)| = {worst:.1e}", m.len()),
    )
}

fn c5_overfit() -> Verdict {
    let start = Instant::now();
    let t = common::task(50, 0, 0, 0.0, 1);
    let mut cfg = common::desk_model(Variant::Ctrl, t.vocab.len(), 1);
    cfg.dropout = 0.1;
    let mut model = Model::with_embedding(&cfg, t.embedding.clone()).unwrap();
    let d = TrainData {
        train: t.train.clone(),
        validation: t.train.clone(),
        test: None,
        vocab: t.vocab.clone(),
    };
    let tc = TrainConfig {
        lr_step1: 3e-3,
        lr_step2: 6e-3,
        batch_size: 10,
        max_total_epochs: Some(OVERFIT_EPOCHS),
        exec: ONE_CORE,
        seed: 1,
        ..Default::default()
    };
    let out = async_train(&mut model, &d, &tc).unwrap();
    let score = evaluate(&model, &d.train, &d.vocab, ONE_CORE).unwrap();
    let elapsed = start.elapsed();
    pass(
        score.f1 >= OVERFIT_F1 && out.log.epochs() <= OVERFIT_EPOCHS && elapsed < OVERFIT_BUDGET,
        format!(
            "train F1 {:.4} after {} epochs in {} phases, {:.1}s",
            score.f1,
            out.log.epochs(),
            out.phases,
            elapsed.as_secs_f64()
        ),
    )
}

fn brute_spans(labels: &[Label]) -> HashSet<(usize, usize)> {
    let n = labels.len();
    let mut out = HashSet::new();
    for s in 0..n {
        let starts = labels[s] == Label::B || (labels[s] == Label::I && (s == 0 || labels[s - 1] == Label::O));
        for e in s..n {
            if starts
                && labels[s + 1..=e].iter().all(|&l| l == Label::I)
                && (e + 1 == n || labels[e + 1] != Label::I)
            {
                out.insert((s, e));
            }
        }
    }
    out
}

fn c6_evaluator() -> Verdict {
    let mut rng = seed::rng(61);
    let mut gen = |n: usize| -> Vec<Vec<Label>> {
        (0..n)
            .map(|_| (0..rng.gen_range(1..=20)).map(|_| Label::ALL[rng.gen_range(0..3)]).collect())
            .collect()
    };
    let gold = gen(EVAL_SEQUENCES);
    let mut rng2 = seed::rng(62);
    let pred: Vec<Vec<Label>> = gold
        .iter()
        .map(|g| g.iter().map(|&l| if rng2.gen_bool(0.6) { l } else { Label::ALL[rng2.gen_range(0..3)] }).collect())
        .collect();
    let prf = label_prf(&gold, &pred).unwrap();
    let (mut g, mut p, mut c) = (0, 0, 0);
    for (a, b) in gold.iter().zip(&pred) {
        let (sa, sb) = (brute_spans(a), brute_spans(b));
        g += sa.len();
        p += sb.len();
        c += sa.intersection(&sb).count();
    }
    let (pr, rc) = (c as f64 / p as f64, c as f64 / g as f64);
    let f1 = 2.0 * pr * rc / (pr + rc);
    pass(
        (prf.n_gold, prf.n_pred, prf.n_correct) == (g, p, c) && prf.precision == pr && prf.recall == rc && prf.f1 == f1,
        format!("{EVAL_SEQUENCES} sequences: gold {g}, predicted {p}, correct {c}, F1 {f1:.6}"),
    )
}

fn c7_determinism(scratch: &Path) -> Verdict {
    let t = common::task(30, 10, 10, 0.0, 71);
    let f = |n: &str| scratch.join(n).display().to_string();
    fs::write(f("train.txt"), write_corpus(&t.train)).unwrap();
    fs::write(f("val.txt"), write_corpus(&t.validation)).unwrap();
    fs::write(f("g.txt"), embeddings_text(&t.general)).unwrap();
    fs::write(f("d.txt"), embeddings_text(&t.domain)).unwrap();
    let run = |out: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_ctrl-cnn"))
            .env("RUST_LOG", "warn")
            .args([
                "train", "--variant", "ctrl", "--train", &f("train.txt"), "--validation", &f("val.txt"),
                "--emb-general", &f("g.txt"), "--emb-domain", &f("d.txt"), "--general-dim", "30",
                "--domain-dim", "10", "--narrow-filters", "8", "--wide-filters", "8", "--channels", "16",
                "--bottleneck", "8", "--max-epochs", "4", "--patience", "2", "--global-patience", "2",
                "--lr-step1", "0.003", "--lr-step2", "0.006", "--seed", "7", "--out", &f(out),
            ])
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        let dir = scratch.join(out);
        (
            fs::read(dir.join("best.ckpt")).unwrap(),
            parse_curves(&fs::read_to_string(dir.join("curves.tsv")).unwrap()).unwrap(),
        )
    };
    let (a, b) = (run("run_a"), run("run_b"));
    pass(
        a.0 == b.0 && a.1 == b.1,
        format!(
            "checkpoints identical: {} ({} bytes); run logs identical: {} ({} epochs)",
            a.0 == b.0,
            a.0.len(),
            a.1 == b.1,
            a.1.epochs()
        ),
    )
}

fn c8_curves(scratch: &Path) -> Verdict {
    let mut rows = Vec::new();
    let mut emitted = true;
    let mut async_wins = 0;
    let mut sync_rises = 0;
    for &s in &CURVE_SEEDS {
        let t = common::task(60, 30, 30, 0.25, 80 + s);
        let d = common::data(&t, true);
        let mut best = [0.0; 2];
        for (i, (variant, mode)) in [(Variant::CtrlMinus, TrainMode::Sync), (Variant::Ctrl, TrainMode::Async)].into_iter().enumerate() {
            let mut cfg = common::desk_model(variant, t.vocab.len(), s);
            cfg.dropout = 0.1;
            let mut model = Model::with_embedding(&cfg, t.embedding.clone()).unwrap();
            let tc = TrainConfig {
                mode,
                lr_step1: 3e-3,
                lr_step2: 6e-3,
                lr_sync: 3e-3,
                batch_size: 10,
                max_epochs: 25,
                patience: 25,
                global_patience: 2,
                max_total_epochs: Some(100),
                exec: ONE_CORE,
                seed: s,
                ..Default::default()
            };
            let out = train(&mut model, &d, &tc).unwrap();
            let path = scratch.join(format!("curves-{}-seed{s}.tsv", variant.as_str()));
            export_curves(&out.log, &path).unwrap();
            let back = parse_curves(&fs::read_to_string(&path).unwrap()).unwrap();
            emitted &= back.records.iter().all(|r| r.test_f1.is_some()) && !back.markers.is_empty();
            best[i] = out.best.loss;
            if mode == TrainMode::Sync {
                let min_at = out.log.records.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss)).unwrap().epoch;
                let last = out.log.records.last().unwrap();
                if last.epoch > min_at && last.val_loss > out.best.loss {
                    sync_rises += 1;
                }
            }
        }
        if best[1] <= best[0] {
            async_wins += 1;
        }
        rows.push(format!("seed {s}: sync best {:.4} async best {:.4}", best[0], best[1]));
    }
    println!("    criterion 8 curves in {}", scratch.display());
    for r in &rows {
        println!("    {r}");
    }
    pass(
        emitted,
        format!(
            "curves + markers emitted for {} seeds; observed: sync loss rises on {sync_rises}/5, async best <= sync best on {async_wins}/5 (expected >= 3, not asserted)",
            CURVE_SEEDS.len()
        ),
    )
}

/// Expects `laptop/` and `restaurant/` with `train.txt` and `test.txt`, plus
/// `emb/general.txt`, `emb/laptop_domain.txt`, `emb/restaurant_domain.txt`.
fn c9_full_scale(dir: &Path) -> Verdict {
    let mut means = Vec::new();
    for domain in ["laptop", "restaurant"] {
        let (train_all, _) = load_corpus(dir.join(domain).join("train.txt")).unwrap();
        let (test, _) = load_corpus(dir.join(domain).join("test.txt")).unwrap();
        let general = load_embeddings(dir.join("emb/general.txt"), 300).unwrap();
        let dom = load_embeddings(dir.join(format!("emb/{domain}_domain.txt")), 100).unwrap();
        let mut per_variant = Vec::new();
        for variant in [Variant::DeCnn, Variant::Ctrl] {
            let mut f1s = Vec::new();
            for run in 0..5u64 {
                let (train, validation) = split_validation(train_all.clone(), 150, run).unwrap();
                let vocab = Vocab::build(&train);
                let (emb, _) = build_tables(&vocab, &general, &dom, true).unwrap();
                let cfg = ModelConfig {
                    variant,
                    vocab_size: vocab.len(),
                    seed: run,
                    ..Default::default()
                };
                let mut model = Model::with_embedding(&cfg, emb).unwrap();
                let data = TrainData {
                    train,
                    validation,
                    test: None,
                    vocab,
                };
                let tc = TrainConfig {
                    mode: TrainMode::for_variant(variant),
                    seed: run,
                    ..Default::default()
                };
                ctrl_cnn::trainer::train(&mut model, &data, &tc).unwrap();
                f1s.push(100.0 * evaluate(&model, &test, &data.vocab, Execution::default()).unwrap().f1);
            }
            per_variant.push(aggregate_runs(&f1s).unwrap().0);
        }
        means.push((domain, per_variant[0], per_variant[1]));
    }
    let laptop_ok = (means[0].1 - REFERENCE_DECNN_LAPTOP_F1).abs() <= REFERENCE_F1_BAND;
    let ctrl_ok = means.iter().all(|(_, d, c)| c >= d);
    pass(
        laptop_ok && ctrl_ok,
        means
            .iter()
            .map(|(d, a, b)| format!("{d}: decnn {a:.2} ctrl {b:.2}"))
            .collect::<Vec<_>>()
            .join("; "),
    )
}

fn main() {
    // keep the libtest interface quiet for `cargo test -- --list` and filters
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let scratch = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&scratch);
    fs::create_dir_all(&scratch).unwrap();
    let criteria: Vec<Criterion> = vec![
        ("1 gradient correctness", Box::new(c1_gradcheck)),
        ("2 identity at init", Box::new(c2_identity_at_init)),
        ("3 freeze invariance", Box::new(c3_freeze_invariance)),
        ("4 checkpoint hand-off", Box::new(c4_handoff)),
        ("5 overfit oracle", Box::new(c5_overfit)),
        ("6 evaluator oracle", Box::new(c6_evaluator)),
        ("7 determinism", Box::new({
            let s = scratch.clone();
            move || c7_determinism(&s)
        })),
        ("8 desk-scale curves", Box::new({
            let s = scratch.clone();
            move || c8_curves(&s)
        })),
        ("9 full-scale F1", Box::new(|| match std::env::var_os("CTRL_SEMEVAL_DIR") {
            Some(dir) => c9_full_scale(Path::new(&dir)),
            None => Verdict {
                pass: None,
                detail: "CTRL_SEMEVAL_DIR not set; needs the full corpora and embeddings".into(),
            },
        })),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let v = check();
        let tag = match v.pass {
            Some(true) => "PASS",
            Some(false) => {
                failed += 1;
                "FAIL"
            }
            None => "SKIP",
        };
        println!("{tag} criterion {name}: {} [{:.1}s]", v.detail, start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

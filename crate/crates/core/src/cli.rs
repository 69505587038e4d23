//! Command-line entry point.
//!
//! Training flags mirror the fields of [`ModelConfig`] and [`TrainConfig`].
//! `--config FILE` reads `key=value` lines (keys are flag names without the
//! leading dashes) and splices them in front of the command line, so flags
//! given explicitly win. The `manifest.txt` written by `train` has the same
//! format and replays the run.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, Write as _};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::data::{build_tables, load_corpus, load_embeddings, split_validation, whitespace_tokenize, write_corpus, TaggedSentence, Vocab};
use crate::error::{Error, Result};
use crate::eval::{decode_bio, label_prf};
use crate::gradcheck;
use crate::model::{Model, ModelConfig, Variant};
use crate::optim::AdamConfig;
use crate::parallel::Execution;
use crate::trainer::{self, parse_curves, Metric, TrainConfig, TrainData, TrainMode};

#[derive(Debug, Parser)]
#[command(name = "ctrl-cnn", version, about = "Aspect-term tagging with controlled CNNs")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write best.ckpt, curves.tsv, manifest.txt and checkpoints/.
    Train(Box<TrainArgs>),
    /// Score a checkpoint on a two-column corpus.
    Eval(EvalArgs),
    /// Tag raw whitespace-tokenized text, one sentence per line.
    Predict(PredictArgs),
    /// Finite-difference check of every backward rule.
    Gradcheck(GradcheckArgs),
    /// Merge curve files into one CSV for plotting.
    ExportCurves(ExportArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// key=value file supplying any flag; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    train: PathBuf,
    /// Validation corpus. Without it, `holdout` sentences are split off the training set.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long, default_value_t = 150)]
    holdout: usize,
    /// Test corpus, scored every epoch for the curves only.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    emb_general: PathBuf,
    #[arg(long)]
    emb_domain: PathBuf,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    lowercase_fallback: bool,
    #[arg(long, default_value = "run")]
    out: PathBuf,

    #[arg(long, default_value = "ctrl")]
    variant: Variant,
    #[arg(long, default_value_t = 300)]
    general_dim: usize,
    #[arg(long, default_value_t = 100)]
    domain_dim: usize,
    #[arg(long, default_value_t = 128)]
    narrow_filters: usize,
    #[arg(long, default_value_t = 3)]
    narrow_kernel: usize,
    #[arg(long, default_value_t = 128)]
    wide_filters: usize,
    #[arg(long, default_value_t = 5)]
    wide_kernel: usize,
    #[arg(long, default_value_t = 256)]
    channels: usize,
    #[arg(long, default_value_t = 5)]
    kernel: usize,
    #[arg(long, default_value_t = 3)]
    upper_layers: usize,
    #[arg(long, default_value_t = 128)]
    bottleneck: usize,
    #[arg(long, default_value_t = 0.55)]
    dropout: f64,

    /// Defaults to the schedule the variant is defined with.
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long, default_value_t = 5e-5)]
    lr_step1: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr_step2: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr_sync: f64,
    #[arg(long, default_value_t = 0.9)]
    adam_beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    adam_beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    adam_epsilon: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 50)]
    max_epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 3)]
    global_patience: usize,
    #[arg(long, default_value_t = 40)]
    max_steps: usize,
    #[arg(long)]
    max_total_epochs: Option<usize>,
    #[arg(long, default_value = "loss")]
    metric: Metric,
    /// Seeds initialization, the holdout split, shuffling and dropout.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = Execution::default())]
    exec: Execution,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Write predictions in the two-column corpus format.
    #[arg(long)]
    dump: Option<PathBuf>,
    #[arg(long, default_value_t = Execution::default())]
    exec: Execution,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input text; standard input when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = Execution::default())]
    exec: Execution,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Comma-separated subset of checks.
    #[arg(long, value_delimiter = ',')]
    ops: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also run a check whose backward is deliberately wrong.
    #[arg(long, hide = true)]
    include_broken: bool,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// curves.tsv files written by `train`.
    #[arg(required = true)]
    curves: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match splice_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::ExportCurves(a) => cmd_export(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Parses `key=value` lines into `--key=value` arguments. `#` starts a
/// comment line.
pub fn config_args(text: &str, origin: &Path) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            line: n + 1,
            msg: format!("expected key=value, found `{line}`"),
        })?;
        let key = k.trim().replace('_', "-");
        if key == "config" {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                msg: "config files cannot include other config files".into(),
            });
        }
        out.push(format!("--{key}={}", v.trim()).into());
    }
    Ok(out)
}

fn splice_config(mut args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut found = None;
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            found = args.get(i + 1).map(|p| (i, PathBuf::from(p)));
            break;
        }
        if let Some(p) = s.strip_prefix("--config=") {
            found = Some((i, PathBuf::from(p)));
            break;
        }
    }
    let Some((pos, path)) = found else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let extra = config_args(&text, &path)?;
    // insert right after the subcommand name so explicit flags come later
    let at = if pos >= 2 { 2 } else { pos };
    args.splice(at..at, extra);
    Ok(args)
}

fn model_config(a: &TrainArgs, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        variant: a.variant,
        vocab_size,
        general_dim: a.general_dim,
        domain_dim: a.domain_dim,
        narrow_filters: a.narrow_filters,
        narrow_kernel: a.narrow_kernel,
        wide_filters: a.wide_filters,
        wide_kernel: a.wide_kernel,
        channels: a.channels,
        kernel: a.kernel,
        upper_layers: a.upper_layers,
        bottleneck: a.bottleneck,
        labels: 3,
        dropout: a.dropout,
        seed: a.seed,
    }
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        mode: a.mode.unwrap_or_else(|| TrainMode::for_variant(a.variant)),
        lr_step1: a.lr_step1,
        lr_step2: a.lr_step2,
        lr_sync: a.lr_sync,
        batch_size: a.batch_size,
        max_epochs: a.max_epochs,
        patience: a.patience,
        global_patience: a.global_patience,
        max_steps: a.max_steps,
        max_total_epochs: a.max_total_epochs,
        metric: a.metric,
        seed: a.seed,
        checkpoint_dir: Some(a.out.join("checkpoints")),
        adam: AdamConfig {
            lr: 0.0,
            beta1: a.adam_beta1,
            beta2: a.adam_beta2,
            epsilon: a.adam_epsilon,
        },
        exec: a.exec,
    }
}

fn manifest_text(a: &TrainArgs, mode: TrainMode, started: u64, finished: Option<u64>) -> String {
    let mut lines = vec![
        format!("# ctrl-cnn {}", env!("CARGO_PKG_VERSION")),
        format!("# started_unix={started}"),
    ];
    if let Some(f) = finished {
        lines.push(format!("# finished_unix={f}"));
    }
    let path = |p: &Path| p.display().to_string();
    let mut kv: Vec<(&str, String)> = vec![("train", path(&a.train))];
    if let Some(v) = &a.validation {
        kv.push(("validation", path(v)));
    }
    kv.push(("holdout", a.holdout.to_string()));
    if let Some(t) = &a.test {
        kv.push(("test", path(t)));
    }
    kv.extend([
        ("emb-general", path(&a.emb_general)),
        ("emb-domain", path(&a.emb_domain)),
        ("lowercase-fallback", a.lowercase_fallback.to_string()),
        ("out", path(&a.out)),
        ("variant", a.variant.to_string()),
        ("general-dim", a.general_dim.to_string()),
        ("domain-dim", a.domain_dim.to_string()),
        ("narrow-filters", a.narrow_filters.to_string()),
        ("narrow-kernel", a.narrow_kernel.to_string()),
        ("wide-filters", a.wide_filters.to_string()),
        ("wide-kernel", a.wide_kernel.to_string()),
        ("channels", a.channels.to_string()),
        ("kernel", a.kernel.to_string()),
        ("upper-layers", a.upper_layers.to_string()),
        ("bottleneck", a.bottleneck.to_string()),
        ("dropout", a.dropout.to_string()),
        ("mode", mode.to_string()),
        ("lr-step1", a.lr_step1.to_string()),
        ("lr-step2", a.lr_step2.to_string()),
        ("lr-sync", a.lr_sync.to_string()),
        ("adam-beta1", a.adam_beta1.to_string()),
        ("adam-beta2", a.adam_beta2.to_string()),
        ("adam-epsilon", a.adam_epsilon.to_string()),
        ("batch-size", a.batch_size.to_string()),
        ("max-epochs", a.max_epochs.to_string()),
        ("patience", a.patience.to_string()),
        ("global-patience", a.global_patience.to_string()),
        ("max-steps", a.max_steps.to_string()),
    ]);
    if let Some(m) = a.max_total_epochs {
        kv.push(("max-total-epochs", m.to_string()));
    }
    kv.extend([
        ("metric", a.metric.to_string()),
        ("seed", a.seed.to_string()),
        ("exec", a.exec.to_string()),
    ]);
    for (k, v) in kv {
        lines.push(format!("{k}={v}"));
    }
    lines.join("\n") + "\n"
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let started = unix_now();
    let cfg = train_config(a);
    fs::create_dir_all(a.out.join("checkpoints")).map_err(|e| Error::io(&a.out, e))?;
    let manifest = a.out.join("manifest.txt");
    write_file(&manifest, manifest_text(a, cfg.mode, started, None))?;

    let (train, stats) = load_corpus(&a.train)?;
    log::info!(
        "train corpus: {} sentences, {} aspects, {} tokens",
        stats.sentences,
        stats.aspects,
        stats.tokens
    );
    let (train, validation) = match &a.validation {
        Some(p) => (train, load_corpus(p)?.0),
        None => split_validation(train, a.holdout, a.seed)?,
    };
    let test = a.test.as_ref().map(|p| load_corpus(p).map(|c| c.0)).transpose()?;
    let vocab = Vocab::build(&train);
    let general = load_embeddings(&a.emb_general, a.general_dim)?;
    let domain = load_embeddings(&a.emb_domain, a.domain_dim)?;
    let (embedding, coverage) = build_tables(&vocab, &general, &domain, a.lowercase_fallback)?;
    log::info!(
        "vocabulary {} types; embedding coverage general {:.3}, domain {:.3}",
        vocab.len(),
        coverage.general,
        coverage.domain
    );

    let mut model = Model::with_embedding(&model_config(a, vocab.len()), embedding)?;
    let data = TrainData {
        train,
        validation,
        test,
        vocab,
    };
    let outcome = trainer::train(&mut model, &data, &cfg)?;
    checkpoint::save(a.out.join("best.ckpt"), &model, &data.vocab)?;
    trainer::export_curves(&outcome.log, a.out.join("curves.tsv"))?;
    write_file(&manifest, manifest_text(a, cfg.mode, started, Some(unix_now())))?;

    println!("phases\t{}", outcome.phases);
    println!("epochs\t{}", outcome.log.epochs());
    println!("val_loss\t{:.6}", outcome.best.loss);
    println!("val_f1\t{:.4}", outcome.best.f1);
    if let Some(test) = &data.test {
        let s = trainer::evaluate(&model, test, &data.vocab, cfg.exec)?;
        println!("test_f1\t{:.4}", s.f1);
    }
    Ok(0)
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let (model, vocab) = checkpoint::load(&a.checkpoint)?.into_model()?;
    let (corpus, _) = load_corpus(&a.data)?;
    let tokens: Vec<Vec<String>> = corpus.iter().map(|s| s.tokens.clone()).collect();
    let pred = trainer::predict(&model, &tokens, &vocab, a.exec)?;
    let gold: Vec<_> = corpus.iter().map(|s| s.labels.clone()).collect();
    let prf = label_prf(&gold, &pred)?;
    println!("precision\t{:.4}", prf.precision);
    println!("recall\t{:.4}", prf.recall);
    println!("f1\t{:.4}", prf.f1);
    println!("gold\t{}\npredicted\t{}\ncorrect\t{}", prf.n_gold, prf.n_pred, prf.n_correct);
    if let Some(path) = &a.dump {
        let tagged = tokens
            .into_iter()
            .zip(pred)
            .map(|(t, l)| TaggedSentence::new(t, l))
            .collect::<Result<Vec<_>>>()?;
        write_file(path, write_corpus(&tagged))?;
    }
    Ok(0)
}

fn cmd_predict(a: &PredictArgs) -> Result<i32> {
    let (model, vocab) = checkpoint::load(&a.checkpoint)?.into_model()?;
    let lines: Vec<String> = match &a.input {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::io(p, e))?
            .lines()
            .map(str::to_string)
            .collect(),
        None => io::stdin()
            .lock()
            .lines()
            .collect::<io::Result<_>>()
            .map_err(|e| Error::io("<stdin>", e))?,
    };
    let sentences: Vec<Vec<String>> = lines
        .iter()
        .map(|l| whitespace_tokenize(l))
        .filter(|t| !t.is_empty())
        .collect();
    let pred = trainer::predict(&model, &sentences, &vocab, a.exec)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    // sentence index, first and last token index, phrase
    for (i, (toks, labels)) in sentences.iter().zip(&pred).enumerate() {
        for span in decode_bio(labels) {
            let phrase = toks[span.start..=span.end].join(" ");
            writeln!(out, "{i}\t{}\t{}\t{phrase}", span.start, span.end).map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    Ok(0)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let results = gradcheck::run_suite(&a.ops, a.include_broken, a.seed)?;
    let mut ok = true;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAILED" };
        ok &= r.passed();
        println!("{:<12}\t{:.3e}\t{:>6} coords\t{verdict}", r.name, r.max_rel_error, r.coordinates);
    }
    if !ok {
        eprintln!("gradient check failed (tolerance {:e})", gradcheck::TOLERANCE);
    }
    Ok(if ok { 0 } else { 1 })
}

fn cmd_export(a: &ExportArgs) -> Result<i32> {
    let mut out = String::from("run,epoch,step,phase,train_loss,val_loss,val_f1,test_f1,step_end\n");
    for path in &a.curves {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let log = parse_curves(&text)?;
        let run = path
            .parent()
            .and_then(Path::file_name)
            .unwrap_or(path.as_os_str())
            .to_string_lossy();
        for r in &log.records {
            let end = log.markers.iter().any(|m| m.last_epoch == r.epoch);
            let test = r.test_f1.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{run},{},{},{},{},{},{},{test},{}\n",
                r.epoch,
                r.step,
                r.phase,
                r.train_loss,
                r.val_loss,
                r.val_f1,
                u8::from(end)
            ));
        }
    }
    write_file(&a.out, out)?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_lines_become_flags() {
        let args = config_args("# c\nseed=7\nlr_step1 = 0.1\n\n", Path::new("c")).unwrap();
        assert_eq!(args, vec![OsString::from("--seed=7"), OsString::from("--lr-step1=0.1")]);
        assert!(config_args("seed 7", Path::new("c")).is_err());
    }

    #[test]
    fn explicit_flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        fs::write(&cfg, "seed=3\ntrain=a.txt\nemb-general=g\nemb-domain=d\n").unwrap();
        let args: Vec<OsString> = ["ctrl-cnn", "train", "--seed", "9", "--config"]
            .iter()
            .map(OsString::from)
            .chain([cfg.into_os_string()])
            .collect();
        let cli = Cli::try_parse_from(splice_config(args).unwrap()).unwrap();
        let Command::Train(t) = cli.command else { panic!() };
        assert_eq!(t.seed, 9);
        assert_eq!(t.train, PathBuf::from("a.txt"));
    }
}

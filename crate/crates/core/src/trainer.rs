//! Training loops: the alternating freeze/tune schedule, single-phase
//! synchronous training, best-validation bookkeeping and curve export.
//!
//! Every phase starts from the best model seen so far, evaluates it once
//! before any update, and afterwards keeps the best model by the configured
//! validation metric. The alternating schedule runs Step 1 (CNN only) and
//! Step 2 (control modules and output layer) in turn until the global best
//! has not improved for `global_patience` consecutive phases.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint;
use crate::data::{make_batches, Batch, Label, TaggedSentence, Vocab};
use crate::error::{Error, Result};
use crate::eval::label_prf;
use crate::layers::{Group, GroupSet};
use crate::model::{Model, Variant};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::parallel::{self, Execution};
use crate::seed;
use crate::tensor::{softmax_cross_entropy, Mode, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Async,
    Sync,
    FrozenCnn,
}

impl TrainMode {
    /// Training schedule each model variant is defined with.
    pub fn for_variant(v: Variant) -> TrainMode {
        match v {
            Variant::Ctrl | Variant::Dan => TrainMode::Async,
            Variant::CtrlMinusMinus | Variant::DanMinusMinus => TrainMode::FrozenCnn,
            Variant::DeCnn | Variant::CtrlMinus | Variant::DanMinus => TrainMode::Sync,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Async => "async",
            TrainMode::Sync => "sync",
            TrainMode::FrozenCnn => "frozen-cnn",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "async" => Ok(TrainMode::Async),
            "sync" => Ok(TrainMode::Sync),
            "frozen-cnn" | "frozen" => Ok(TrainMode::FrozenCnn),
            _ => Err(Error::Config(format!("unknown training mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    /// Tune the convolutions; control modules and output layer frozen.
    Step1,
    /// Tune control modules and output layer; convolutions frozen.
    Step2,
    /// Tune everything together.
    Sync,
    /// Tune control modules and output layer over fixed random convolutions.
    FrozenCnn,
}

impl Phase {
    pub fn active_groups(self) -> GroupSet {
        match self {
            Phase::Step1 => GroupSet::of(&[Group::Cnn]),
            Phase::Step2 | Phase::FrozenCnn => GroupSet::of(&[Group::Ctrl, Group::Fc]),
            Phase::Sync => GroupSet::of(&[Group::Cnn, Group::Ctrl, Group::Fc]),
        }
    }

    /// Groups guaranteed not to move during the phase.
    pub fn frozen_groups(self) -> Vec<Group> {
        let active = self.active_groups();
        Group::ALL.into_iter().filter(|&g| !active.contains(g)).collect()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Step1 => "step1",
            Phase::Step2 => "step2",
            Phase::Sync => "sync",
            Phase::FrozenCnn => "frozen",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Phase::Step1, Phase::Step2, Phase::Sync, Phase::FrozenCnn]
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown phase `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Loss,
    F1,
}

impl Metric {
    pub fn better(self, candidate: &Score, incumbent: &Score) -> bool {
        match self {
            Metric::Loss => candidate.loss < incumbent.loss,
            Metric::F1 => candidate.f1 > incumbent.f1,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Loss => "loss",
            Metric::F1 => "f1",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "loss" => Ok(Metric::Loss),
            "f1" => Ok(Metric::F1),
            _ => Err(Error::Config(format!("unknown validation metric `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr_step1: f64,
    pub lr_step2: f64,
    pub lr_sync: f64,
    pub batch_size: usize,
    /// Epoch cap of a single phase.
    pub max_epochs: usize,
    /// Non-improving epochs tolerated inside a phase.
    pub patience: usize,
    /// Non-improving phases tolerated by the alternating schedule.
    pub global_patience: usize,
    /// Cap on the number of alternating phases.
    pub max_steps: usize,
    /// Cap on epochs summed over all phases.
    pub max_total_epochs: Option<usize>,
    pub metric: Metric,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub adam: AdamConfig,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Async,
            lr_step1: 0.00005,
            lr_step2: 0.0001,
            lr_sync: 0.0001,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            global_patience: 3,
            max_steps: 40,
            max_total_epochs: None,
            metric: Metric::Loss,
            seed: 0,
            checkpoint_dir: None,
            adam: AdamConfig::default(),
            exec: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.patience == 0 || self.global_patience == 0 {
            return fail("patience values must be at least 1");
        }
        if self.max_epochs == 0 || self.max_steps == 0 || self.batch_size == 0 {
            return fail("max_epochs, max_steps and batch_size must be positive");
        }
        let lrs = [self.lr_step1, self.lr_step2, self.lr_sync];
        if lrs.iter().any(|lr| !lr.is_finite() || *lr < 0.0) {
            return fail("learning rates must be finite and non-negative");
        }
        Ok(())
    }

    pub fn lr(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Step1 => self.lr_step1,
            Phase::Step2 => self.lr_step2,
            Phase::Sync | Phase::FrozenCnn => self.lr_sync,
        }
    }
}

/// Training, validation and optional test sentences with the vocabulary the
/// model's embedding table was built from.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<TaggedSentence>,
    pub validation: Vec<TaggedSentence>,
    pub test: Option<Vec<TaggedSentence>>,
    pub vocab: Vocab,
}

/// Validation-style score of a model on one sentence set.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Score {
    pub loss: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// Global epoch number, 1-based and increasing across phases.
    pub epoch: usize,
    /// Index of the phase (alternation step) this epoch belongs to, 1-based.
    pub step: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1: f64,
    pub test_f1: Option<f64>,
}

/// End-of-phase marker.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMarker {
    pub step: usize,
    pub phase: Phase,
    /// Last global epoch of the phase.
    pub last_epoch: usize,
    /// Validation score before the phase's first update.
    pub start: Score,
    /// Score of the phase-best model.
    pub best: Score,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
    pub markers: Vec<StepMarker>,
}

impl RunLog {
    pub fn epochs(&self) -> usize {
        self.records.len()
    }
}

#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub start: Score,
    pub best: Score,
    pub epochs: usize,
    pub best_snapshot: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Score,
    pub log: RunLog,
    pub phases: usize,
}

/// Loss and chunk F1 of `model` on `sentences`, eval mode.
pub fn evaluate(model: &Model, sentences: &[TaggedSentence], vocab: &Vocab, exec: Execution) -> Result<Score> {
    if sentences.is_empty() {
        return Err(Error::Degenerate("cannot evaluate on an empty set".into()));
    }
    let per = parallel::map_ordered(sentences, exec, |_, s| -> Result<(f64, Vec<Label>)> {
        let ids = vocab.encode(&s.tokens);
        let (logits, _) = model.forward_sentence(&ids, Mode::Eval, &mut seed::rng(0))?;
        let labels: Vec<usize> = s.labels.iter().map(|l| l.id()).collect();
        let (loss, _) = softmax_cross_entropy(&logits, &labels, &vec![1; ids.len()])?;
        let pred = argmax_labels(&logits);
        Ok((loss * ids.len() as f64, pred))
    });
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(sentences.len());
    for r in per {
        let (l, p) = r?;
        total += l;
        preds.push(p);
    }
    let tokens: usize = sentences.iter().map(TaggedSentence::len).sum();
    let gold: Vec<Vec<Label>> = sentences.iter().map(|s| s.labels.clone()).collect();
    let prf = label_prf(&gold, &preds)?;
    Ok(Score {
        loss: total / tokens as f64,
        f1: prf.f1,
    })
}

pub(crate) fn argmax_labels(logits: &Tensor) -> Vec<Label> {
    let cols = logits.shape()[1];
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            Label::from_id(best).unwrap_or(Label::O)
        })
        .collect()
}

/// Predicted labels for each sentence, eval mode.
pub fn predict(model: &Model, sentences: &[Vec<String>], vocab: &Vocab, exec: Execution) -> Result<Vec<Vec<Label>>> {
    parallel::map_ordered(sentences, exec, |_, toks| {
        let ids = vocab.encode(toks);
        model
            .forward_sentence(&ids, Mode::Eval, &mut seed::rng(0))
            .map(|(l, _)| argmax_labels(&l))
    })
    .into_iter()
    .collect()
}

fn check_data(data: &TrainData) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    if data.validation.is_empty() {
        return Err(Error::Config("validation data is empty".into()));
    }
    Ok(())
}

/// Trains one phase starting from the current model state. On return the
/// model holds the phase-best parameters (possibly the starting ones).
pub fn run_phase(
    model: &mut Model,
    data: &TrainData,
    phase: Phase,
    config: &TrainConfig,
    log: &mut RunLog,
) -> Result<PhaseOutcome> {
    config.validate()?;
    check_data(data)?;
    let exec = config.exec;
    let step = log.markers.len() + 1;
    let active = phase.active_groups();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.lr(phase),
            ..config.adam
        },
        model.params().len(),
    );
    let eval_test = |m: &Model| -> Result<Option<f64>> {
        data.test
            .as_ref()
            .map(|t| evaluate(m, t, &data.vocab, exec).map(|s| s.f1))
            .transpose()
    };

    let start = evaluate(model, &data.validation, &data.vocab, exec)?;
    let mut best = start;
    let mut best_snapshot = model.snapshot();
    let mut stale = 0;
    let mut epochs = 0;
    for _ in 0..config.max_epochs {
        if config.max_total_epochs.is_some_and(|cap| log.epochs() >= cap) {
            break;
        }
        let epoch = log.epochs() + 1;
        let batches: Vec<Batch> = make_batches(
            &data.train,
            &data.vocab,
            config.batch_size,
            Some(seed::derive(config.seed, &[epoch as u64, 1])),
        );
        let mut loss_sum = 0.0;
        let mut tokens = 0;
        for (bi, batch) in batches.iter().enumerate() {
            let dropout_seed = seed::derive(config.seed, &[epoch as u64, 2, bi as u64]);
            let (loss, grads) = model.batch_loss(batch, Mode::Train, dropout_seed, Some(active), exec)?;
            let grads = grads.expect("gradients requested");
            adam_step(&mut model.params_mut(), &grads, &mut adam, active)?;
            loss_sum += loss * batch.tokens() as f64;
            tokens += batch.tokens();
        }
        let val = evaluate(model, &data.validation, &data.vocab, exec)?;
        let test_f1 = eval_test(model)?;
        log.records.push(EpochRecord {
            epoch,
            step,
            phase,
            train_loss: loss_sum / tokens as f64,
            val_loss: val.loss,
            val_f1: val.f1,
            test_f1,
        });
        epochs += 1;
        log::debug!(
            "epoch {epoch} [{phase}] train {:.5} val {:.5} f1 {:.4}",
            loss_sum / tokens as f64,
            val.loss,
            val.f1
        );
        if config.metric.better(&val, &best) {
            best = val;
            best_snapshot = model.snapshot();
            stale = 0;
            if let Some(dir) = &config.checkpoint_dir {
                let path = dir.join(format!("step{step:02}-{phase}-epoch{epoch:04}.ckpt"));
                checkpoint::save(&path, model, &data.vocab)?;
            }
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    model.restore(&best_snapshot)?;
    log.markers.push(StepMarker {
        step,
        phase,
        last_epoch: log.epochs(),
        start,
        best,
    });
    log::info!(
        "step {step} [{phase}] {epochs} epochs, val loss {:.5} -> {:.5}, f1 {:.4} -> {:.4}",
        start.loss,
        best.loss,
        start.f1,
        best.f1
    );
    Ok(PhaseOutcome {
        start,
        best,
        epochs,
        best_snapshot,
    })
}

fn epochs_exhausted(config: &TrainConfig, log: &RunLog) -> bool {
    config.max_total_epochs.is_some_and(|cap| log.epochs() >= cap)
}

/// Alternates Step 1 and Step 2 phases, each restarted from the global best,
/// until the global best fails to improve for `global_patience` phases in a
/// row. The model ends at the global best.
pub fn async_train(model: &mut Model, data: &TrainData, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    check_data(data)?;
    let mut log = RunLog::default();
    let mut global: Option<(Score, Vec<Tensor>)> = None;
    let mut stale = 0;
    let mut phases = 0;
    while phases < config.max_steps && !epochs_exhausted(config, &log) {
        let phase = if phases % 2 == 0 { Phase::Step1 } else { Phase::Step2 };
        if let Some((_, snap)) = &global {
            model.restore(snap)?;
        }
        let out = run_phase(model, data, phase, config, &mut log)?;
        phases += 1;
        let improved = match &global {
            None => {
                // the first phase's starting model is the incumbent
                config.metric.better(&out.best, &out.start)
            }
            Some((g, _)) => config.metric.better(&out.best, g),
        };
        if improved || global.is_none() {
            global = Some((out.best, out.best_snapshot));
        }
        if improved {
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.global_patience {
                break;
            }
        }
    }
    let (best, snap) = global.expect("at least one phase ran");
    model.restore(&snap)?;
    Ok(TrainOutcome { best, log, phases })
}

/// Single-phase training: all groups together (`Sync`) or everything except
/// the convolutions (`FrozenCnn`).
pub fn sync_train(model: &mut Model, data: &TrainData, config: &TrainConfig) -> Result<TrainOutcome> {
    let phase = match config.mode {
        TrainMode::FrozenCnn => Phase::FrozenCnn,
        TrainMode::Sync => Phase::Sync,
        TrainMode::Async => {
            return Err(Error::Config("sync_train needs mode sync or frozen-cnn".into()))
        }
    };
    let mut log = RunLog::default();
    let out = run_phase(model, data, phase, config, &mut log)?;
    Ok(TrainOutcome {
        best: out.best,
        log,
        phases: 1,
    })
}

pub fn train(model: &mut Model, data: &TrainData, config: &TrainConfig) -> Result<TrainOutcome> {
    match config.mode {
        TrainMode::Async => async_train(model, data, config),
        TrainMode::Sync | TrainMode::FrozenCnn => sync_train(model, data, config),
    }
}

const CURVE_HEADER: &str = "epoch\tstep\tphase\ttrain_loss\tval_loss\tval_f1\ttest_f1";
const MARKER_TAG: &str = "# step_end";

/// Tab-separated curve file: a header, one row per epoch, and after each
/// phase's last epoch a `# step_end` line carrying the marker fields.
pub fn curves_text(log: &RunLog) -> String {
    let mut out = String::new();
    out.push_str(CURVE_HEADER);
    out.push('\n');
    let mut markers = log.markers.iter().peekable();
    let mut emit_markers = |out: &mut String, upto: usize| {
        while let Some(m) = markers.next_if(|m| m.last_epoch <= upto) {
            out.push_str(&format!(
                "{MARKER_TAG}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                m.step, m.phase, m.last_epoch, m.start.loss, m.start.f1, m.best.loss, m.best.f1
            ));
        }
    };
    emit_markers(&mut out, 0);
    for r in &log.records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.epoch,
            r.step,
            r.phase,
            r.train_loss,
            r.val_loss,
            r.val_f1,
            r.test_f1.map(|v| v.to_string()).unwrap_or_default()
        ));
        emit_markers(&mut out, r.epoch);
    }
    emit_markers(&mut out, usize::MAX);
    out
}

pub fn export_curves(log: &RunLog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if log.records.is_empty() {
        return Err(Error::Degenerate("run log has no epochs".into()));
    }
    fs::write(path, curves_text(log)).map_err(|e| Error::io(path, e))
}

/// Inverse of [`curves_text`].
pub fn parse_curves(text: &str) -> Result<RunLog> {
    let origin = Path::new("<curves>");
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut log = RunLog::default();
    for (n, line) in text.lines().enumerate() {
        let ln = n + 1;
        if line.is_empty() || line == CURVE_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(ln, format!("bad number `{s}`")));
        let int = |s: &str| s.parse::<usize>().map_err(|_| err(ln, format!("bad integer `{s}`")));
        if f[0] == MARKER_TAG {
            if f.len() != 8 {
                return Err(err(ln, "marker needs 8 fields".into()));
            }
            log.markers.push(StepMarker {
                step: int(f[1])?,
                phase: f[2].parse()?,
                last_epoch: int(f[3])?,
                start: Score {
                    loss: num(f[4])?,
                    f1: num(f[5])?,
                },
                best: Score {
                    loss: num(f[6])?,
                    f1: num(f[7])?,
                },
            });
        } else {
            if f.len() != 7 {
                return Err(err(ln, format!("expected 7 fields, found {}", f.len())));
            }
            log.records.push(EpochRecord {
                epoch: int(f[0])?,
                step: int(f[1])?,
                phase: f[2].parse()?,
                train_loss: num(f[3])?,
                val_loss: num(f[4])?,
                val_f1: num(f[5])?,
                test_f1: if f[6].is_empty() { None } else { Some(num(f[6])?) },
            });
        }
    }
    Ok(log)
}

//! Training runs: configuration, the optimisation loop with per-epoch
//! validation, best-epoch selection, and test-set evaluation.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, Instance, Split, Vocabulary, ANNOTATIONS};
use crate::decoder::TokenSequence;
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::maskguide::{diff_cd_baseline, ChangeMask, CoarseMask};
use crate::metrics::{bleu, evaluate, tokenize, EvalInstance, MetricReport};
use crate::model::{CaptionModel, EncoderInput};
use crate::numerics::{accumulate_grads, rng_stream, AdamConfig, AdamState, Binder, Params, Tape, Tensor};
use crate::raster::BinaryMask;

/// Where the change mask for each pair comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    /// The dataset's own mask.
    Oracle,
    /// `diff_cd_baseline` on the image pair.
    Baseline,
    /// All ones: no guidance.
    None,
    /// `{mask_dir}/{id}.pgm`, at image or token-grid resolution.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mask_source: MaskSource,
    pub mask_dir: Option<PathBuf>,
    pub baseline_threshold: f64,
    pub baseline_min_blob: usize,
    pub min_word_freq: usize,
    /// Directory holding `annotations.jsonl`; image paths are relative to it.
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub report: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            lr: 3e-4,
            epochs: 20,
            batch_size: 16,
            seed: 0,
            mask_source: MaskSource::Oracle,
            mask_dir: None,
            baseline_threshold: 0.2,
            baseline_min_blob: 8,
            min_word_freq: 1,
            dataset: PathBuf::new(),
            checkpoint: PathBuf::from("model.ckpt"),
            log: PathBuf::from("train_log.jsonl"),
            report: PathBuf::from("report.json"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    /// Checks values and that every input path exists.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        let ann = self.dataset.join(ANNOTATIONS);
        if !ann.is_file() {
            return Err(Error::Config(format!("no annotation file at {}", ann.display())));
        }
        if self.mask_source == MaskSource::File {
            match &self.mask_dir {
                Some(d) if d.is_dir() => {}
                Some(d) => return Err(Error::Config(format!("mask_dir {} does not exist", d.display()))),
                None => return Err(Error::Config("mask_source \"file\" needs mask_dir".into())),
            }
        }
        for out in [&self.checkpoint, &self.log, &self.report] {
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                if !parent.is_dir() {
                    return Err(Error::Config(format!("output directory {} does not exist", parent.display())));
                }
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// The change mask `source` assigns to one instance, at any resolution.
pub fn resolve_mask(instance: &Instance, cfg: &RunConfig) -> Result<Option<ChangeMask>> {
    match cfg.mask_source {
        MaskSource::None => Ok(None),
        MaskSource::Oracle => match &instance.pair.mask {
            Some(m) => Ok(Some(m.clone())),
            None => Err(Error::Ingestion(format!("record {}: oracle masks requested but none given", instance.id))),
        },
        MaskSource::Baseline => {
            Ok(Some(diff_cd_baseline(&instance.pair, cfg.baseline_threshold, cfg.baseline_min_blob)))
        }
        MaskSource::File => {
            let dir = cfg.mask_dir.as_ref().ok_or_else(|| Error::Config("mask_dir not set".into()))?;
            BinaryMask::read_pgm(&dir.join(format!("{}.pgm", instance.id)))
                .map(Some)
                .map_err(|e| Error::Ingestion(format!("record {}: {e}", instance.id)))
        }
    }
}

/// An instance reduced to what the training loop touches.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    /// Output of the frozen encoder blocks.
    pub prefix: Tensor,
    pub mask: CoarseMask,
    pub targets: Vec<TokenSequence>,
    pub references: Vec<Vec<String>>,
}

pub fn prepare(
    model: &CaptionModel,
    vocab: &Vocabulary,
    instances: &[Instance],
    cfg: &RunConfig,
) -> Result<Vec<Prepared>> {
    instances
        .iter()
        .map(|inst| {
            let patches = model.patches(&inst.pair)?;
            let mask = model.coarse_mask(resolve_mask(inst, cfg)?.as_ref())?;
            let mut targets = Vec::with_capacity(inst.pair.captions.len());
            for c in &inst.pair.captions {
                let seq = vocab.encode_sequence(c);
                if seq.ids.len() > model.config.max_len {
                    return Err(Error::Ingestion(format!(
                        "record {}: caption of {} tokens exceeds max_len {}",
                        inst.id,
                        seq.ids.len(),
                        model.config.max_len
                    )));
                }
                targets.push(seq);
            }
            Ok(Prepared {
                id: inst.id.clone(),
                prefix: model.frozen_prefix(&patches)?,
                mask,
                targets,
                references: inst.pair.captions.iter().map(|c| tokenize(c)).collect(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_bleu4: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    /// Appends a record; the best epoch moves only on a strictly higher score.
    pub fn push(&mut self, record: EpochRecord) -> bool {
        let better = match self.best() {
            Some(b) => record.val_bleu4 > b.val_bleu4,
            None => true,
        };
        if better {
            self.best_epoch = Some(record.epoch);
        }
        self.epochs.push(record);
        better
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        let e = self.best_epoch?;
        self.epochs.iter().find(|r| r.epoch == e)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.epochs {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }
}

/// Sidecar stored next to a checkpoint so it can be used on its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub vocabulary: Vocabulary,
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn save_trained(model: &CaptionModel, vocab: &Vocabulary, checkpoint: &Path) -> Result<()> {
    model.save(checkpoint)?;
    let meta = CheckpointMeta { model: model.config.clone(), vocabulary: vocab.clone() };
    let path = meta_path(checkpoint);
    std::fs::write(&path, serde_json::to_string_pretty(&meta).expect("meta serializes"))
        .map_err(|e| Error::io(&path, e))
}

pub fn load_trained(checkpoint: &Path) -> Result<(CaptionModel, Vocabulary)> {
    let path = meta_path(checkpoint);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::Version(format!("{}: {e}", path.display())))?;
    if meta.vocabulary.len() != meta.model.vocab_size {
        return Err(Error::Version(format!(
            "vocabulary of {} words for a model with vocab_size {}",
            meta.vocabulary.len(),
            meta.model.vocab_size
        )));
    }
    Ok((CaptionModel::load(meta.model, checkpoint)?, meta.vocabulary))
}

/// Greedy captions for prepared instances.
pub fn decode_all(model: &CaptionModel, vocab: &Vocabulary, items: &[Prepared]) -> Result<Vec<String>> {
    items
        .iter()
        .map(|p| Ok(vocab.decode(model.greedy_decode(EncoderInput::Prefix(&p.prefix), &p.mask)?.words())))
        .collect()
}

pub fn corpus_of(candidates: &[String], items: &[Prepared]) -> Vec<EvalInstance> {
    candidates
        .iter()
        .zip(items)
        .map(|(c, p)| EvalInstance { candidate: tokenize(c), references: p.references.clone() })
        .collect()
}

/// Corpus BLEU-4 (×100) of greedy captions.
pub fn bleu4(model: &CaptionModel, vocab: &Vocabulary, items: &[Prepared]) -> Result<f64> {
    let caps = decode_all(model, vocab, items)?;
    Ok(100.0 * bleu(&corpus_of(&caps, items), 4)?[3])
}

/// Full metric report and the greedy captions behind it.
pub fn evaluate_model(
    model: &CaptionModel,
    vocab: &Vocabulary,
    items: &[Prepared],
) -> Result<(MetricReport, Vec<String>)> {
    let caps = decode_all(model, vocab, items)?;
    Ok((evaluate(&corpus_of(&caps, items))?, caps))
}

pub struct TrainOutcome {
    /// Weights of the best validation epoch.
    pub model: CaptionModel,
    pub vocab: Vocabulary,
    pub log: TrainLog,
    pub final_loss: f64,
}

/// Sum of per-instance gradients for one batch, and the summed loss.
fn batch_grads(model: &CaptionModel, batch: &[(&Prepared, &TokenSequence)]) -> Result<(Vec<Option<Tensor>>, f64)> {
    let mut acc: Vec<Option<Tensor>> = vec![None; model.params.len()];
    let mut total = 0.0;
    for (item, target) in batch {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params);
        let loss =
            model.loss_on_tape(&mut tape, &mut binder, EncoderInput::Prefix(&item.prefix), &item.mask, target)?;
        tape.backward(loss)?;
        total += tape.value(loss).data()[0];
        accumulate_grads(&mut acc, binder.grads(&tape));
    }
    let inv = 1.0 / batch.len() as f64;
    for g in acc.iter_mut().flatten() {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok((acc, total))
}

/// Takes `steps` optimiser steps cycling over `items` in order, one
/// instance per step, always with its first caption.
pub fn fit_steps(model: &mut CaptionModel, items: &[Prepared], steps: usize, adam: AdamConfig) -> Result<Vec<f64>> {
    let mut state = AdamState::new(adam, &model.params);
    let mut losses = Vec::with_capacity(steps);
    for s in 0..steps {
        let item = &items[s % items.len()];
        let (grads, loss) = batch_grads(model, &[(item, &item.targets[0])])?;
        check_loss(loss, 0, s)?;
        state.step(&mut model.params, &grads)?;
        losses.push(loss);
    }
    Ok(losses)
}

fn check_loss(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("loss is {loss} at epoch {epoch}, step {step}")))
    }
}

/// Trains on `train`, selecting the epoch with the best validation BLEU-4
/// (earliest on ties). The vocabulary comes from the training captions.
pub fn train(cfg: &RunConfig, train: &[Instance], val: &[Instance]) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Ingestion("no training instances".into()));
    }
    let captions: Vec<&str> = train.iter().flat_map(|i| i.pair.captions.iter().map(String::as_str)).collect();
    let vocab = Vocabulary::build(&captions, cfg.min_word_freq)?;
    let model_cfg = ModelConfig { vocab_size: vocab.len(), ..cfg.model.clone() };
    let mut model = CaptionModel::new(model_cfg, cfg.seed)?;
    let train_items = prepare(&model, &vocab, train, cfg)?;
    if let Some(p) = train_items.iter().find(|p| p.targets.is_empty()) {
        return Err(Error::Ingestion(format!("record {}: training instance without captions", p.id)));
    }
    let val_items = prepare(&model, &vocab, val, cfg)?;

    let mut state = AdamState::new(cfg.adam(), &model.params);
    let mut order_rng = rng_stream(cfg.seed, "data.order");
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    let mut log = TrainLog::default();
    let mut best_params: Params = model.params.clone();
    let mut final_loss = f64::NAN;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&Prepared, &TokenSequence)> = chunk
                .iter()
                .map(|&i| {
                    let item = &train_items[i];
                    (item, item.targets.choose(&mut order_rng).expect("captions checked non-empty"))
                })
                .collect();
            let (grads, loss) = batch_grads(&model, &batch)?;
            check_loss(loss, epoch, step)?;
            state.step(&mut model.params, &grads).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{m} at epoch {epoch}, step {step}")),
                other => other,
            })?;
            epoch_loss += loss;
        }
        final_loss = epoch_loss / train_items.len() as f64;
        let val_bleu4 = if val_items.is_empty() { 0.0 } else { bleu4(&model, &vocab, &val_items)? };
        log::info!(
            "epoch {epoch}: loss {final_loss:.4}, val BLEU-4 {val_bleu4:.2} ({:.1}s)",
            started.elapsed().as_secs_f64()
        );
        if log.push(EpochRecord { epoch, mean_loss: final_loss, val_bleu4 }) {
            best_params = model.params.clone();
        }
    }
    model.params = best_params;
    Ok(TrainOutcome { model, vocab, log, final_loss })
}

/// `train` followed by test evaluation and all file outputs of a run.
pub fn run(cfg: &RunConfig) -> Result<(TrainOutcome, MetricReport)> {
    cfg.validate()?;
    let ann = cfg.dataset.join(ANNOTATIONS);
    let all = load_dataset(&ann, &cfg.dataset, None)?;
    let pick = |s: Split| all.iter().filter(|i| i.split == s).cloned().collect::<Vec<_>>();
    let (tr, va, te) = (pick(Split::Train), pick(Split::Val), pick(Split::Test));
    let outcome = train(cfg, &tr, &va)?;
    let test_items = prepare(&outcome.model, &outcome.vocab, &te, cfg)?;
    let report = if test_items.is_empty() {
        return Err(Error::Ingestion("no test instances".into()));
    } else {
        evaluate_model(&outcome.model, &outcome.vocab, &test_items)?.0
    };
    save_trained(&outcome.model, &outcome.vocab, &cfg.checkpoint)?;
    write_file(&cfg.log, outcome.log.to_jsonl().as_bytes())?;
    write_file(&cfg.report, report.to_json().as_bytes())?;
    Ok((outcome, report))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

//! The training loop and the three workflows. One step = sample a mixed
//! batch, run forward/backward per instance (in parallel, reduced in batch
//! order so runs are bit-reproducible), then one Adam update under the
//! noam schedule and the current freeze multipliers.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;

use crate::corpus::{SourceData, TaskInstance};
use crate::decode::{greedy_decode, DecodeConfig};
use crate::metrics::{exact_match_hyp, GoldRecord, PredRecord};
use crate::model::{
    save_checkpoint, AtatModel, CheckpointMeta, GradStore, InstanceSource, Scalar,
};
use crate::text::{BpeModel, TaskKind};
use crate::util::{derive_seed, rng_from_seed};

use super::{noam_lr, sample_batch, AdamState, ScheduleConfig, TaskDataset, TrainError};

/// One training-log line: `{step, task, loss, lr}`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossLogEntry {
    pub step: u64,
    pub task: String,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub log: Vec<LossLogEntry>,
    pub final_step: u64,
    pub best_valid_em: Option<f64>,
}

/// Held-out instances scored by hypothesis exact match during training.
pub struct ValidationSet {
    pub instances: Vec<TaskInstance>,
    pub gold: Vec<GoldRecord>,
    pub bpe: BpeModel,
}

pub struct TrainOptions {
    pub seed: u64,
    /// Where periodic/best/final checkpoints go; None keeps everything in
    /// memory.
    pub out_dir: Option<PathBuf>,
    pub validation: Option<ValidationSet>,
}

impl TrainOptions {
    pub fn new(seed: u64) -> Self {
        Self { seed, out_dir: None, validation: None }
    }
}

pub(crate) fn to_source<F: Scalar>(data: &SourceData) -> InstanceSource<F> {
    match data {
        SourceData::Audio(f) => InstanceSource::from_features(f),
        SourceData::Text(ids) => InstanceSource::Text(ids.clone()),
    }
}

/// Greedy-decode hypothesis exact match over a validation set.
pub fn validation_em<F: Scalar>(model: &AtatModel<F>, vs: &ValidationSet) -> Result<f64, TrainError> {
    if vs.instances.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (inst, gold) in vs.instances.iter().zip(&vs.gold) {
        let enc = match &inst.source {
            SourceData::Audio(f) => model.audio_encode(&crate::corpus::feats_to_array(f))?,
            SourceData::Text(ids) => model.text_encode(ids)?,
        };
        let cfg = DecodeConfig { beam_size: 1, max_len: 48, length_penalty: 0.0, task: inst.task.clone() };
        let bos = vs
            .bpe
            .bos_id(&inst.task)
            .ok_or_else(|| TrainError::ConfigMismatch(format!("no BOS for task {}", inst.task.name())))?;
        let hyp = greedy_decode(model, &enc, &cfg, bos)?;
        let text = vs.bpe.decode_target(&hyp.seq.tokens).map_err(crate::corpus::CorpusError::from)?;
        let pred = PredRecord::from_text(inst.id.clone(), text);
        hits += exact_match_hyp(&pred.outcome, &gold.parse) as usize;
    }
    Ok(hits as f64 / vs.instances.len() as f64)
}

enum FreezeMode {
    Off,
    Gradual,
}

fn run_loop<F: Scalar>(
    model: &mut AtatModel<F>,
    datasets: &[TaskDataset],
    cfg: &ScheduleConfig,
    opts: &TrainOptions,
    freeze: FreezeMode,
    trained_tasks: Vec<String>,
) -> Result<TrainArtifacts, TrainError> {
    if datasets.is_empty() {
        return Err(TrainError::EmptyMixture);
    }
    if cfg.d_model != model.cfg().d_model {
        return Err(TrainError::ConfigMismatch(format!(
            "schedule d_model {} does not match model d_model {}",
            cfg.d_model,
            model.cfg().d_model
        )));
    }
    let mut optimizer = AdamState::new(model.store());
    let mut batch_rng = rng_from_seed(derive_seed(opts.seed, "batch"));
    let dropout = model.cfg().dropout;
    let mut log: Vec<LossLogEntry> = Vec::new();
    let mut best: Option<f64> = None;

    for step in 1..=cfg.max_steps {
        match freeze {
            FreezeMode::Off => model.clear_freeze(),
            // 1-based loop step s maps to schedule point s-1, so the first
            // 500 optimizer updates run fully frozen.
            FreezeMode::Gradual => model.set_freeze_multipliers(step - 1),
        }
        let picks = sample_batch(datasets, cfg.batch_size, &mut batch_rng)?;
        let lr = noam_lr(step, cfg);

        let model_ref: &AtatModel<F> = model;
        let results: Result<Vec<(GradStore<F>, f64, String)>, TrainError> = picks
            .par_iter()
            .enumerate()
            .map(|(slot, &(d, i))| {
                let inst = &datasets[d].instances[i];
                let source = to_source::<F>(&inst.source);
                let mut rng_storage;
                let rng = if dropout > 0.0 {
                    rng_storage =
                        rng_from_seed(derive_seed(opts.seed, &format!("drop:{step}:{slot}")));
                    Some(&mut rng_storage)
                } else {
                    None
                };
                let pass =
                    model_ref.forward_instance(&source, &inst.target, cfg.label_smoothing, rng)?;
                let mut grads = model_ref.store().zero_grads();
                model_ref.backward_instance(&pass, &mut grads);
                Ok((grads, pass.loss(), inst.task.name()))
            })
            .collect();
        let results = results?;

        let mut grads = model.store().zero_grads();
        let mut per_task: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (g, loss, task) in &results {
            grads.add_assign(g);
            let e = per_task.entry(task.clone()).or_insert((0.0, 0));
            e.0 += loss;
            e.1 += 1;
        }
        grads.scale(F::from_f64(1.0 / results.len() as f64));

        let batch_loss: f64 =
            results.iter().map(|(_, l, _)| l).sum::<f64>() / results.len() as f64;
        if !batch_loss.is_finite() {
            return Err(TrainError::DivergedLoss { step });
        }
        for (task, (sum, count)) in &per_task {
            log.push(LossLogEntry { step, task: task.clone(), loss: sum / *count as f64, lr });
        }

        optimizer.step(model.store_mut(), &grads, lr, cfg);

        let at_interval = |n: u64| n > 0 && step % n == 0;
        if at_interval(cfg.validate_interval) || (cfg.validate_interval > 0 && step == cfg.max_steps) {
            if let Some(vs) = &opts.validation {
                let em = validation_em(model, vs)?;
                if best.map_or(true, |b| em > b) {
                    best = Some(em);
                    if let Some(dir) = &opts.out_dir {
                        let meta = CheckpointMeta {
                            trained_tasks: trained_tasks.clone(),
                            step,
                            seed: opts.seed,
                        };
                        save_checkpoint(&dir.join("best.ckpt"), model, &meta)?;
                    }
                }
            }
        }
        if at_interval(cfg.checkpoint_interval) {
            if let Some(dir) = &opts.out_dir {
                let meta =
                    CheckpointMeta { trained_tasks: trained_tasks.clone(), step, seed: opts.seed };
                save_checkpoint(&dir.join(format!("step{step:06}.ckpt")), model, &meta)?;
            }
        }
    }

    if let Some(dir) = &opts.out_dir {
        let meta = CheckpointMeta {
            trained_tasks: trained_tasks.clone(),
            step: cfg.max_steps,
            seed: opts.seed,
        };
        save_checkpoint(&dir.join("final.ckpt"), model, &meta)?;
    }
    Ok(TrainArtifacts { log, final_step: cfg.max_steps, best_valid_em: best })
}

fn task_names(datasets: &[TaskDataset]) -> Vec<String> {
    let mut names: Vec<String> = datasets.iter().map(|d| d.task.name()).collect();
    names.sort();
    names.dedup();
    names
}

/// Multi-task pretraining from the model's current (fresh) parameters.
pub fn pretrain<F: Scalar>(
    model: &mut AtatModel<F>,
    datasets: &[TaskDataset],
    cfg: &ScheduleConfig,
    opts: &TrainOptions,
) -> Result<(TrainArtifacts, CheckpointMeta), TrainError> {
    let artifacts = run_loop(model, datasets, cfg, opts, FreezeMode::Off, task_names(datasets))?;
    let meta = CheckpointMeta {
        trained_tasks: task_names(datasets),
        step: artifacts.final_step,
        seed: opts.seed,
    };
    Ok((artifacts, meta))
}

/// Finetune a loaded checkpoint on new datasets. Target tokens beyond the
/// checkpoint's vocabulary get fresh embedding rows (trained at full rate);
/// everything loaded from the checkpoint unfreezes gradually.
pub fn finetune<F: Scalar>(
    model: &mut AtatModel<F>,
    prev_meta: &CheckpointMeta,
    new_vocab_size: usize,
    datasets: &[TaskDataset],
    cfg: &ScheduleConfig,
    opts: &TrainOptions,
) -> Result<(TrainArtifacts, CheckpointMeta), TrainError> {
    if new_vocab_size < model.cfg().vocab_size {
        return Err(TrainError::ConfigMismatch(format!(
            "tokenizer vocab {new_vocab_size} smaller than checkpoint vocab {}",
            model.cfg().vocab_size
        )));
    }
    if new_vocab_size > model.cfg().vocab_size {
        model.grow_vocab(new_vocab_size, derive_seed(opts.seed, "grow-vocab"));
    }
    let artifacts =
        run_loop(model, datasets, cfg, opts, FreezeMode::Gradual, task_names(datasets))?;
    let mut tasks = prev_meta.trained_tasks.clone();
    tasks.extend(task_names(datasets));
    tasks.sort();
    tasks.dedup();
    let meta = CheckpointMeta { trained_tasks: tasks, step: artifacts.final_step, seed: opts.seed };
    Ok((artifacts, meta))
}

/// Zero-shot finetuning: annotated text (NLU) data from the new domain
/// only, optionally mixed with synthetic-audio SLU data. Evaluation then
/// decodes real audio with the SLU task BOS.
pub fn zeroshot_finetune<F: Scalar>(
    model: &mut AtatModel<F>,
    prev_meta: &CheckpointMeta,
    new_vocab_size: usize,
    nlu_text: TaskDataset,
    synthetic_audio: Option<TaskDataset>,
    cfg: &ScheduleConfig,
    opts: &TrainOptions,
) -> Result<(TrainArtifacts, CheckpointMeta), TrainError> {
    if !prev_meta.has_text_task() {
        return Err(TrainError::MissingTextEncoder);
    }
    if !prev_meta.has_audio_task() {
        return Err(TrainError::MissingAudioEncoder);
    }
    if nlu_text.task != TaskKind::Nlu {
        return Err(TrainError::ConfigMismatch(format!(
            "zero-shot finetuning expects an NLU text dataset, got {}",
            nlu_text.task.name()
        )));
    }
    if nlu_text.instances.is_empty() {
        return Err(TrainError::EmptyMixture);
    }
    let mut datasets = vec![nlu_text];
    if let Some(syn) = synthetic_audio {
        datasets.push(syn);
    }
    finetune(model, prev_meta, new_vocab_size, &datasets, cfg, opts)
}

use std::collections::HashSet;

use super::config::StageConfig;
use crate::data::{apply_mask, build_sequence, make_batches, retrieval_text, Image, Sample, Sequence};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, CrossInput, Graph, Model};
use crate::numerics::{adamw_step, AdamState, AdamWConfig};
use crate::objectives::{
    combined_loss, dwa_weights, info_nce, mlm_loss_rows, EpochLog, LossHistory, TaskWeights, Temperature, DWA_TOTAL,
};
use crate::seed;
use crate::vocab::{TokenId, Vocabulary};

/// Which losses a stage optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Masked-token generation only.
    Generation,
    /// Contrastive retrieval only.
    Retrieval,
    /// Both, balanced per epoch by loss-ratio weighting.
    Multitask,
}

/// Trained weights plus the per-epoch log.
#[derive(Debug, Clone)]
pub struct StageResult {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Loss of the very first optimization step, if any step ran.
    pub first_step_loss: Option<f64>,
}

/// Learning rate at `step` (0-based) of `total`: linear warm-up over
/// `warmup` steps, then cosine decay to zero.
pub fn lr_at(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let t = (step - warmup) as f64 / span;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

struct Prepared<'a> {
    samples: Vec<&'a Sample>,
    sequences: Vec<Sequence>,
    retrieval: Vec<Option<Vec<TokenId>>>,
}

fn prepare<'a>(samples: &'a [Sample], vocab: &Vocabulary, cfg: &StageConfig) -> Result<Prepared<'a>> {
    let kept: Vec<&Sample> = samples.iter().filter(|s| cfg.tasks.contains(&s.task)).collect();
    if kept.is_empty() {
        let tasks: Vec<&str> = cfg.tasks.iter().map(|t| t.name()).collect();
        return Err(Error::EmptyDataset(format!(
            "no samples for tasks {}",
            tasks.join(", ")
        )));
    }
    let sequences = kept.iter().map(|s| build_sequence(s, vocab)).collect::<Result<_>>()?;
    let retrieval = kept
        .iter()
        .map(|s| s.retrieval_eligible.then(|| retrieval_text(&s.text, vocab)).transpose())
        .collect::<Result<_>>()?;
    Ok(Prepared {
        samples: kept,
        sequences,
        retrieval,
    })
}

/// Runs one stage from `init` and returns the resulting checkpoint.
/// `on_epoch` sees each epoch's log row as soon as it is complete.
pub fn train_stage(
    init: &Model,
    samples: &[Sample],
    vocab: &Vocabulary,
    cfg: &StageConfig,
    objective: Objective,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<StageResult> {
    cfg.validate()?;
    let prep = prepare(samples, vocab, cfg)?;
    if objective == Objective::Retrieval && prep.retrieval.iter().all(Option::is_none) {
        return Err(Error::EmptyDataset("no retrieval-eligible samples".into()));
    }
    let mut model = init.clone();
    let owned: Vec<Sample> = prep.samples.iter().map(|s| (*s).clone()).collect();
    let steps_per_epoch = owned.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = steps_per_epoch * cfg.warmup_epochs;
    let mut adam = AdamState::default();
    let mut history = LossHistory::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut first_step_loss = None;
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let weights = match objective {
            Objective::Generation => TaskWeights {
                mlm: DWA_TOTAL,
                infonce: 0.0,
            },
            Objective::Retrieval => TaskWeights {
                mlm: 0.0,
                infonce: DWA_TOTAL,
            },
            Objective::Multitask => dwa_weights(&history, epoch, cfg.gamma, DWA_TOTAL)?,
        };
        let batches = make_batches(&owned, cfg.batch_size, seed::mix(cfg.seed, epoch as u64))?;
        let (mut mlm_sum, mut mlm_n, mut nce_sum, mut nce_n) = (0.0, 0usize, 0.0, 0usize);
        for (b, batch) in batches.iter().enumerate() {
            let mut graph = Graph::new(&model);
            let mut mlm = None;
            if objective != Objective::Retrieval {
                let mut rng = seed::substream(seed::mix(cfg.seed, step as u64), "masking");
                let masked: Vec<_> = batch
                    .generation
                    .iter()
                    .map(|&i| apply_mask(&prep.sequences[i], owned[i].task, cfg.p_mask, &mut rng))
                    .collect();
                let inputs: Vec<CrossInput> = batch
                    .generation
                    .iter()
                    .zip(&masked)
                    .map(|(&i, m)| CrossInput {
                        image: &owned[i].image,
                        tokens: &m.tokens,
                    })
                    .collect();
                let rows: Vec<Vec<usize>> = masked.iter().map(|m| m.positions.clone()).collect();
                let targets: Vec<usize> = masked
                    .iter()
                    .flat_map(|m| m.targets.iter().map(|&t| t as usize))
                    .collect();
                let logits = graph.cross_logits(&inputs, &rows)?;
                mlm = Some(mlm_loss_rows(graph.tape(), logits, &targets)?);
            }
            let mut nce = None;
            if objective != Objective::Generation {
                // one pair per image: a second caption of the same image is
                // not a negative
                let mut seen = HashSet::new();
                let pairs: Vec<usize> = batch
                    .retrieval
                    .iter()
                    .copied()
                    .filter(|&i| seen.insert(owned[i].image_id.as_str()))
                    .collect();
                if pairs.len() >= 2 {
                    let images: Vec<&Image> = pairs.iter().map(|&i| &*owned[i].image).collect();
                    let texts: Vec<&[TokenId]> = pairs
                        .iter()
                        .map(|&i| prep.retrieval[i].as_deref().expect("eligible"))
                        .collect();
                    let u = graph.embed_images(&images)?;
                    let v = graph.embed_texts(&texts)?;
                    let lt = graph.log_tau();
                    nce = info_nce(graph.tape(), u, v, Temperature::Learned(lt))?;
                }
            }
            let loss = match (mlm, nce) {
                (Some(m), c) => combined_loss(graph.tape(), m, c, weights)?,
                (None, Some(c)) => graph.tape().scale(c, weights.infonce),
                (None, None) => {
                    step += 1;
                    continue;
                }
            };
            let value = graph.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step: b });
            }
            first_step_loss.get_or_insert(value);
            if let Some(m) = mlm {
                mlm_sum += graph.value(m).item();
                mlm_n += 1;
            }
            if let Some(c) = nce {
                nce_sum += graph.value(c).item();
                nce_n += 1;
            }
            let mut grads = graph.param_grads(loss)?;
            drop(graph);
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, step: b });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            let opt = AdamWConfig {
                lr: lr_at(cfg.learning_rate, step, total, warmup),
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            };
            adamw_step(model.params_mut(), &grads, &mut adam, &opt)?;
            model.clamp_tau();
            step += 1;
        }
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        let row = EpochLog {
            epoch,
            l_mlm: mean(mlm_sum, mlm_n),
            l_infonce: mean(nce_sum, nce_n),
            weights,
        };
        history.push(row.l_mlm, row.l_infonce)?;
        on_epoch(&row);
        log.push(row);
    }
    Ok(StageResult {
        checkpoint: Checkpoint::from_model(&model),
        log,
        first_step_loss,
    })
}

/// Grounding warm-up: masked coordinate prediction only.
pub fn train_stage1_vg(
    init: &Model,
    samples: &[Sample],
    vocab: &Vocabulary,
    cfg: &StageConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<StageResult> {
    let mut cfg = cfg.clone();
    cfg.tasks = vec![crate::data::Task::Grounding];
    train_stage(init, samples, vocab, &cfg, Objective::Generation, on_epoch)
}

/// Contrastive-only training on caption pairs; yields the retrieval-flavored
/// merge operand.
pub fn train_retrieval(
    init: &Model,
    samples: &[Sample],
    vocab: &Vocabulary,
    cfg: &StageConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<StageResult> {
    train_stage(init, samples, vocab, cfg, Objective::Retrieval, on_epoch)
}

/// Joint generation and retrieval training.
pub fn train_stage2_multitask(
    init: &Model,
    samples: &[Sample],
    vocab: &Vocabulary,
    cfg: &StageConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<StageResult> {
    train_stage(init, samples, vocab, cfg, Objective::Multitask, on_epoch)
}

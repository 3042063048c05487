//! Batched reconstruction loss over occluded patches and the
//! pretraining loop: shuffled mini-batches, AdamW with a warmup+cosine
//! schedule, periodic checkpoints and a metrics log.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{adamw_step, lr_at, AdamHyper, OptimizerState};
use super::{stream, mix2, mix3, LossKind, PipelineError, TrainConfig};
use crate::data::{augment, save_checkpoint};
use crate::geometry::{
    chamfer_distance, emd_assignment, fps, knn_group_centralize, occlude, FpsStart, PointCloud,
};
use crate::scalar::Scalar;
use crate::tensor::{Gradients, MatchPair, Tape, Tensor};
use crate::transformer::{BoundModel, ModelConfig, ModelWeights};

// ---------------------------------------------------------------------
// forward loss
// ---------------------------------------------------------------------

/// Reconstruction loss for one cloud: normalise, sample patch seeds,
/// group, occlude, encode the visible patches, decode the full sequence
/// and score the predicted occluded points against the true ones.
fn sample_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &BoundModel<'_, T>,
    cloud: &PointCloud,
    sample_seed: u64,
    tcfg: &TrainConfig,
    mcfg: &ModelConfig,
) -> Result<Tensor<T>, PipelineError> {
    let cloud = cloud.normalized()?;
    if cloud.len() < mcfg.groups {
        return Err(PipelineError::CloudTooSmall {
            points: cloud.len(),
            required: mcfg.groups,
            what: "farthest point sampling",
        });
    }
    if cloud.len() < mcfg.patch_size {
        return Err(PipelineError::CloudTooSmall {
            points: cloud.len(),
            required: mcfg.patch_size,
            what: "nearest-neighbour grouping",
        });
    }

    // Grouping is a deterministic function of the cloud (the same
    // farthest-point walk the feature extractor uses), so a cloud keeps
    // its patch decomposition across epochs; only the occlusion mask is
    // re-drawn.
    let seed_indices = fps(cloud.points(), mcfg.groups, FpsStart::Index(0))?;
    let patches = knn_group_centralize(&cloud, &seed_indices, mcfg.patch_size)?;
    let mask = occlude(
        patches.groups(),
        tcfg.ratio,
        tcfg.strategy,
        &patches.seeds,
        mix2(sample_seed, stream::OCCLUDE),
    )?;
    if mask.occluded().is_empty() {
        return Err(PipelineError::NothingOccluded {
            ratio: tcfg.ratio,
            groups: patches.groups(),
        });
    }
    if mask.visible().is_empty() {
        return Err(PipelineError::NothingVisible {
            ratio: tcfg.ratio,
            groups: patches.groups(),
        });
    }

    let k = patches.patch_points();
    let visible = mask.visible();
    let mut vis_offsets = Vec::with_capacity(visible.len() * k * 3);
    let mut vis_seeds = Vec::with_capacity(visible.len() * 3);
    for &g in visible {
        for p in &patches.patches[g] {
            vis_offsets.extend(p.iter().map(|&c| T::from_f64(c)));
        }
        vis_seeds.extend(patches.seeds[g].iter().map(|&c| T::from_f64(c)));
    }
    let mut all_seeds = Vec::with_capacity(patches.groups() * 3);
    for s in &patches.seeds {
        all_seeds.extend(s.iter().map(|&c| T::from_f64(c)));
    }
    let vis_patches_t = Tensor::from_vec(vec![visible.len(), k, 3], vis_offsets)?;
    let vis_seeds_t = Tensor::from_vec(vec![visible.len(), 3], vis_seeds)?;
    let all_seeds_t = Tensor::from_vec(vec![patches.groups(), 3], all_seeds)?;

    let encoded = model.encode(tape, &vis_patches_t, &vis_seeds_t)?;
    let decoded = model.decode(tape, &encoded, &mask, &all_seeds_t)?;
    let predicted = model.reconstruct(tape, &decoded, &mask, &all_seeds_t)?;

    let occluded = mask.occluded();
    match tcfg.loss {
        LossKind::Chamfer => {
            let mut targets = Vec::with_capacity(occluded.len() * k);
            for &g in occluded {
                for q in patches.absolute_patch(g) {
                    targets.push([T::from_f64(q[0]), T::from_f64(q[1]), T::from_f64(q[2])]);
                }
            }
            Ok(chamfer_distance(tape, &predicted, &targets)?)
        }
        LossKind::Emd => {
            let pred: Vec<[f64; 3]> = predicted
                .data()
                .chunks_exact(3)
                .map(|c| [c[0].to_f64(), c[1].to_f64(), c[2].to_f64()])
                .collect();
            let weight = T::from_f64(1.0 / (occluded.len() * k) as f64);
            let mut pairs = Vec::with_capacity(occluded.len() * k);
            for (rank, &g) in occluded.iter().enumerate() {
                let target = patches.absolute_patch(g);
                let (perm, _) = emd_assignment(&pred[rank * k..(rank + 1) * k], &target)?;
                for (i, &j) in perm.iter().enumerate() {
                    pairs.push(MatchPair {
                        pred_row: rank * k + i,
                        target: [
                            T::from_f64(target[j][0]),
                            T::from_f64(target[j][1]),
                            T::from_f64(target[j][2]),
                        ],
                        weight,
                    });
                }
            }
            Ok(tape.matched_distance(&predicted, pairs)?)
        }
    }
}

/// Mean reconstruction loss over a batch. `seeds[i]` drives the one
/// random choice made for `clouds[i]` (the occlusion mask), so the loss
/// is a pure function of its arguments. Returns the scalar loss tensor
/// (differentiable when `model` is tape-bound) and the per-sample
/// values.
pub fn forward_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &BoundModel<'_, T>,
    clouds: &[PointCloud],
    seeds: &[u64],
    tcfg: &TrainConfig,
    mcfg: &ModelConfig,
) -> Result<(Tensor<T>, Vec<f64>), PipelineError> {
    if clouds.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    if seeds.len() != clouds.len() {
        return Err(PipelineError::SeedCountMismatch {
            got: seeds.len(),
            batch: clouds.len(),
        });
    }
    let mut unit = Vec::with_capacity(clouds.len());
    let mut values = Vec::with_capacity(clouds.len());
    for (cloud, &seed) in clouds.iter().zip(seeds) {
        let loss = sample_loss(tape, model, cloud, seed, tcfg, mcfg)?;
        values.push(loss.scalar()?.to_f64());
        unit.push(tape.reshape(&loss, vec![1])?);
    }
    let refs: Vec<&Tensor<T>> = unit.iter().collect();
    let stacked = tape.concat(&refs, 0)?;
    let mean = tape.mean_reduce(&stacked, 0)?;
    Ok((mean, values))
}

/// Mean loss of frozen weights over a dataset, without recording
/// gradients. `seed_for(i)` supplies the per-sample seed.
pub fn evaluate_loss<T: Scalar>(
    weights: &ModelWeights<T>,
    clouds: &[PointCloud],
    seed_for: impl Fn(usize) -> u64,
    tcfg: &TrainConfig,
    mcfg: &ModelConfig,
) -> Result<f64, PipelineError> {
    if clouds.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let model = weights.frozen();
    let mut tape = Tape::new();
    let mut total = 0.0;
    for (i, cloud) in clouds.iter().enumerate() {
        let loss = sample_loss(&mut tape, &model, cloud, seed_for(i), tcfg, mcfg)?;
        total += loss.scalar()?.to_f64();
    }
    Ok(total / clouds.len() as f64)
}

/// Gradients in parameter-registry order, zero for parameters the loss
/// never touched.
pub fn collect_gradients<T: Scalar>(
    weights: &ModelWeights<T>,
    model: &BoundModel<'_, T>,
    grads: &Gradients<T>,
) -> Result<Vec<Tensor<T>>, PipelineError> {
    let mut out = Vec::with_capacity(weights.len());
    for i in 0..weights.len() {
        match grads.get(model.param(i)) {
            Some(g) => out.push(g.clone()),
            None => out.push(Tensor::zeros(weights.value(i).shape().to_vec())?),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricsSplit {
    Train,
    Val,
}

impl MetricsSplit {
    pub fn name(self) -> &'static str {
        match self {
            MetricsSplit::Train => "train",
            MetricsSplit::Val => "val",
        }
    }
}

/// One metrics row: optimizer step (1-based), epoch (1-based), split,
/// loss, learning rate and wall-clock milliseconds since the run began.
/// Everything except `wall_ms` is a pure function of the configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub split: MetricsSplit,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub fn metrics_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("step,epoch,split,loss,lr,wall_ms\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step,
            r.epoch,
            r.split.name(),
            r.loss,
            r.lr,
            r.wall_ms
        ));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>, PipelineError> {
    let bad = |line: usize, reason: String| PipelineError::MetricsParse { line, reason };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "step,epoch,split,loss,lr,wall_ms" => {}
        Some((_, header)) => {
            return Err(bad(1, format!("unexpected header `{}`", header.trim())));
        }
        None => return Err(bad(1, "empty file".into())),
    }
    let mut records = Vec::new();
    for (ix, line) in lines {
        let line_no = ix + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 6 {
            return Err(bad(line_no, format!("expected 6 fields, found {}", fields.len())));
        }
        let field = |i: usize, what: &str| -> Result<f64, PipelineError> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| bad(line_no, format!("bad {what} `{}`: {e}", fields[i])))
        };
        let split = match fields[2] {
            "train" => MetricsSplit::Train,
            "val" => MetricsSplit::Val,
            other => return Err(bad(line_no, format!("unknown split `{other}`"))),
        };
        records.push(MetricsRecord {
            step: fields[0]
                .parse()
                .map_err(|e| bad(line_no, format!("bad step `{}`: {e}", fields[0])))?,
            epoch: fields[1]
                .parse()
                .map_err(|e| bad(line_no, format!("bad epoch `{}`: {e}", fields[1])))?,
            split,
            loss: field(3, "loss")?,
            lr: field(4, "lr")?,
            wall_ms: fields[5]
                .parse()
                .map_err(|e| bad(line_no, format!("bad wall_ms `{}`: {e}", fields[5])))?,
        });
    }
    Ok(records)
}

// ---------------------------------------------------------------------
// pretraining loop
// ---------------------------------------------------------------------

/// Interval (in epochs) between numbered checkpoints.
pub const CHECKPOINT_EVERY: usize = 10;

#[derive(Debug)]
pub struct PretrainResult {
    pub weights: ModelWeights<f32>,
    pub metrics: Vec<MetricsRecord>,
}

/// Self-supervised pretraining. Training runs in `f32`. Per epoch the
/// training set is reshuffled, each sample is augmented and scored in
/// mini-batches, and one AdamW step is taken per batch. When `val` is
/// non-empty its mean loss (fixed seeds, no augmentation) is logged
/// after every epoch.
///
/// With `out_dir` set, the run writes `initial.oae`, `epoch_NNNN.oae`
/// every [`CHECKPOINT_EVERY`] epochs, `final.oae` and `metrics.csv`. A
/// non-finite loss aborts the run with the previous checkpoints intact.
pub fn pretrain(
    train: &[PointCloud],
    val: &[PointCloud],
    tcfg: &TrainConfig,
    mcfg: &ModelConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainResult, PipelineError> {
    mcfg.validate()?;
    tcfg.validate_for_training(mcfg)?;
    if train.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }

    let mut weights = ModelWeights::<f32>::init(mcfg, super::model_init_seed(tcfg.rng_seed))?;
    let mut state = OptimizerState::new(&weights);
    let started = Instant::now();

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&weights, &dir.join("initial.oae"))?;
    }

    let steps_per_epoch = train.len().div_ceil(tcfg.batch_size) as u64;
    let total_steps = steps_per_epoch * tcfg.epochs as u64;
    let warmup_steps = steps_per_epoch * tcfg.warmup_epochs as u64;

    let mut metrics = Vec::new();
    let mut tape: Tape<f32> = Tape::new();
    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix3(tcfg.rng_seed, stream::SHUFFLE, epoch as u64));
        order.shuffle(&mut rng);

        for batch in order.chunks(tcfg.batch_size) {
            let mut clouds = Vec::with_capacity(batch.len());
            let mut seeds = Vec::with_capacity(batch.len());
            for &ix in batch {
                let aug_seed = mix2(
                    mix3(tcfg.rng_seed, stream::AUGMENT, epoch as u64),
                    ix as u64,
                );
                clouds.push(augment(&train[ix], aug_seed, tcfg.augment).0);
                seeds.push(mix2(
                    mix3(tcfg.rng_seed, stream::SAMPLE, epoch as u64),
                    ix as u64,
                ));
            }

            tape.reset();
            let model = weights.bind(&mut tape);
            let (loss, _) = forward_loss(&mut tape, &model, &clouds, &seeds, tcfg, mcfg)?;
            let loss_value = loss.scalar()?.to_f64();
            if !loss_value.is_finite() {
                return Err(PipelineError::NonFiniteLoss {
                    step: state.step() + 1,
                });
            }
            let grads = tape.backward(&loss)?;
            let grad_list = collect_gradients(&weights, &model, &grads)?;
            let lr = lr_at(tcfg.lr, tcfg.schedule, state.step(), warmup_steps, total_steps);
            adamw_step(
                &mut weights,
                &grad_list,
                &mut state,
                AdamHyper {
                    lr,
                    weight_decay: tcfg.weight_decay,
                },
            )?;
            metrics.push(MetricsRecord {
                step: state.step(),
                epoch: epoch + 1,
                split: MetricsSplit::Train,
                loss: loss_value,
                lr,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }

        if !val.is_empty() {
            let val_loss = evaluate_loss(
                &weights,
                val,
                |i| mix2(mix3(tcfg.rng_seed, stream::VAL, epoch as u64), i as u64),
                tcfg,
                mcfg,
            )?;
            metrics.push(MetricsRecord {
                step: state.step(),
                epoch: epoch + 1,
                split: MetricsSplit::Val,
                loss: val_loss,
                lr: lr_at(tcfg.lr, tcfg.schedule, state.step(), warmup_steps, total_steps),
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }

        if let Some(dir) = out_dir {
            if (epoch + 1) % CHECKPOINT_EVERY == 0 {
                save_checkpoint(&weights, &dir.join(format!("epoch_{:04}.oae", epoch + 1)))?;
            }
        }
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&weights, &dir.join("final.oae"))?;
        std::fs::write(dir.join("metrics.csv"), metrics_to_csv(&metrics))?;
    }
    Ok(PretrainResult { weights, metrics })
}

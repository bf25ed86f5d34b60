//! Joint training loop and evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::Rng as _;

use crate::augment::{affinemix, coloraug, sample_affinemix_params, Sample};
use crate::diagnostics::{inter_channel_correlation, ConfusionMatrix, DepthAccumulator, DepthMetrics};
use crate::error::{Error, Result};
use crate::param::{ParamStore, Role};
use crate::regularize::OrthoRegularizer;
use crate::rng::{derive_seed, rng_for, STREAM_AUGMENT, STREAM_INIT, STREAM_STEPS, STREAM_TRAIN_SCENES, STREAM_VAL_SCENES};
use crate::semisup::{ema_update, pseudo_labels, ssl_loss, TeacherState};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::IGNORE_INDEX;

use super::config::RunConfig;
use super::model::{batch_images, toy_depth_loss, Heads, ToyModel, SHARE_CHANNELS};
use super::scene::{generate_scene, SceneSpec};

const EVAL_BATCH: usize = 8;

/// Training and validation scenes for one run. The first `labeled` training
/// scenes carry labels; the rest are used as unlabeled images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub labeled: usize,
}

fn scenes(config: &RunConfig, stream: u64, n: usize) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| generate_scene(&config.scene, &mut rng_for(config.seed, stream, i as u64)).map(|s| s.sample))
        .collect()
}

/// Training scene `i` of a run with this seed and scene spec.
pub fn training_scene(config: &RunConfig, i: usize) -> Result<Sample> {
    generate_scene(&config.scene, &mut rng_for(config.seed, STREAM_TRAIN_SCENES, i as u64)).map(|s| s.sample)
}

/// The validation split alone.
pub fn validation_scenes(config: &RunConfig) -> Result<Vec<Sample>> {
    scenes(config, STREAM_VAL_SCENES, config.val_scenes)
}

impl Dataset {
    pub fn generate(config: &RunConfig) -> Result<Self> {
        Ok(Dataset {
            spec: config.scene.clone(),
            train: scenes(config, STREAM_TRAIN_SCENES, config.train_scenes)?,
            val: validation_scenes(config)?,
            labeled: config.labeled_count(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub depth: DepthMetrics,
    pub icc_seg: f64,
    pub icc_depth: f64,
    /// Mean affinity matrix over the evaluated images (ccam mode).
    pub affinity: Option<Tensor<f32>>,
}

/// Student predictions on `samples`: mIoU, depth metrics, inter-channel
/// correlation of both decoders' share-point features.
pub fn evaluate(model: &ToyModel, store: &ParamStore<f32>, samples: &[Sample]) -> Result<EvalReport> {
    let first = samples.first().ok_or_else(|| Error::Metric("no evaluation samples".into()))?;
    let (h, w) = (first.height, first.width);
    let mut cm = ConfusionMatrix::new(model.classes)?;
    let mut depth = DepthAccumulator::default();
    let (mut icc_seg, mut icc_depth) = (0.0, 0.0);
    let mut affinity: Option<Vec<f32>> = None;
    let mut batches = 0usize;
    for chunk in samples.chunks(EVAL_BATCH) {
        let mut tape = Tape::<f32>::new();
        let bind = store.bind(&mut tape, |_| true);
        let imgs: Vec<&[f32]> = chunk.iter().map(|s| s.image.as_slice()).collect();
        let x = tape.constant(batch_images(&imgs, h, w)?);
        let out = model.forward(&mut tape, &bind, x, Heads::BOTH)?;
        let logits = tape.value(out.seg_logits.expect("seg head requested"));
        let pred: Vec<u8> = pseudo_labels(logits)?.into_iter().flat_map(|p| p.labels).collect();
        let gt: Vec<u8> = chunk.iter().flat_map(|s| s.labels.iter().copied()).collect();
        cm.accumulate(&pred, &gt, IGNORE_INDEX)?;
        let gt_depth: Vec<f32> = chunk.iter().flat_map(|s| s.depth.iter().copied()).collect();
        depth.add(tape.value(out.depth.expect("depth head requested")).data(), &gt_depth, None)?;
        let n = chunk.len() as f64;
        icc_seg += n * inter_channel_correlation(tape.value(out.seg_features))?;
        icc_depth += n * inter_channel_correlation(tape.value(out.depth_features))?;
        if let Some(a) = out.affinity {
            let m = tape.value(a).data();
            let acc = affinity.get_or_insert_with(|| vec![0.0; m.len()]);
            acc.iter_mut().zip(m).for_each(|(s, v)| *s += v);
        }
        batches += 1;
    }
    let n = samples.len() as f64;
    let affinity = match affinity {
        Some(a) => Some(Tensor::new(&[SHARE_CHANNELS, SHARE_CHANNELS], a.iter().map(|v| v / batches as f32).collect())?),
        None => None,
    };
    Ok(EvalReport {
        per_class: cm.iou(),
        miou: cm.miou()?,
        depth: depth.finish()?,
        icc_seg: icc_seg / n,
        icc_depth: icc_depth / n,
        affinity,
    })
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub eval: EvalReport,
    /// Unweighted orthogonality penalty of the regularized weights.
    pub ortho_penalty: f64,
    /// Mean training loss since the previous row; NaN at step 0.
    pub loss: f64,
}

impl MetricsRecord {
    pub fn csv_header(classes: usize) -> String {
        let mut s = String::from("step,miou");
        for c in 0..classes {
            let _ = write!(s, ",iou_{c}");
        }
        s.push_str(",absrel,sqrel,rmse,a1,a2,a3,icc_seg,icc_depth,ortho_penalty,loss");
        s
    }

    pub fn csv_row(&self) -> String {
        let e = &self.eval;
        let mut s = format!("{},{:.6}", self.step, e.miou);
        for v in &e.per_class {
            match v {
                Some(v) => {
                    let _ = write!(s, ",{v:.6}");
                }
                None => s.push_str(",nan"),
            }
        }
        let d = &e.depth;
        let _ = write!(
            s,
            ",{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            d.absrel, d.sqrel, d.rmse, d.a1, d.a2, d.a3, e.icc_seg, e.icc_depth, self.ortho_penalty, self.loss
        );
        s
    }
}

pub struct TrainOutput {
    pub model: ToyModel,
    pub student: ParamStore<f32>,
    pub teacher: Option<TeacherState<f32>>,
    pub records: Vec<MetricsRecord>,
}

/// Builds the model and its parameters for `config`.
pub fn init_model(config: &RunConfig) -> Result<(ToyModel, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let mut rng = rng_for(config.seed, STREAM_INIT, 0);
    let model = ToyModel::new(&mut store, config.scene.classes(), config.mode, config.ccam_reduction, &mut rng)?;
    Ok((model, store))
}

/// Loss of the unlabeled term alone, with the depth decoder bound as
/// constants so it receives no gradient from this term.
pub fn unlabeled_term(
    tape: &mut Tape<f32>,
    model: &ToyModel,
    store: &ParamStore<f32>,
    images: Tensor<f32>,
) -> Result<(Var, crate::param::Bindings)> {
    let bind = store.bind(tape, |p| p.role == Role::DepthDecoder);
    let x = tape.constant(images);
    let out = model.forward(tape, &bind, x, Heads::SEG)?;
    let logits = out.seg_logits.expect("seg head requested");
    Ok((logits, bind))
}

pub fn train(config: &RunConfig) -> Result<TrainOutput> {
    train_with(config, &mut |_| {})
}

/// Runs the full loop, calling `observe` with each metrics row as it is
/// produced.
pub fn train_with(config: &RunConfig, observe: &mut dyn FnMut(&MetricsRecord)) -> Result<TrainOutput> {
    config.validate()?;
    let data = Dataset::generate(config)?;
    let (model, mut student) = init_model(config)?;
    let movable = config.scene.movable();
    let (h, w) = (config.scene.height, config.scene.width);
    let hw = h * w;
    let b_l = config.batch_size;
    let unlabeled_pool = data.train.len() - data.labeled;
    let b_u = if unlabeled_pool > 0 { config.unlabeled_batch() } else { 0 };
    let mut teacher = if b_u > 0 && config.ssl_teacher { Some(TeacherState::for_segmentation(&student, config.ssl_alpha)?) } else { None };
    let ortho_cfg = config.ortho_config();
    let mut reg = OrthoRegularizer::new(ortho_cfg.clone())?;

    let mut records = Vec::new();
    let record = |step: u64, student: &ParamStore<f32>, reg: &OrthoRegularizer, loss: f64| -> Result<MetricsRecord> {
        Ok(MetricsRecord { step, eval: evaluate(&model, student, &data.val)?, ortho_penalty: reg.penalty(student)?, loss })
    };
    let first = record(0, &student, &reg, f64::NAN)?;
    let mut current_miou = first.eval.miou;
    observe(&first);
    records.push(first);

    let (mut loss_sum, mut loss_n) = (0.0, 0u64);
    for step in 0..config.steps {
        let mut rng = rng_for(config.seed, STREAM_STEPS, step);
        let lab: Vec<&Sample> = (0..b_l).map(|_| &data.train[rng.gen_range(0..data.labeled)]).collect();
        let unl: Vec<&Sample> = (0..b_u).map(|_| &data.train[data.labeled + rng.gen_range(0..unlabeled_pool)]).collect();

        // teacher predictions for the unlabeled images
        let mut mixed_images: Vec<Vec<f32>> = Vec::new();
        let mut mixed_labels: Vec<u8> = Vec::new();
        let mut raw_unlabeled: Vec<Vec<f32>> = unl.iter().map(|s| s.image.clone()).collect();
        if let Some(t) = teacher.as_ref().filter(|_| step >= config.ssl_warmup) {
            let mut ttape = Tape::<f32>::new();
            let tb = t.params.bind(&mut ttape, |_| true);
            let imgs: Vec<&[f32]> = unl.iter().map(|s| s.image.as_slice()).collect();
            let x = ttape.constant(batch_images(&imgs, h, w)?);
            let out = model.forward(&mut ttape, &tb, x, Heads::BOTH)?;
            let pl = pseudo_labels(ttape.value(out.seg_logits.expect("seg head requested")))?;
            let depth = ttape.value(out.depth.expect("depth head requested")).data();
            for (j, s) in unl.iter().enumerate() {
                let sample = Sample {
                    height: h,
                    width: w,
                    image: s.image.clone(),
                    depth: depth[j * hw..(j + 1) * hw].to_vec(),
                    labels: pl[j].labels.clone(),
                    softmax: None,
                };
                let aug_seed = derive_seed(config.seed, STREAM_AUGMENT, step * 64 + j as u64);
                let mixed = if config.affinemix_enabled {
                    match sample_affinemix_params(&sample, &movable, aug_seed) {
                        Ok(p) => affinemix(&sample, &movable, &p)?.sample,
                        Err(Error::NoMovableObject) => sample.clone(),
                        Err(e) => return Err(e),
                    }
                } else {
                    sample.clone()
                };
                if config.coloraug_enabled {
                    let mut crng = rng_for(aug_seed, STREAM_AUGMENT, 1);
                    raw_unlabeled[j] = coloraug(&s.image, &sample.labels, &movable, &mut crng, current_miou)?;
                }
                mixed_images.push(mixed.image);
                mixed_labels.extend_from_slice(&mixed.labels);
            }
        }

        let mut tape = Tape::<f32>::new();
        let bind = student.bind(&mut tape, |_| false);
        // labeled images plus raw unlabeled ones (depth supervision only)
        let mut imgs: Vec<&[f32]> = lab.iter().map(|s| s.image.as_slice()).collect();
        imgs.extend(raw_unlabeled.iter().map(|v| v.as_slice()));
        let mut labels: Vec<u8> = lab.iter().flat_map(|s| s.labels.iter().copied()).collect();
        labels.resize(labels.len() + b_u * hw, IGNORE_INDEX);
        let depth_gt: Vec<f32> = lab.iter().chain(unl.iter()).flat_map(|s| s.depth.iter().copied()).collect();
        let x = tape.constant(batch_images(&imgs, h, w)?);
        let out = model.forward(&mut tape, &bind, x, Heads::BOTH)?;
        let seg1 = out.seg_logits.expect("seg head requested");
        let depth_loss = toy_depth_loss(&mut tape, out.depth.expect("depth head requested"), &depth_gt)?;

        let mut frozen_bind = None;
        let ssl = if !mixed_images.is_empty() {
            let mimgs: Vec<&[f32]> = mixed_images.iter().map(|v| v.as_slice()).collect();
            let (seg2, fb) = unlabeled_term(&mut tape, &model, &student, batch_images(&mimgs, h, w)?)?;
            frozen_bind = Some(fb);
            ssl_loss(&mut tape, (seg1, &labels), Some((seg2, &mixed_labels)), IGNORE_INDEX)?
        } else {
            ssl_loss(&mut tape, (seg1, &labels), None, IGNORE_INDEX)?
        };
        let mut total = tape.add(ssl.loss, depth_loss)?;
        if ortho_cfg.enabled {
            let o = reg.loss(&mut tape, &student, &bind, step)?;
            total = tape.add(total, o.loss)?;
        }
        let loss = tape.value(total).item()? as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: step as usize });
        }
        let grads = tape.backward(total)?;
        student.zero_grads();
        student.accumulate(&grads, &bind)?;
        if let Some(fb) = &frozen_bind {
            student.accumulate(&grads, fb)?;
        }
        let lr = if step >= config.lr_decay_at() { config.lr * 0.1 } else { config.lr };
        let norm = student.grad_norm();
        let lr = if config.grad_clip > 0.0 && norm > config.grad_clip { lr * config.grad_clip / norm } else { lr };
        student.sgd_step(lr as f32).map_err(|_| Error::Diverged { step: step as usize })?;
        if let Some(t) = &mut teacher {
            ema_update(t, &student)?;
        }
        loss_sum += loss;
        loss_n += 1;

        let done = step + 1;
        if done % config.eval_every == 0 || done == config.steps {
            let r = record(done, &student, &reg, loss_sum / loss_n as f64)?;
            current_miou = r.eval.miou;
            observe(&r);
            records.push(r);
            loss_sum = 0.0;
            loss_n = 0;
        }
    }
    Ok(TrainOutput { model, student, teacher, records })
}

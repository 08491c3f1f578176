//! Mini-batch training for [`VulnModel`]: focal-weighted classification
//! plus λ-weighted localization regression, optimized with Adam.
//!
//! The two loss terms are normalized separately inside each batch, because
//! they cover different sample subsets: every labeled sample has a class
//! target, but binary-vulnerable samples carry no 10-way class (loss masks
//! them out of the focal term) and non-vulnerable samples carry no range
//! (masked out of the localization term). Gradients stream one sample at a
//! time — each forward graph is seeded with its share of the batch
//! normalization, backpropagated, accumulated, and dropped.
//!
//! The model keeps the parameters of its best epoch — lowest validation
//! loss, or lowest training loss when the split has no validation set —
//! rather than whatever the last step produced.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{CodeFunction, Corpus, CorpusSplit};
use crate::error::{Error, Result};
use crate::metrics::iou_1d;

use super::loss::{focal_grad_wrt_logits, focal_loss, loc_grad, loc_loss, softmax, FocalParams};
use super::{ForwardOpts, PreparedFunction, VulnModel};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Decouples the shuffle stream from parameter initialization, which
/// consumes the raw encoder seed.
const SHUFFLE_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of the localization term in the combined loss.
    pub lambda_loc: f64,
    pub focal: FocalParams,
}

impl Default for TrainParams {
    fn default() -> TrainParams {
        TrainParams {
            epochs: 50,
            lr: 1e-3,
            batch_size: 8,
            lambda_loc: 1.0,
            focal: FocalParams::default(),
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be ≥ 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be ≥ 1"));
        }
        if !(self.lambda_loc.is_finite() && self.lambda_loc >= 0.0) {
            return Err(Error::invalid(format!(
                "lambda_loc must be ≥ 0 and finite, got {}",
                self.lambda_loc
            )));
        }
        self.focal.validate()
    }
}

/// Loss and accuracy snapshot after one epoch. Focal and localization
/// means are per-participating-sample over the whole epoch; `train_loss`
/// is `train_focal + λ·train_loc`. Accuracy counts argmax hits among
/// classifiable samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_focal: f64,
    pub train_loc: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// The full training record: one [`EpochStats`] per epoch, which epoch the
/// model kept, and the kept model's quality on its own training set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub final_train_accuracy: f64,
    /// Mean IoU over ranged training labels, absent when none carry one.
    pub final_train_mean_iou: Option<f64>,
}

struct Sample {
    prepared: PreparedFunction,
    /// Head index of the class target; `None` for binary-vulnerable
    /// labels, which have no 10-way ground truth.
    head_class: Option<usize>,
    /// Localization target in bucket-center coordinates, `None` when the
    /// label has no line range.
    loc01: Option<(f64, f64)>,
}

fn collect_samples(model: &VulnModel, corpus: &Corpus, ids: &[String]) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let function = corpus
            .get(id)
            .ok_or_else(|| Error::invalid(format!("split references unknown id {id}")))?;
        let label = function.label.ok_or_else(|| {
            Error::invalid(format!("function {id} is unlabeled; training requires labels"))
        })?;
        let prepared = model.prepare(function)?;
        let lines = prepared.line_count as f64;
        let loc01 = label.range().map(|r| {
            (
                (r.start() as f64 - 0.5) / lines,
                (r.end() as f64 - 0.5) / lines,
            )
        });
        out.push(Sample {
            prepared,
            head_class: label.class().head_index(),
            loc01,
        });
    }
    Ok(out)
}

struct PassTotals {
    focal_sum: f64,
    focal_n: usize,
    loc_sum: f64,
    loc_n: usize,
    hits: usize,
}

impl PassTotals {
    fn new() -> PassTotals {
        PassTotals {
            focal_sum: 0.0,
            focal_n: 0,
            loc_sum: 0.0,
            loc_n: 0,
            hits: 0,
        }
    }

    fn focal_mean(&self) -> f64 {
        if self.focal_n == 0 {
            0.0
        } else {
            self.focal_sum / self.focal_n as f64
        }
    }

    fn loc_mean(&self) -> f64 {
        if self.loc_n == 0 {
            0.0
        } else {
            self.loc_sum / self.loc_n as f64
        }
    }

    fn loss(&self, lambda: f64) -> f64 {
        self.focal_mean() + lambda * self.loc_mean()
    }

    fn accuracy(&self) -> f64 {
        if self.focal_n == 0 {
            0.0
        } else {
            self.hits as f64 / self.focal_n as f64
        }
    }
}

/// Forward-only scoring of one sample; records losses and the argmax hit.
fn score_sample(
    model: &VulnModel,
    sample: &Sample,
    params: &TrainParams,
    totals: &mut PassTotals,
) -> Result<()> {
    let fg = model.build_forward(&sample.prepared, &ForwardOpts::default())?;
    let logits: Vec<f64> = fg.graph.value(fg.logits).row(0).to_vec();
    let probs = softmax(&logits);
    if let Some(target) = sample.head_class {
        totals.focal_sum += focal_loss(&probs, target, &params.focal)?;
        totals.focal_n += 1;
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if argmax == target {
            totals.hits += 1;
        }
    }
    if let Some(truth) = sample.loc01 {
        let v = fg.graph.value(fg.loc01);
        totals.loc_sum += loc_loss((v[[0, 0]], v[[0, 1]]), truth);
        totals.loc_n += 1;
    }
    Ok(())
}

/// Trains `model` in place on the split's training set and returns the
/// per-epoch history. The training set must contain at least one
/// vulnerable and one non-vulnerable sample; every referenced function
/// must be labeled. Non-finite batch loss — or any forward failure once
/// optimization has begun — surfaces as [`Error::Diverged`] naming the
/// epoch and batch.
pub fn train(
    model: &mut VulnModel,
    corpus: &Corpus,
    split: &CorpusSplit,
    params: &TrainParams,
) -> Result<TrainHistory> {
    params.validate()?;
    split.validate(corpus)?;
    if split.train_ids.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }

    let train_samples = collect_samples(model, corpus, &split.train_ids)?;
    let val_samples = collect_samples(model, corpus, &split.val_ids)?;

    let has_vulnerable = train_samples
        .iter()
        .any(|s| s.head_class != Some(0));
    let has_clean = train_samples.iter().any(|s| s.head_class == Some(0));
    if !has_vulnerable || !has_clean {
        return Err(Error::invalid(
            "training needs at least one vulnerable and one non-vulnerable sample",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(model.config().encoder.seed ^ SHUFFLE_SEED_SALT);
    let n_params = model.params().len();
    let mut adam_m: Vec<Option<Array2<f64>>> = vec![None; n_params];
    let mut adam_v: Vec<Option<Array2<f64>>> = vec![None; n_params];
    let mut step = 0u32;

    let diverged = |epoch: usize, batch: usize| {
        move |e: Error| Error::Diverged {
            epoch,
            batch,
            detail: e.to_string(),
        }
    };

    let mut history = Vec::with_capacity(params.epochs);
    let mut best: Option<(f64, usize, super::ParamSet)> = None;

    for epoch in 1..=params.epochs {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut rng);
        let mut totals = PassTotals::new();

        for (batch_idx, batch) in order.chunks(params.batch_size).enumerate() {
            let n_cls = batch
                .iter()
                .filter(|&&si| train_samples[si].head_class.is_some())
                .count();
            let n_loc = batch
                .iter()
                .filter(|&&si| train_samples[si].loc01.is_some())
                .count();
            let mut grads: Vec<Option<Array2<f64>>> = vec![None; n_params];
            let mut batch_totals = PassTotals::new();

            for &si in batch {
                let sample = &train_samples[si];
                let mut fg = model
                    .build_forward(&sample.prepared, &ForwardOpts::default())
                    .map_err(diverged(epoch, batch_idx))?;
                let logits: Vec<f64> = fg.graph.value(fg.logits).row(0).to_vec();
                let probs = softmax(&logits);
                let mut seeds = Vec::new();

                if let Some(target) = sample.head_class {
                    let loss = focal_loss(&probs, target, &params.focal)
                        .map_err(diverged(epoch, batch_idx))?;
                    batch_totals.focal_sum += loss;
                    batch_totals.focal_n += 1;
                    let argmax = probs
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                        .map(|(i, _)| i)
                        .unwrap_or(0);
                    if argmax == target {
                        batch_totals.hits += 1;
                    }
                    let g = focal_grad_wrt_logits(&probs, target, &params.focal)
                        .map_err(diverged(epoch, batch_idx))?;
                    let mut seed = Array2::zeros((1, g.len()));
                    for (j, v) in g.iter().enumerate() {
                        seed[[0, j]] = v / n_cls as f64;
                    }
                    seeds.push((fg.logits, seed));
                }
                if let Some(truth) = sample.loc01 {
                    let v = fg.graph.value(fg.loc01);
                    let pred = (v[[0, 0]], v[[0, 1]]);
                    batch_totals.loc_sum += loc_loss(pred, truth);
                    batch_totals.loc_n += 1;
                    let (gs, ge) = loc_grad(pred, truth);
                    let scale = params.lambda_loc / n_loc as f64;
                    let seed =
                        Array2::from_shape_vec((1, 2), vec![gs * scale, ge * scale])
                            .expect("2-element row");
                    seeds.push((fg.loc01, seed));
                }
                if seeds.is_empty() {
                    continue;
                }
                fg.graph.backward(&seeds);
                for &(pidx, node) in &fg.param_nodes {
                    if let Some(g) = fg.graph.grad(node) {
                        match &mut grads[pidx] {
                            Some(acc) => *acc += g,
                            slot => *slot = Some(g.clone()),
                        }
                    }
                }
            }

            let batch_loss = batch_totals.loss(params.lambda_loc);
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    detail: format!("batch loss is {batch_loss}"),
                });
            }
            totals.focal_sum += batch_totals.focal_sum;
            totals.focal_n += batch_totals.focal_n;
            totals.loc_sum += batch_totals.loc_sum;
            totals.loc_n += batch_totals.loc_n;
            totals.hits += batch_totals.hits;

            step += 1;
            let bias1 = 1.0 - ADAM_BETA1.powi(step as i32);
            let bias2 = 1.0 - ADAM_BETA2.powi(step as i32);
            for pidx in 0..n_params {
                let Some(g) = &grads[pidx] else { continue };
                let m = adam_m[pidx].get_or_insert_with(|| Array2::zeros(g.dim()));
                let v = adam_v[pidx].get_or_insert_with(|| Array2::zeros(g.dim()));
                m.zip_mut_with(g, |m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
                v.zip_mut_with(g, |v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
                let param = model.params_mut().value_at_mut(pidx);
                for ((p, &m), &v) in param.iter_mut().zip(m.iter()).zip(v.iter()) {
                    let m_hat = m / bias1;
                    let v_hat = v / bias2;
                    *p -= params.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }

        let (val_loss, val_accuracy) = if val_samples.is_empty() {
            (None, None)
        } else {
            let mut vt = PassTotals::new();
            for sample in &val_samples {
                score_sample(model, sample, params, &mut vt)
                    .map_err(diverged(epoch, usize::MAX))?;
            }
            (Some(vt.loss(params.lambda_loc)), Some(vt.accuracy()))
        };

        let stats = EpochStats {
            epoch,
            train_loss: totals.loss(params.lambda_loc),
            train_focal: totals.focal_mean(),
            train_loc: totals.loc_mean(),
            train_accuracy: totals.accuracy(),
            val_loss,
            val_accuracy,
        };
        let selection = val_loss.unwrap_or(stats.train_loss);
        if best.as_ref().is_none_or(|(b, _, _)| selection < *b) {
            best = Some((selection, epoch, model.params().clone()));
        }
        history.push(stats);
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    *model.params_mut() = best_params;

    let mut final_hits = 0usize;
    let mut final_cls = 0usize;
    let mut iou_sum = 0.0;
    let mut iou_n = 0usize;
    for id in &split.train_ids {
        let function: &CodeFunction = corpus.get(id).expect("validated above");
        let label = function.label.expect("validated above");
        let diagnosis = model.predict(function)?;
        if let Some(target) = label.class().head_index() {
            final_cls += 1;
            if diagnosis.class.head_index() == Some(target) {
                final_hits += 1;
            }
        }
        if let Some(truth_range) = label.range() {
            iou_n += 1;
            iou_sum += diagnosis
                .range
                .map(|r| iou_1d(r, truth_range))
                .unwrap_or(0.0);
        }
    }

    Ok(TrainHistory {
        epochs: history,
        best_epoch,
        final_train_accuracy: final_hits as f64 / final_cls.max(1) as f64,
        final_train_mean_iou: if iou_n == 0 {
            None
        } else {
            Some(iou_sum / iou_n as f64)
        },
    })
}

//! Adam training over prepared snippets. Batches are evaluated in parallel
//! but folded in index order, so a fixed seed reproduces parameters
//! bit-for-bit regardless of thread count.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{run_pass, PreparedSnippet};
use super::{soft_sharing_grads, soft_sharing_loss, LossWeights, ModelParams};
use crate::error::{Error, Result};

/// Epoch-over-epoch improvement smaller than this relative margin counts as
/// a stall.
const EARLY_STOP_REL: f64 = 1e-3;
/// Consecutive stalled epochs tolerated before stopping.
const EARLY_STOP_PATIENCE: usize = 10;
/// The shuffle draws from a separate stream of the seed's generator so it
/// never overlaps the parameter-init stream.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub early_stop: bool,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            epochs: 100,
            early_stop: true,
            weights: LossWeights::default(),
            seed: 42,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::InvalidConfig {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad("learning_rate", "must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad("epsilon", "must be finite and > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1");
        }
        for (name, v) in [
            ("lambda_fusion", self.weights.fusion),
            ("lambda_aux", self.weights.aux),
            ("lambda_soft", self.weights.soft),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(name, "must be finite and >= 0");
            }
        }
        Ok(())
    }
}

/// Adam first/second moment estimates, one pair per parameter tensor in
/// [`ModelParams::tensors`] order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Array2<f64>> = params
            .tensors()
            .iter()
            .map(|(_, t)| Array2::zeros(t.raw_dim()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update in place.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &[Array2<f64>], s: &TrainSettings) {
        self.step += 1;
        let bc1 = 1.0 - s.beta1.powi(self.step as i32);
        let bc2 = 1.0 - s.beta2.powi(self.step as i32);
        for (t, (_, tensor)) in params.tensors_mut().into_iter().enumerate() {
            let g = &grads[t];
            for (idx, w) in tensor.indexed_iter_mut() {
                let gv = g[idx];
                let m = s.beta1 * self.m[t][idx] + (1.0 - s.beta1) * gv;
                let v = s.beta2 * self.v[t][idx] + (1.0 - s.beta2) * gv * gv;
                self.m[t][idx] = m;
                self.v[t][idx] = v;
                *w -= s.learning_rate * (m / bc1) / ((v / bc2).sqrt() + s.epsilon);
            }
        }
    }
}

/// Mean losses of one epoch. `total` recombines the parts under the loss
/// weights in effect.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub fusion: f64,
    pub aux: f64,
    pub soft: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub optimizer: AdamState,
    pub epochs: Vec<EpochRecord>,
}

/// Trains `params` on the dataset. Each batch's objective is the mean of
/// its snippets' weighted data losses plus the soft-sharing penalty, which
/// depends only on the parameters and enters once per batch.
pub fn train(
    mut params: ModelParams,
    dataset: &[PreparedSnippet],
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    settings.validate()?;
    params.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut optimizer = AdamState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(settings.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let weights = settings.weights;

    let mut epochs = Vec::new();
    let mut best_total = f64::INFINITY;
    let mut stall = 0usize;

    for epoch in 1..=settings.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut fusion_sum = 0.0;
        let mut aux_sum = 0.0;
        let mut soft_sum = 0.0;
        let mut batches = 0usize;

        for (batch_index, chunk) in order.chunks(settings.batch_size).enumerate() {
            let results: Vec<(f64, f64, Vec<Array2<f64>>)> = chunk
                .par_iter()
                .map(|&i| {
                    let mut pass = run_pass(&params, &dataset[i])?;
                    let fusion = pass.fusion_value();
                    let aux = pass.aux_values().iter().sum::<f64>();
                    let (_, grads) = pass.data_grads(&weights);
                    Ok((fusion, aux, grads))
                })
                .collect::<Result<_>>()?;

            let inv = 1.0 / chunk.len() as f64;
            let mut grad: Vec<Array2<f64>> = params
                .tensors()
                .iter()
                .map(|(_, t)| Array2::zeros(t.raw_dim()))
                .collect();
            let mut batch_fusion = 0.0;
            let mut batch_aux = 0.0;
            for (f, a, g) in &results {
                batch_fusion += f;
                batch_aux += a;
                for (acc, part) in grad.iter_mut().zip(g) {
                    *acc = &*acc + part;
                }
            }
            for g in &mut grad {
                g.mapv_inplace(|v| v * inv);
            }

            let soft = soft_sharing_loss(&params);
            for (acc, part) in grad.iter_mut().zip(soft_sharing_grads(&params, weights.soft)) {
                *acc = &*acc + &part;
            }

            let batch_total = inv * (weights.fusion * batch_fusion + weights.aux * batch_aux)
                + weights.soft * soft;
            if !batch_total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_index,
                });
            }

            optimizer.apply(&mut params, &grad, settings);

            fusion_sum += batch_fusion;
            aux_sum += batch_aux;
            soft_sum += soft;
            batches += 1;
        }

        let n = dataset.len() as f64;
        let fusion = fusion_sum / n;
        let aux = aux_sum / n;
        let soft = soft_sum / batches as f64;
        let total = weights.fusion * fusion + weights.aux * aux + weights.soft * soft;
        epochs.push(EpochRecord {
            epoch,
            fusion,
            aux,
            soft,
            total,
        });

        if settings.early_stop {
            if total < best_total * (1.0 - EARLY_STOP_REL) {
                best_total = total;
                stall = 0;
            } else {
                stall += 1;
                if stall >= EARLY_STOP_PATIENCE {
                    break;
                }
            }
        } else if total < best_total {
            best_total = total;
        }
    }

    Ok(TrainOutcome {
        params,
        optimizer,
        epochs,
    })
}

/// Fusion loss of every snippet under fixed parameters, in dataset order.
pub fn fusion_losses(params: &ModelParams, dataset: &[PreparedSnippet]) -> Result<Vec<f64>> {
    dataset
        .par_iter()
        .map(|snippet| Ok(run_pass(params, snippet)?.fusion_value()))
        .collect()
}

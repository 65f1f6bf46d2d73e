//! Mini-batch ADADELTA training on sampled patches.
//!
//! Per-sample gradients are computed independently (in parallel when
//! workers allow), summed in sample order and divided by the batch size
//! before each optimizer step, so results do not depend on worker count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, ModelParams};
use crate::data::Patch3D;
use crate::error::{Error, Result};
use crate::optimizer::{AdadeltaConfig, AdadeltaState};
use crate::parallel::Workers;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after the first epoch whose evaluation accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
    pub optimizer: AdadeltaConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 20,
            seed: 0,
            stop_at_accuracy: None,
            optimizer: AdadeltaConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    /// Mean training-mode loss over the epoch.
    pub loss: f64,
    /// Evaluation-mode accuracy over the whole training set after the epoch.
    pub accuracy: f64,
}

/// splitmix64 finaliser; derives independent per-sample dropout seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

fn label_of(p: &Patch3D) -> Result<usize> {
    p.label
        .map(usize::from)
        .ok_or_else(|| Error::Usage(format!("training patch at {:?} has no label", p.center)))
}

/// Summed loss, mean gradient and number of correct training-mode
/// predictions over a batch.
pub struct BatchGradient {
    pub loss_sum: f64,
    pub grads: Vec<Vec<f32>>,
    pub correct: usize,
}

pub fn batch_gradient(
    params: &ModelParams<f32>,
    batch: &[&Patch3D],
    seeds: &[u64],
    workers: &Workers,
) -> Result<BatchGradient> {
    assert_eq!(batch.len(), seeds.len());
    let samples = workers.map(batch.len(), |i| {
        let p = batch[i];
        let target = label_of(p)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
        classifier::loss_and_grads(params, &p.modalities, target, &mut rng).map(|s| (s, target))
    });
    let mut grads: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for s in samples {
        let (s, target) = s?;
        loss_sum += s.loss as f64;
        correct += usize::from(s.predicted == target);
        for (acc, g) in grads.iter_mut().zip(&s.grads) {
            acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
    }
    let scale = 1.0 / batch.len().max(1) as f32;
    grads.iter_mut().flatten().for_each(|v| *v *= scale);
    Ok(BatchGradient {
        loss_sum,
        grads,
        correct,
    })
}

/// Evaluation-mode predictions for every patch.
pub fn predict_all(params: &ModelParams<f32>, patches: &[Patch3D], workers: &Workers) -> Result<Vec<usize>> {
    workers
        .map(patches.len(), |i| classifier::predict(params, &patches[i].modalities))
        .into_iter()
        .collect()
}

pub fn accuracy(params: &ModelParams<f32>, patches: &[Patch3D], workers: &Workers) -> Result<f64> {
    let preds = predict_all(params, patches, workers)?;
    let mut correct = 0;
    for (p, &pred) in patches.iter().zip(&preds) {
        correct += usize::from(label_of(p)? == pred);
    }
    Ok(correct as f64 / patches.len().max(1) as f64)
}

/// Runs `config.epochs` epochs of shuffled mini-batches, calling `on_epoch`
/// after each one.
pub fn train(
    params: &mut ModelParams<f32>,
    state: &mut AdadeltaState<f32>,
    patches: &[Patch3D],
    config: &TrainConfig,
    workers: &Workers,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if patches.is_empty() {
        return Err(Error::Usage("empty training set".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Usage("batch size must be positive".into()));
    }
    let mut logs = Vec::new();
    let mut order: Vec<usize> = (0..patches.len()).collect();
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, epoch as u64]));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Patch3D> = chunk.iter().map(|&i| &patches[i]).collect();
            let seeds: Vec<u64> = (0..batch.len())
                .map(|i| mix_seed(&[config.seed, epoch as u64, b as u64, i as u64]))
                .collect();
            let bg = batch_gradient(params, &batch, &seeds, workers)?;
            loss_sum += bg.loss_sum;
            let mut tensors = params.tensors_mut();
            state.step(&mut tensors, &bg.grads)?;
        }
        let log = EpochLog {
            epoch,
            steps: state.steps,
            loss: loss_sum / patches.len() as f64,
            accuracy: accuracy(params, patches, workers)?,
        };
        on_epoch(&log);
        let done = config.stop_at_accuracy.is_some_and(|t| log.accuracy >= t);
        logs.push(log);
        if done {
            break;
        }
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_seed_is_order_sensitive() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_eq!(mix_seed(&[5, 6, 7]), mix_seed(&[5, 6, 7]));
    }
}

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{params_loss_and_grads, Architecture, Batch, Split, TaskSuite};
use crate::error::NumericalError;

/// Plain minibatch SGD with a linear learning-rate decay to 10%.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 12, learning_rate: 0.05, batch_size: 16, seed: 0 }
    }
}

/// Weights ~ N(0, 1/fan_in), norm gains 1, biases 0, positions N(0, 0.01).
pub fn init_params(arch: &Architecture, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    arch.layout()
        .iter()
        .map(|spec| {
            let numel: usize = spec.shape.iter().product();
            if spec.name.ends_with("norm.weight") {
                vec![1.0; numel]
            } else if spec.shape.len() == 1 {
                vec![0.0; numel]
            } else {
                let std = if spec.name == "embed.pos" { 0.1 } else { 1.0 / (spec.shape[1] as f64).sqrt() };
                (0..numel).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
            }
        })
        .collect()
}

/// Trains on the union of every task's training split.
pub fn train(arch: &Architecture, suite: &TaskSuite, config: &TrainConfig) -> Result<Vec<Vec<f64>>, NumericalError> {
    let mut params = init_params(arch, config.seed);
    let mut pool: Vec<(Vec<f64>, usize, usize)> = Vec::new();
    for task in &suite.tasks {
        let b = task.batch(Split::Train);
        pool.extend(b.inputs.into_iter().zip(b.labels).map(|(x, y)| (x, y, task.num_classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED);
    for epoch in 0..config.epochs {
        let lr = config.learning_rate * (1.0 - 0.9 * epoch as f64 / config.epochs.max(1) as f64);
        pool.shuffle(&mut rng);
        for chunk in pool.chunks(config.batch_size) {
            // Tasks differ in class count, so each minibatch is split by task.
            let class_counts: BTreeSet<usize> = chunk.iter().map(|s| s.2).collect();
            for classes in class_counts {
                let members: Vec<_> = chunk.iter().filter(|s| s.2 == classes).collect();
                let batch = Batch {
                    inputs: members.iter().map(|s| s.0.clone()).collect(),
                    labels: members.iter().map(|s| s.1).collect(),
                    num_classes: classes,
                };
                let weight = members.len() as f64 / chunk.len() as f64;
                let (_, grads) = params_loss_and_grads(arch, &params, &batch)?;
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.iter_mut().zip(g) {
                        *w -= lr * weight * d;
                    }
                }
            }
        }
    }
    Ok(params)
}

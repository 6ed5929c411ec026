//! Victims shared by the integration tests.
#![allow(dead_code)]

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sbfa::bitcodec::FormatSpec;
use sbfa::nnet::{self, Architecture, Batch, Split, TaskSuite, TrainConfig};
use sbfa::tensormodel::ModelBundle;

pub const FEATURES: usize = 16;

pub fn suite(seed: u64) -> TaskSuite {
    TaskSuite::toy(seed, FEATURES)
}

/// The default `train-toy` victim: 2-block pre-norm MLP, width 8.
pub fn mlp(suite: &TaskSuite) -> Architecture {
    Architecture::Mlp { input_dim: suite.input_dim(), width: 8, hidden: 16, blocks: 2, num_classes: suite.max_classes() }
}

/// An attention victim on a 17-feature suite (20 inputs = 4 tokens x 5).
pub fn attention_victim(seed: u64, format: FormatSpec) -> (ModelBundle, TaskSuite) {
    let suite = TaskSuite::toy(seed, 17);
    let arch = Architecture::Attention { tokens: 4, token_dim: 5, width: 16, hidden: 32, num_classes: 4 };
    (trained(&arch, &suite, seed, format), suite)
}

pub fn linear(suite: &TaskSuite) -> Architecture {
    Architecture::Linear { input_dim: suite.input_dim(), num_classes: suite.max_classes() }
}

pub fn trained(arch: &Architecture, suite: &TaskSuite, seed: u64, format: FormatSpec) -> ModelBundle {
    let params = nnet::train(arch, suite, &TrainConfig { seed, ..TrainConfig::default() }).expect("training stays finite");
    ModelBundle::from_params(arch.clone(), &params, format).expect("trained weights encode")
}

pub fn mlp_victim(seed: u64, format: FormatSpec) -> (ModelBundle, TaskSuite) {
    let s = suite(seed);
    let arch = mlp(&s);
    (trained(&arch, &s, seed, format), s)
}

pub fn eval_batch(suite: &TaskSuite, task: &str, run_seed: u64) -> Batch {
    suite.get(task).unwrap().batch(Split::Eval { run_seed })
}

/// Central-difference check of `params_loss_and_grads` at `samples` random
/// coordinates. Returns the worst relative error, where the denominator is
/// floored at `floor` so that vanishing gradients compare absolutely.
pub fn gradient_check(arch: &Architecture, params: &[Vec<f64>], batch: &Batch, samples: usize, h: f64, floor: f64, seed: u64) -> (f64, String) {
    let (_, grads) = nnet::params_loss_and_grads(arch, params, batch).unwrap();
    let coords: Vec<(usize, usize)> =
        params.iter().enumerate().flat_map(|(t, p)| (0..p.len()).map(move |i| (t, i))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, coords.len(), samples.min(coords.len()));
    let names: Vec<String> = arch.layout().into_iter().map(|s| s.name).collect();
    let mut shadow = params.to_vec();
    let mut worst = (0.0, String::new());
    for k in picks.iter() {
        let (t, i) = coords[k];
        let w = shadow[t][i];
        shadow[t][i] = w + h;
        let up = nnet::params_loss_and_grads(arch, &shadow, batch).unwrap().0;
        shadow[t][i] = w - h;
        let down = nnet::params_loss_and_grads(arch, &shadow, batch).unwrap().0;
        shadow[t][i] = w;
        let fd = (up - down) / (2.0 * h);
        let bp = grads[t][i];
        let rel = (fd - bp).abs() / fd.abs().max(bp.abs()).max(floor);
        if rel > worst.0 {
            worst = (rel, format!("{}[{i}]: backprop {bp:e}, difference {fd:e}", names[t]));
        }
    }
    worst
}

//! Small dependency-free victim networks.
//!
//! Three architectures share one convention: parameters are a list of f64
//! buffers in [`Architecture::layout`] order, which is also the manifest
//! order of a [`ModelBundle`]. All math runs in f64 on effective weights;
//! storage formats only matter for the words being attacked.

mod ops;
mod task;
mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::NumericalError;
use crate::tensormodel::ModelBundle;

pub use task::{Batch, Split, TaskSpec, TaskSuite};
pub use train::{init_params, train, TrainConfig};

/// Samples per gradient chunk. Chunks are reduced in order, so results do
/// not depend on the rayon pool size.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// logits = W x + b
    Linear { input_dim: usize, num_classes: usize },
    /// Embedding, `blocks` pre-norm residual GELU MLP blocks, final norm, head.
    Mlp { input_dim: usize, width: usize, hidden: usize, blocks: usize, num_classes: usize },
    /// Input split into `tokens` rows of `token_dim`; one pre-norm
    /// single-head self-attention block plus MLP, mean-pooled into the head.
    Attention { tokens: usize, token_dim: usize, width: usize, hidden: usize, num_classes: usize },
}

/// Name, layer, kind and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub layer_index: usize,
    pub param_kind: String,
    pub shape: Vec<usize>,
}

fn spec(name: impl Into<String>, layer_index: usize, kind: &str, shape: &[usize]) -> TensorSpec {
    TensorSpec { name: name.into(), layer_index, param_kind: kind.into(), shape: shape.to_vec() }
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        match *self {
            Architecture::Linear { input_dim, .. } | Architecture::Mlp { input_dim, .. } => input_dim,
            Architecture::Attention { tokens, token_dim, .. } => tokens * token_dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        match *self {
            Architecture::Linear { num_classes, .. }
            | Architecture::Mlp { num_classes, .. }
            | Architecture::Attention { num_classes, .. } => num_classes,
        }
    }

    pub fn layout(&self) -> Vec<TensorSpec> {
        match *self {
            Architecture::Linear { input_dim, num_classes } => vec![
                spec("head.weight", 0, "head", &[num_classes, input_dim]),
                spec("head.bias", 0, "bias", &[num_classes]),
            ],
            Architecture::Mlp { input_dim, width, hidden, blocks, num_classes } => {
                let mut v = vec![
                    spec("embed.weight", 0, "embed", &[width, input_dim]),
                    spec("embed.bias", 0, "bias", &[width]),
                ];
                for i in 0..blocks {
                    v.extend([
                        spec(format!("layer.{i}.norm.weight"), i, "norm", &[width]),
                        spec(format!("layer.{i}.norm.bias"), i, "norm", &[width]),
                        spec(format!("layer.{i}.mlp.up_proj"), i, "mlp.up_proj", &[hidden, width]),
                        spec(format!("layer.{i}.mlp.up_proj.bias"), i, "bias", &[hidden]),
                        spec(format!("layer.{i}.mlp.down_proj"), i, "mlp.down_proj", &[width, hidden]),
                        spec(format!("layer.{i}.mlp.down_proj.bias"), i, "bias", &[width]),
                    ]);
                }
                v.extend(tail(blocks, width, num_classes));
                v
            }
            Architecture::Attention { tokens, token_dim, width, hidden, num_classes } => {
                let mut v = vec![
                    spec("embed.weight", 0, "embed", &[width, token_dim]),
                    spec("embed.bias", 0, "bias", &[width]),
                    spec("embed.pos", 0, "embed", &[tokens, width]),
                    spec("layer.0.attn_norm.weight", 0, "norm", &[width]),
                    spec("layer.0.attn_norm.bias", 0, "norm", &[width]),
                    spec("layer.0.attn.q_proj", 0, "attn.q_proj", &[width, width]),
                    spec("layer.0.attn.k_proj", 0, "attn.k_proj", &[width, width]),
                    spec("layer.0.attn.v_proj", 0, "attn.v_proj", &[width, width]),
                    spec("layer.0.attn.o_proj", 0, "attn.o_proj", &[width, width]),
                    spec("layer.0.mlp_norm.weight", 0, "norm", &[width]),
                    spec("layer.0.mlp_norm.bias", 0, "norm", &[width]),
                    spec("layer.0.mlp.up_proj", 0, "mlp.up_proj", &[hidden, width]),
                    spec("layer.0.mlp.up_proj.bias", 0, "bias", &[hidden]),
                    spec("layer.0.mlp.down_proj", 0, "mlp.down_proj", &[width, hidden]),
                    spec("layer.0.mlp.down_proj.bias", 0, "bias", &[width]),
                ];
                v.extend(tail(1, width, num_classes));
                v
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

fn tail(layer: usize, width: usize, num_classes: usize) -> [TensorSpec; 4] {
    [
        spec("final_norm.weight", layer, "norm", &[width]),
        spec("final_norm.bias", layer, "norm", &[width]),
        spec("head.weight", layer, "head", &[num_classes, width]),
        spec("head.bias", layer, "bias", &[num_classes]),
    ]
}

/// Disjoint mutable borrows of two gradient buffers.
fn pair_mut(g: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

/// Forward/backward over a borrowed parameter list.
#[derive(Clone, Copy)]
pub struct Network<'a> {
    arch: &'a Architecture,
    params: &'a [Vec<f64>],
}

impl<'a> Network<'a> {
    pub fn new(arch: &'a Architecture, params: &'a [Vec<f64>]) -> Network<'a> {
        debug_assert_eq!(arch.layout().len(), params.len());
        Network { arch, params }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.run(x, None)
    }

    /// Adds d(loss)/d(params) of one sample into `grads`; returns the loss.
    pub fn accumulate(&self, x: &[f64], label: usize, classes: usize, grads: &mut [Vec<f64>]) -> f64 {
        let mut loss = 0.0;
        self.run(x, Some((label, classes, grads, &mut loss)));
        loss
    }

    fn run(&self, x: &[f64], backward: Option<(usize, usize, &mut [Vec<f64>], &mut f64)>) -> Vec<f64> {
        match *self.arch {
            Architecture::Linear { num_classes, .. } => self.linear_model(x, num_classes, backward),
            Architecture::Mlp { width, hidden, blocks, num_classes, .. } => {
                self.mlp(x, width, hidden, blocks, num_classes, backward)
            }
            Architecture::Attention { tokens, token_dim, width, hidden, num_classes } => {
                self.attention(x, tokens, token_dim, width, hidden, num_classes, backward)
            }
        }
    }

    fn linear_model(
        &self,
        x: &[f64],
        classes_out: usize,
        backward: Option<(usize, usize, &mut [Vec<f64>], &mut f64)>,
    ) -> Vec<f64> {
        let p = self.params;
        let z = ops::linear(&p[0], Some(&p[1]), x, classes_out);
        if let Some((label, classes, grads, loss)) = backward {
            let (l, dz) = ops::cross_entropy(&z, classes, label);
            *loss = l;
            let (dw, db) = pair_mut(grads, 0, 1);
            ops::linear_backward(&p[0], x, &dz, dw, Some(db));
        }
        z
    }

    fn mlp(
        &self,
        x: &[f64],
        width: usize,
        hidden: usize,
        blocks: usize,
        classes_out: usize,
        backward: Option<(usize, usize, &mut [Vec<f64>], &mut f64)>,
    ) -> Vec<f64> {
        let p = self.params;
        struct Block {
            input: Vec<f64>,
            norm: ops::NormCache,
            normed: Vec<f64>,
            pre: Vec<f64>,
            act: Vec<f64>,
        }
        let mut h = ops::linear(&p[0], Some(&p[1]), x, width);
        let mut trace = Vec::with_capacity(blocks);
        for i in 0..blocks {
            let b = 2 + 6 * i;
            let (normed, norm) = ops::layer_norm(&h, &p[b], &p[b + 1]);
            let pre = ops::linear(&p[b + 2], Some(&p[b + 3]), &normed, hidden);
            let act: Vec<f64> = pre.iter().map(|&v| ops::gelu(v)).collect();
            let out = ops::linear(&p[b + 4], Some(&p[b + 5]), &act, width);
            let next: Vec<f64> = h.iter().zip(&out).map(|(a, b)| a + b).collect();
            trace.push(Block { input: std::mem::replace(&mut h, next), norm, normed, pre, act });
        }
        let f = 2 + 6 * blocks;
        let (fin, fin_cache) = ops::layer_norm(&h, &p[f], &p[f + 1]);
        let z = ops::linear(&p[f + 2], Some(&p[f + 3]), &fin, classes_out);

        let Some((label, classes, grads, loss)) = backward else {
            return z;
        };
        let (l, dz) = ops::cross_entropy(&z, classes, label);
        *loss = l;
        let dfin = {
            let (dw, db) = pair_mut(grads, f + 2, f + 3);
            ops::linear_backward(&p[f + 2], &fin, &dz, dw, Some(db))
        };
        let mut dh = {
            let (dg, db) = pair_mut(grads, f, f + 1);
            ops::layer_norm_backward(&fin_cache, &p[f], &dfin, dg, db)
        };
        for (i, blk) in trace.iter().enumerate().rev() {
            let b = 2 + 6 * i;
            let dact = {
                let (dw, db) = pair_mut(grads, b + 4, b + 5);
                ops::linear_backward(&p[b + 4], &blk.act, &dh, dw, Some(db))
            };
            let dpre: Vec<f64> = dact.iter().zip(&blk.pre).map(|(d, &v)| d * ops::gelu_grad(v)).collect();
            let dnormed = {
                let (dw, db) = pair_mut(grads, b + 2, b + 3);
                ops::linear_backward(&p[b + 2], &blk.normed, &dpre, dw, Some(db))
            };
            let dres = {
                let (dg, db) = pair_mut(grads, b, b + 1);
                ops::layer_norm_backward(&blk.norm, &p[b], &dnormed, dg, db)
            };
            debug_assert_eq!(blk.input.len(), dh.len());
            for (d, r) in dh.iter_mut().zip(dres) {
                *d += r;
            }
        }
        let (dw, db) = pair_mut(grads, 0, 1);
        ops::linear_backward(&p[0], x, &dh, dw, Some(db));
        z
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        x: &[f64],
        tokens: usize,
        token_dim: usize,
        width: usize,
        hidden: usize,
        classes_out: usize,
        backward: Option<(usize, usize, &mut [Vec<f64>], &mut f64)>,
    ) -> Vec<f64> {
        const EMB: usize = 0;
        const EMB_B: usize = 1;
        const POS: usize = 2;
        const N1: usize = 3;
        const WQ: usize = 5;
        const WK: usize = 6;
        const WV: usize = 7;
        const WO: usize = 8;
        const N2: usize = 9;
        const UP: usize = 11;
        const DOWN: usize = 13;
        const FIN: usize = 15;
        const HEAD: usize = 17;

        let p = self.params;
        let inv = 1.0 / (width as f64).sqrt();
        let xs: Vec<&[f64]> = x.chunks(token_dim).collect();
        let e: Vec<Vec<f64>> = (0..tokens)
            .map(|t| {
                let mut v = ops::linear(&p[EMB], Some(&p[EMB_B]), xs[t], width);
                for (a, b) in v.iter_mut().zip(&p[POS][t * width..(t + 1) * width]) {
                    *a += b;
                }
                v
            })
            .collect();
        let (n, c1): (Vec<_>, Vec<_>) = e.iter().map(|v| ops::layer_norm(v, &p[N1], &p[N1 + 1])).unzip();
        let q: Vec<Vec<f64>> = n.iter().map(|v| ops::linear(&p[WQ], None, v, width)).collect();
        let k: Vec<Vec<f64>> = n.iter().map(|v| ops::linear(&p[WK], None, v, width)).collect();
        let val: Vec<Vec<f64>> = n.iter().map(|v| ops::linear(&p[WV], None, v, width)).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let attn: Vec<Vec<f64>> = (0..tokens)
            .map(|t| ops::softmax(&(0..tokens).map(|s| dot(&q[t], &k[s]) * inv).collect::<Vec<_>>()))
            .collect();
        let a: Vec<Vec<f64>> = (0..tokens)
            .map(|t| {
                let mut acc = vec![0.0; width];
                for s in 0..tokens {
                    for (o, v) in acc.iter_mut().zip(&val[s]) {
                        *o += attn[t][s] * v;
                    }
                }
                acc
            })
            .collect();
        let h: Vec<Vec<f64>> = (0..tokens)
            .map(|t| {
                let o = ops::linear(&p[WO], None, &a[t], width);
                e[t].iter().zip(o).map(|(x, y)| x + y).collect()
            })
            .collect();
        let (m, c2): (Vec<_>, Vec<_>) = h.iter().map(|v| ops::layer_norm(v, &p[N2], &p[N2 + 1])).unzip();
        let pre: Vec<Vec<f64>> = m.iter().map(|v| ops::linear(&p[UP], Some(&p[UP + 1]), v, hidden)).collect();
        let act: Vec<Vec<f64>> = pre.iter().map(|v| v.iter().map(|&z| ops::gelu(z)).collect()).collect();
        let mut pooled = vec![0.0; width];
        for t in 0..tokens {
            let out = ops::linear(&p[DOWN], Some(&p[DOWN + 1]), &act[t], width);
            for i in 0..width {
                pooled[i] += (h[t][i] + out[i]) / tokens as f64;
            }
        }
        let (fin, cf) = ops::layer_norm(&pooled, &p[FIN], &p[FIN + 1]);
        let z = ops::linear(&p[HEAD], Some(&p[HEAD + 1]), &fin, classes_out);

        let Some((label, classes, grads, loss)) = backward else {
            return z;
        };
        let (l, dz) = ops::cross_entropy(&z, classes, label);
        *loss = l;
        let dfin = {
            let (dw, db) = pair_mut(grads, HEAD, HEAD + 1);
            ops::linear_backward(&p[HEAD], &fin, &dz, dw, Some(db))
        };
        let dpooled = {
            let (dg, db) = pair_mut(grads, FIN, FIN + 1);
            ops::layer_norm_backward(&cf, &p[FIN], &dfin, dg, db)
        };
        let dh2: Vec<f64> = dpooled.iter().map(|v| v / tokens as f64).collect();

        let mut dh = Vec::with_capacity(tokens);
        let mut da = Vec::with_capacity(tokens);
        for t in 0..tokens {
            let dact = {
                let (dw, db) = pair_mut(grads, DOWN, DOWN + 1);
                ops::linear_backward(&p[DOWN], &act[t], &dh2, dw, Some(db))
            };
            let dpre: Vec<f64> = dact.iter().zip(&pre[t]).map(|(d, &v)| d * ops::gelu_grad(v)).collect();
            let dm = {
                let (dw, db) = pair_mut(grads, UP, UP + 1);
                ops::linear_backward(&p[UP], &m[t], &dpre, dw, Some(db))
            };
            let dres = {
                let (dg, db) = pair_mut(grads, N2, N2 + 1);
                ops::layer_norm_backward(&c2[t], &p[N2], &dm, dg, db)
            };
            let dht: Vec<f64> = dh2.iter().zip(dres).map(|(a, b)| a + b).collect();
            da.push(ops::linear_backward(&p[WO], &a[t], &dht, &mut grads[WO], None));
            dh.push(dht);
        }

        // Attention adjoint.
        let mut dq = vec![vec![0.0; width]; tokens];
        let mut dk = vec![vec![0.0; width]; tokens];
        let mut dv = vec![vec![0.0; width]; tokens];
        for t in 0..tokens {
            let dattn: Vec<f64> = (0..tokens).map(|s| dot(&da[t], &val[s])).collect();
            let centre: f64 = (0..tokens).map(|s| attn[t][s] * dattn[s]).sum();
            for s in 0..tokens {
                let w = attn[t][s];
                for i in 0..width {
                    dv[s][i] += w * da[t][i];
                }
                let ds = w * (dattn[s] - centre) * inv;
                for i in 0..width {
                    dq[t][i] += ds * k[s][i];
                    dk[s][i] += ds * q[t][i];
                }
            }
        }
        for t in 0..tokens {
            let mut dn = ops::linear_backward(&p[WQ], &n[t], &dq[t], &mut grads[WQ], None);
            for (proj, d) in [(WK, &dk[t]), (WV, &dv[t])] {
                let part = ops::linear_backward(&p[proj], &n[t], d, &mut grads[proj], None);
                for (a, b) in dn.iter_mut().zip(part) {
                    *a += b;
                }
            }
            let dnorm = {
                let (dg, db) = pair_mut(grads, N1, N1 + 1);
                ops::layer_norm_backward(&c1[t], &p[N1], &dn, dg, db)
            };
            let de: Vec<f64> = dh[t].iter().zip(dnorm).map(|(a, b)| a + b).collect();
            for (g, d) in grads[POS][t * width..(t + 1) * width].iter_mut().zip(&de) {
                *g += d;
            }
            let (dw, db) = pair_mut(grads, EMB, EMB_B);
            ops::linear_backward(&p[EMB], xs[t], &de, dw, Some(db));
        }
        z
    }
}

fn zero_grads(arch: &Architecture) -> Vec<Vec<f64>> {
    arch.layout().iter().map(|s| vec![0.0; s.shape.iter().product()]).collect()
}

fn numerical_error(arch: &Architecture, params: &[Vec<f64>], stage: &str) -> NumericalError {
    let tensor = arch
        .layout()
        .into_iter()
        .zip(params)
        .find(|(_, p)| p.iter().any(|v| !v.is_finite()))
        .map(|(s, _)| s.name);
    NumericalError { tensor, stage: stage.to_string() }
}

/// Mean cross-entropy over `batch` and its exact gradient w.r.t. every
/// parameter, computed in f64.
pub fn params_loss_and_grads(
    arch: &Architecture,
    params: &[Vec<f64>],
    batch: &Batch,
) -> Result<(f64, Vec<Vec<f64>>), NumericalError> {
    let net = Network::new(arch, params);
    let n = batch.len();
    let partials: Vec<(f64, Vec<Vec<f64>>)> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(GRAD_CHUNK)
        .map(|idx| {
            let mut g = zero_grads(arch);
            let mut loss = 0.0;
            for &i in idx {
                loss += net.accumulate(&batch.inputs[i], batch.labels[i], batch.num_classes, &mut g);
            }
            (loss, g)
        })
        .collect();
    let mut total = 0.0;
    let mut grads = zero_grads(arch);
    for (loss, g) in partials {
        total += loss;
        for (acc, part) in grads.iter_mut().zip(g) {
            for (a, b) in acc.iter_mut().zip(part) {
                *a += b;
            }
        }
    }
    let scale = 1.0 / n as f64;
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(numerical_error(arch, params, "loss"));
    }
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(numerical_error(arch, params, "gradient"));
    }
    Ok((loss, grads))
}

/// Gradient of the mean loss w.r.t. effective weights, stored into the bundle.
pub fn loss_and_grads(bundle: &mut ModelBundle, batch: &Batch) -> Result<f64, NumericalError> {
    let params = bundle.effective_params();
    let (loss, grads) = params_loss_and_grads(&bundle.architecture, &params, batch)?;
    bundle.set_gradients(grads).expect("gradient layout follows architecture");
    Ok(loss)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Exact-match accuracy by argmax over the task's logits (ties to the lower
/// class). Any non-finite logit aborts with a numerical error.
pub fn evaluate_params(arch: &Architecture, params: &[Vec<f64>], batch: &Batch) -> Result<f64, NumericalError> {
    let net = Network::new(arch, params);
    let correct: Option<usize> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let z = net.logits(&batch.inputs[i]);
            let z = &z[..batch.num_classes];
            if z.iter().any(|v| !v.is_finite()) {
                return None;
            }
            Some(usize::from(argmax(z) == batch.labels[i]))
        })
        .sum();
    match correct {
        Some(c) => Ok(c as f64 / batch.len() as f64),
        None => Err(numerical_error(arch, params, "forward")),
    }
}

pub fn evaluate(bundle: &ModelBundle, batch: &Batch) -> Result<f64, NumericalError> {
    evaluate_params(&bundle.architecture, &bundle.effective_params(), batch)
}

/// Checks that a batch can be fed to the architecture.
pub fn check_compatible(arch: &Architecture, batch: &Batch) -> Result<(), String> {
    if batch.inputs.first().is_some_and(|x| x.len() != arch.input_dim()) {
        return Err(format!("input width {} != model input {}", batch.inputs[0].len(), arch.input_dim()));
    }
    if batch.num_classes > arch.num_classes() {
        return Err(format!("task has {} classes, model head has {}", batch.num_classes, arch.num_classes()));
    }
    Ok(())
}

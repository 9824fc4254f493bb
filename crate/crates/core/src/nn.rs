//! Windowed one-hot MLP shared by the policy and the value model.
//!
//! The last `window` tokens of a context are one-hot encoded per position
//! (left-padded with a reserved pad symbol), passed through one tanh hidden
//! layer and a linear head. Because the input is one-hot, the first layer is
//! evaluated by summing `window` weight columns.

use rand::Rng as _;
use rayon::prelude::*;

use crate::mdp::TokenId;
use crate::seed::Seed;

/// Dimensions of the network. `symbols` is the vocabulary size plus the pad.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpShape {
    pub window: usize,
    pub symbols: usize,
    pub hidden: usize,
    pub outputs: usize,
}

/// Hidden activations and head output of one forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl MlpShape {
    pub fn new(vocab_size: usize, window: usize, hidden: usize, outputs: usize) -> Self {
        Self {
            window,
            symbols: vocab_size + 1,
            hidden,
            outputs,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols - 1
    }

    pub fn input_dim(&self) -> usize {
        self.window * self.symbols
    }

    fn b1(&self) -> usize {
        self.input_dim() * self.hidden
    }

    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }

    fn b2(&self) -> usize {
        self.w2() + self.outputs * self.hidden
    }

    pub fn param_count(&self) -> usize {
        self.b2() + self.outputs
    }

    /// Indices of the hot inputs for the trailing window of `context`.
    pub fn encode(&self, context: &[TokenId]) -> Vec<usize> {
        let pad = self.symbols - 1;
        let take = context.len().min(self.window);
        let pads = self.window - take;
        let tail = &context[context.len() - take..];
        (0..self.window)
            .map(|p| {
                let sym = if p < pads {
                    pad
                } else {
                    tail[p - pads].index()
                };
                p * self.symbols + sym
            })
            .collect()
    }

    pub fn forward(&self, params: &[f64], active: &[usize]) -> Activations {
        let h = self.hidden;
        let mut pre = params[self.b1()..self.b1() + h].to_vec();
        for &col in active {
            let w = &params[col * h..(col + 1) * h];
            for (p, wi) in pre.iter_mut().zip(w) {
                *p += wi;
            }
        }
        let hidden: Vec<f64> = pre.into_iter().map(f64::tanh).collect();
        let w2 = &params[self.w2()..self.b2()];
        let b2 = &params[self.b2()..];
        let output = (0..self.outputs)
            .map(|o| {
                b2[o]
                    + w2[o * h..(o + 1) * h]
                        .iter()
                        .zip(&hidden)
                        .map(|(w, x)| w * x)
                        .sum::<f64>()
            })
            .collect();
        Activations { hidden, output }
    }

    /// Accumulates `scale · ∂(d_output · output)/∂params` into `grad`.
    pub fn backward(
        &self,
        params: &[f64],
        active: &[usize],
        act: &Activations,
        d_output: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) {
        let h = self.hidden;
        let (w2_off, b2_off, b1_off) = (self.w2(), self.b2(), self.b1());
        let mut d_hidden = vec![0.0; h];
        for (o, &g) in d_output.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let g = g * scale;
            grad[b2_off + o] += g;
            let w2 = &params[w2_off + o * h..w2_off + (o + 1) * h];
            let gw2 = &mut grad[w2_off + o * h..w2_off + (o + 1) * h];
            for j in 0..h {
                gw2[j] += g * act.hidden[j];
                d_hidden[j] += g * w2[j];
            }
        }
        for (j, d) in d_hidden.iter_mut().enumerate() {
            *d *= 1.0 - act.hidden[j] * act.hidden[j];
            grad[b1_off + j] += *d;
        }
        for &col in active {
            let gw1 = &mut grad[col * h..(col + 1) * h];
            for (g, d) in gw1.iter_mut().zip(&d_hidden) {
                *g += d;
            }
        }
    }

    pub fn init_uniform(&self, scale: f64, seed: Seed) -> Vec<f64> {
        let mut rng = seed.rng();
        (0..self.param_count())
            .map(|_| {
                if scale == 0.0 {
                    0.0
                } else {
                    rng.gen_range(-scale..=scale)
                }
            })
            .collect()
    }
}

const CHUNK: usize = 8;

/// Sums `f(item, grad)` over `items` in parallel with a fixed chunking, so the
/// floating-point result does not depend on the thread count. Returns the sum
/// of the scalar values `f` reports alongside the summed gradient.
pub fn par_accumulate<T: Sync>(
    items: &[T],
    dim: usize,
    f: impl Fn(&T, &mut [f64]) -> f64 + Sync,
) -> (f64, Vec<f64>) {
    let parts: Vec<(f64, Vec<f64>)> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; dim];
            let mut v = 0.0;
            for it in chunk {
                v += f(it, &mut g);
            }
            (v, g)
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; dim];
    for (v, g) in parts {
        total += v;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (total, grad)
}

/// `params += step · grad`.
pub fn axpy(params: &mut [f64], step: f64, grad: &[f64]) {
    for (p, g) in params.iter_mut().zip(grad) {
        *p += step * g;
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use super::ops::softmax64_in_place;
use super::{ModelParams, CLASSES, HIDDEN, INPUT};
use crate::error::{ensure, ContractViolation};
use crate::tensor::Tensor;

/// Per-unit multipliers for the hidden layer of one batch: `0` for dropped
/// units and `1 / (1 - rate)` for survivors (inverted dropout).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    rows: usize,
    scale: Vec<f32>,
}

impl DropoutMask {
    pub fn keep_all(rows: usize) -> Self {
        Self {
            rows,
            scale: vec![1.0; rows * HIDDEN],
        }
    }

    /// Draws one keep/drop decision per hidden unit per row.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, rows: usize, rate: f32) -> Self {
        if rate <= 0.0 {
            return Self::keep_all(rows);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let scale = (0..rows * HIDDEN)
            .map(|_| {
                if rng.random::<f32>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        Self { rows, scale }
    }

    /// Builds a mask from explicit keep flags (`rows * 128` of them).
    pub fn from_keep(rows: usize, keep: &[bool], rate: f32) -> Result<Self, ContractViolation> {
        ensure!(
            keep.len() == rows * HIDDEN,
            "mask needs {} flags, got {}",
            rows * HIDDEN,
            keep.len()
        );
        ensure!(
            (0.0..1.0).contains(&rate),
            "dropout rate {} outside [0, 1)",
            rate
        );
        let keep_scale = 1.0 / (1.0 - rate);
        Ok(Self {
            rows,
            scale: keep
                .iter()
                .map(|&k| if k { keep_scale } else { 0.0 })
                .collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn scales(&self) -> &[f32] {
        &self.scale
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    /// Dropout is the identity.
    Eval,
    Train(&'a DropoutMask),
}

/// Intermediate activations kept for [`backward`]. Parameters and outputs
/// are `f32`; sums inside a pass run in `f64` and are kept that way here.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Tensor,
    /// Hidden pre-activations, `[N, 128]`.
    hidden_pre: Vec<f64>,
    /// Hidden activations after relu and dropout, `[N, 128]`.
    hidden: Vec<f64>,
    mask: Option<Vec<f32>>,
    probs: Vec<f64>,
}

impl ForwardCache {
    pub fn hidden_pre(&self) -> &[f64] {
        &self.hidden_pre
    }
}

/// Gradients of the mean loss, shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub ModelParams);

pub fn forward(
    params: &ModelParams,
    batch: &Tensor,
    mode: Mode<'_>,
) -> Result<(Tensor, ForwardCache), ContractViolation> {
    let dims = batch.dims();
    ensure!(
        dims.len() == 2 && dims[1] == INPUT,
        "batch dims {:?}, expected [N, {}]",
        dims,
        INPUT
    );
    let n = dims[0];
    if let Mode::Train(mask) = mode {
        ensure!(
            mask.rows == n,
            "dropout mask covers {} rows, batch has {}",
            mask.rows,
            n
        );
    }

    let w1 = params.w1.data();
    let b1 = params.b1.data();
    let w2 = params.w2.data();
    let b2 = params.b2.data();

    let mut hidden_pre = vec![0.0f64; n * HIDDEN];
    for (i, h) in hidden_pre.chunks_exact_mut(HIDDEN).enumerate() {
        for (hj, &b) in h.iter_mut().zip(b1) {
            *hj = f64::from(b);
        }
        for (k, &x) in batch.row(i).iter().enumerate() {
            if x != 0.0 {
                let x = f64::from(x);
                let w = &w1[k * HIDDEN..(k + 1) * HIDDEN];
                for (hj, &wj) in h.iter_mut().zip(w) {
                    *hj += x * f64::from(wj);
                }
            }
        }
    }

    let mut hidden: Vec<f64> = hidden_pre
        .iter()
        .map(|&v| if v > 0.0 { v } else { 0.0 })
        .collect();
    let mask = match mode {
        Mode::Eval => None,
        Mode::Train(mask) => {
            for (h, &s) in hidden.iter_mut().zip(&mask.scale) {
                *h *= f64::from(s);
            }
            Some(mask.scale.clone())
        }
    };

    let mut probs = vec![0.0f64; n * CLASSES];
    for (out, h) in probs
        .chunks_exact_mut(CLASSES)
        .zip(hidden.chunks_exact(HIDDEN))
    {
        for (o, &b) in out.iter_mut().zip(b2) {
            *o = f64::from(b);
        }
        for (j, &a) in h.iter().enumerate() {
            if a != 0.0 {
                let w = &w2[j * CLASSES..(j + 1) * CLASSES];
                for (o, &wj) in out.iter_mut().zip(w) {
                    *o += a * f64::from(wj);
                }
            }
        }
        softmax64_in_place(out);
    }
    let out = Tensor::new(vec![n, CLASSES], probs.iter().map(|&p| p as f32).collect())?;

    let cache = ForwardCache {
        input: batch.clone(),
        hidden_pre,
        hidden,
        mask,
        probs,
    };
    Ok((out, cache))
}

/// Backpropagates mean cross-entropy through the cached forward pass,
/// reusing its dropout mask.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    labels: &[u8],
) -> Result<Gradients, ContractViolation> {
    let n = cache.input.rows();
    ensure!(
        labels.len() == n,
        "{} labels for a batch of {}",
        labels.len(),
        n
    );
    ensure!(n > 0, "backward over an empty batch");
    let inv_n = 1.0 / n as f64;

    // dL/dlogits = (p - onehot) / N
    let mut dlogits = cache.probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        ensure!(
            (label as usize) < CLASSES,
            "label {} outside 0..{}",
            label,
            CLASSES
        );
        let row = &mut dlogits[i * CLASSES..(i + 1) * CLASSES];
        row[label as usize] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv_n;
        }
    }

    let w2 = params.w2.data();
    let mut gw1 = vec![0.0f64; INPUT * HIDDEN];
    let mut gb1 = vec![0.0f64; HIDDEN];
    let mut gw2 = vec![0.0f64; HIDDEN * CLASSES];
    let mut gb2 = vec![0.0f64; CLASSES];
    let mut dhidden = vec![0.0f64; HIDDEN];

    for i in 0..n {
        let dl = &dlogits[i * CLASSES..(i + 1) * CLASSES];
        let h = &cache.hidden[i * HIDDEN..(i + 1) * HIDDEN];
        let pre = &cache.hidden_pre[i * HIDDEN..(i + 1) * HIDDEN];

        for (b, d) in gb2.iter_mut().zip(dl) {
            *b += d;
        }
        for (j, &a) in h.iter().enumerate() {
            let w = &w2[j * CLASSES..(j + 1) * CLASSES];
            let mut acc = 0.0f64;
            for (&wj, d) in w.iter().zip(dl) {
                acc += f64::from(wj) * d;
            }
            dhidden[j] = acc;
            if a != 0.0 {
                for (g, d) in gw2[j * CLASSES..(j + 1) * CLASSES].iter_mut().zip(dl) {
                    *g += a * d;
                }
            }
        }

        // Through dropout, then relu.
        for (j, dh) in dhidden.iter_mut().enumerate() {
            let scale = cache
                .mask
                .as_ref()
                .map_or(1.0, |m| f64::from(m[i * HIDDEN + j]));
            *dh = if pre[j] > 0.0 { *dh * scale } else { 0.0 };
        }

        for (b, d) in gb1.iter_mut().zip(&dhidden) {
            *b += d;
        }
        for (k, &x) in cache.input.row(i).iter().enumerate() {
            if x != 0.0 {
                let x = f64::from(x);
                for (g, d) in gw1[k * HIDDEN..(k + 1) * HIDDEN].iter_mut().zip(&dhidden) {
                    *g += x * d;
                }
            }
        }
    }

    let narrow = |v: Vec<f64>| -> Vec<f32> { v.into_iter().map(|g| g as f32).collect() };
    let grads = ModelParams::from_tensors([
        Tensor::new(vec![INPUT, HIDDEN], narrow(gw1))?,
        Tensor::new(vec![HIDDEN], narrow(gb1))?,
        Tensor::new(vec![HIDDEN, CLASSES], narrow(gw2))?,
        Tensor::new(vec![CLASSES], narrow(gb2))?,
    ])?;
    Ok(Gradients(grads))
}

/// `param - step_size * grad`, elementwise.
pub fn sgd_step(mut params: ModelParams, grads: &Gradients, step_size: f32) -> ModelParams {
    apply_sgd(&mut params, grads, step_size);
    params
}

pub(crate) fn apply_sgd(params: &mut ModelParams, grads: &Gradients, step_size: f32) {
    for (p, g) in params.tensors_mut().into_iter().zip(grads.0.tensors()) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= step_size * gv;
        }
    }
}

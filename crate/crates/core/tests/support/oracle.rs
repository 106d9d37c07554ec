//! Double-precision reference network for tests. Written from the math, not
//! from the library: dense loops with no sparsity shortcuts.
#![allow(dead_code, clippy::needless_range_loop)]

use fedkit_core::rng::seeded;
use fedkit_core::{backward, forward, init_model, Mode, ModelParams, Tensor};
use rand::Rng;

pub const INPUT: usize = 784;
pub const HIDDEN: usize = 128;
pub const CLASSES: usize = 10;

#[derive(Debug, Clone)]
pub struct Net64 {
    /// `[INPUT][HIDDEN]`, input-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[HIDDEN][CLASSES]`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Per-sample intermediates of a forward pass.
pub struct Trace {
    pub pre: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
}

fn widen(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&v| f64::from(v)).collect()
}

pub fn softmax64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn sample_loss(logits: &[f64], label: u8) -> f64 {
    -softmax64(logits)[label as usize].max(1e-12).ln()
}

impl Net64 {
    pub fn from_params(p: &ModelParams) -> Self {
        Self {
            w1: widen(p.w1.data()),
            b1: widen(p.b1.data()),
            w2: widen(p.w2.data()),
            b2: widen(p.b2.data()),
        }
    }

    /// `scale[i][j]` multiplies hidden unit `j` of sample `i` after relu
    /// (dropout); `None` keeps every unit.
    pub fn trace(&self, x: &[Vec<f64>], scale: Option<&[Vec<f64>]>) -> Trace {
        let mut pre = Vec::new();
        let mut hidden = Vec::new();
        let mut logits = Vec::new();
        for (i, xi) in x.iter().enumerate() {
            let mut p = self.b1.clone();
            for j in 0..HIDDEN {
                for k in 0..INPUT {
                    p[j] += xi[k] * self.w1[k * HIDDEN + j];
                }
            }
            let h: Vec<f64> = (0..HIDDEN)
                .map(|j| p[j].max(0.0) * scale.map_or(1.0, |s| s[i][j]))
                .collect();
            let mut z = self.b2.clone();
            for c in 0..CLASSES {
                for j in 0..HIDDEN {
                    z[c] += h[j] * self.w2[j * CLASSES + c];
                }
            }
            pre.push(p);
            hidden.push(h);
            logits.push(z);
        }
        Trace {
            pre,
            hidden,
            logits,
        }
    }

    pub fn loss(&self, x: &[Vec<f64>], labels: &[u8], scale: Option<&[Vec<f64>]>) -> f64 {
        let t = self.trace(x, scale);
        t.logits
            .iter()
            .zip(labels)
            .map(|(z, &y)| sample_loss(z, y))
            .sum::<f64>()
            / x.len() as f64
    }

    /// Analytic gradient of the mean loss.
    pub fn grad(&self, x: &[Vec<f64>], labels: &[u8], scale: Option<&[Vec<f64>]>) -> Net64 {
        let n = x.len() as f64;
        let t = self.trace(x, scale);
        let mut g = Net64 {
            w1: vec![0.0; INPUT * HIDDEN],
            b1: vec![0.0; HIDDEN],
            w2: vec![0.0; HIDDEN * CLASSES],
            b2: vec![0.0; CLASSES],
        };
        for i in 0..x.len() {
            let mut dz = softmax64(&t.logits[i]);
            dz[labels[i] as usize] -= 1.0;
            for d in dz.iter_mut() {
                *d /= n;
            }
            for c in 0..CLASSES {
                g.b2[c] += dz[c];
                for j in 0..HIDDEN {
                    g.w2[j * CLASSES + c] += t.hidden[i][j] * dz[c];
                }
            }
            for j in 0..HIDDEN {
                if t.pre[i][j] <= 0.0 {
                    continue;
                }
                let s = scale.map_or(1.0, |s| s[i][j]);
                let dh: f64 = (0..CLASSES)
                    .map(|c| self.w2[j * CLASSES + c] * dz[c])
                    .sum::<f64>()
                    * s;
                g.b1[j] += dh;
                for k in 0..INPUT {
                    g.w1[k * HIDDEN + j] += x[i][k] * dh;
                }
            }
        }
        g
    }

    /// `self - step * g`.
    pub fn step(&self, g: &Net64, step: f64) -> Net64 {
        let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(a, b)| a - step * b).collect();
        Net64 {
            w1: sub(&self.w1, &g.w1),
            b1: sub(&self.b1, &g.b1),
            w2: sub(&self.w2, &g.w2),
            b2: sub(&self.b2, &g.b2),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }
}

/// Central finite differences of the mean loss for every parameter, in
/// double precision. Each perturbation only touches one hidden unit or one
/// logit, so the loss is re-evaluated from the cached trace. Returns the
/// gradient and whether any perturbation crossed a relu kink.
pub fn finite_difference(net: &Net64, x: &[Vec<f64>], labels: &[u8], h: f64) -> (Net64, bool) {
    let n = x.len();
    let t = net.trace(x, None);
    let base: Vec<f64> = (0..n)
        .map(|i| sample_loss(&t.logits[i], labels[i]))
        .collect();
    let base_sum: f64 = base.iter().sum();
    let mut kink = false;

    // Loss with logits of each sample shifted by `delta(i)`.
    let shifted = |delta: &dyn Fn(usize) -> [f64; CLASSES]| -> f64 {
        let mut total = base_sum;
        for i in 0..n {
            let d = delta(i);
            if d.iter().all(|&v| v == 0.0) {
                continue;
            }
            let z: Vec<f64> = t.logits[i].iter().zip(d).map(|(z, d)| z + d).collect();
            total += sample_loss(&z, labels[i]) - base[i];
        }
        total / n as f64
    };
    // Logit shift when hidden unit j of sample i moves its pre-activation by dp.
    let mut hidden_shift = |i: usize, j: usize, dp: f64| -> [f64; CLASSES] {
        let old = t.pre[i][j];
        let new = old + dp;
        if (old > 0.0) != (new > 0.0) && dp != 0.0 {
            kink = true;
        }
        let dh = new.max(0.0) - old.max(0.0);
        let mut d = [0.0; CLASSES];
        for (c, dc) in d.iter_mut().enumerate() {
            *dc = dh * net.w2[j * CLASSES + c];
        }
        d
    };

    let mut g = Net64 {
        w1: vec![0.0; INPUT * HIDDEN],
        b1: vec![0.0; HIDDEN],
        w2: vec![0.0; HIDDEN * CLASSES],
        b2: vec![0.0; CLASSES],
    };
    for c in 0..CLASSES {
        let plus = shifted(&|_| {
            let mut d = [0.0; CLASSES];
            d[c] = h;
            d
        });
        let minus = shifted(&|_| {
            let mut d = [0.0; CLASSES];
            d[c] = -h;
            d
        });
        g.b2[c] = (plus - minus) / (2.0 * h);
    }
    for j in 0..HIDDEN {
        for c in 0..CLASSES {
            let plus = shifted(&|i| {
                let mut d = [0.0; CLASSES];
                d[c] = h * t.hidden[i][j];
                d
            });
            let minus = shifted(&|i| {
                let mut d = [0.0; CLASSES];
                d[c] = -h * t.hidden[i][j];
                d
            });
            g.w2[j * CLASSES + c] = (plus - minus) / (2.0 * h);
        }
    }
    for j in 0..HIDDEN {
        let plus: Vec<_> = (0..n).map(|i| hidden_shift(i, j, h)).collect();
        let minus: Vec<_> = (0..n).map(|i| hidden_shift(i, j, -h)).collect();
        g.b1[j] = (shifted(&|i| plus[i]) - shifted(&|i| minus[i])) / (2.0 * h);
        for k in 0..INPUT {
            if x.iter().all(|xi| xi[k] == 0.0) {
                continue;
            }
            let plus: Vec<_> = (0..n).map(|i| hidden_shift(i, j, h * x[i][k])).collect();
            let minus: Vec<_> = (0..n).map(|i| hidden_shift(i, j, -h * x[i][k])).collect();
            g.w1[k * HIDDEN + j] = (shifted(&|i| plus[i]) - shifted(&|i| minus[i])) / (2.0 * h);
        }
    }
    (g, kink)
}

/// Largest `|a - b| / max(|a|, |b|)` over paired components; pairs that are
/// both exactly zero count as agreeing.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&a, &b)| {
            let scale = a.abs().max(b.abs());
            if scale == 0.0 {
                0.0
            } else {
                (a - b).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Sparse inputs in [0, 1] like normalized digits, with random labels.
pub fn sparse_batch(seed: u64, n: usize) -> (Tensor, Vec<u8>) {
    let mut rng = seeded(seed);
    let data = (0..n * INPUT)
        .map(|_| {
            if rng.random::<f32>() < 0.8 {
                0.0
            } else {
                rng.random::<f32>()
            }
        })
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..CLASSES as u8)).collect();
    (Tensor::new(vec![n, INPUT], data).unwrap(), labels)
}

pub fn rows64(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|&v| f64::from(v)).collect())
        .collect()
}

/// Max relative error of the library backward pass against central
/// differences on a 5-sample batch, or `None` when the seed puts a
/// pre-activation within the step of a relu kink.
pub fn gradient_error(seed: u64) -> Option<f64> {
    let mut params = init_model(seed);
    let mut rng = seeded(seed ^ 0xb1a5);
    for b in params.b1.data_mut().iter_mut().chain(params.b2.data_mut()) {
        *b = rng.random_range(-0.1..0.1);
    }
    let (x, labels) = sparse_batch(seed, 5);
    let (fd, kink) = finite_difference(&Net64::from_params(&params), &rows64(&x), &labels, 1e-3);
    if kink {
        return None;
    }
    let (_, cache) = forward(&params, &x, Mode::Eval).unwrap();
    let grads = backward(&params, &cache, &labels).unwrap();
    let analytic: Vec<f64> = grads.0.flatten().iter().map(|&v| f64::from(v)).collect();
    Some(max_relative_error(&analytic, &fd.flatten()))
}

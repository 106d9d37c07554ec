use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng;

use super::ops::{argmax, cross_entropy_sum};
use super::pass::{apply_sgd, backward, forward, DropoutMask, Mode};
use super::{ModelParams, INPUT};
use crate::config::TrainConfig;
use crate::dataset::Dataset;
use crate::error::{ensure, ContractViolation};
use crate::tensor::Tensor;

/// Rows per evaluation chunk. Results are merged chunk by chunk in order, so
/// a parallel evaluator using the same chunking reproduces them bit for bit.
pub const EVAL_CHUNK: usize = 1000;

/// Runs `config.local_epochs` passes over `data`, reshuffling each epoch and
/// stepping once per minibatch (the last batch of an epoch may be short).
/// The caller's params are left untouched.
pub fn train_epochs<R: Rng + ?Sized>(
    params: &ModelParams,
    data: &Dataset,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<ModelParams, ContractViolation> {
    let n = data.len();
    ensure!(n > 0, "training on an empty shard");
    config.validate_for_shard(n)?;

    let mut params = params.clone();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..config.local_epochs {
        order.shuffle(rng);
        for batch_idx in order.chunks(config.minibatch) {
            let images = data.images.gather_rows(batch_idx);
            let labels: Vec<u8> = batch_idx.iter().map(|&i| data.labels[i]).collect();
            let mask = DropoutMask::sample(rng, batch_idx.len(), config.dropout_rate);
            let (_, cache) = forward(&params, &images, Mode::Train(&mask))?;
            let grads = backward(&params, &cache, &labels)?;
            apply_sgd(&mut params, &grads, config.step_size);
        }
    }
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub n_samples: usize,
}

/// Raw counts behind an [`EvalResult`]; partial tallies merge associatively
/// as long as they are merged in a fixed order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalTally {
    pub correct: usize,
    pub loss_sum: f64,
    pub n_samples: usize,
}

impl EvalTally {
    /// Scores one chunk of samples in eval mode.
    pub fn score(
        params: &ModelParams,
        images: &Tensor,
        labels: &[u8],
    ) -> Result<Self, ContractViolation> {
        let (probs, _) = forward(params, images, Mode::Eval)?;
        let loss_sum = cross_entropy_sum(&probs, labels)?;
        let correct = labels
            .iter()
            .enumerate()
            .filter(|&(i, &label)| argmax(probs.row(i)) == label as usize)
            .count();
        Ok(Self {
            correct,
            loss_sum,
            n_samples: labels.len(),
        })
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            correct: self.correct + other.correct,
            loss_sum: self.loss_sum + other.loss_sum,
            n_samples: self.n_samples + other.n_samples,
        }
    }

    pub fn finish(self) -> Result<EvalResult, ContractViolation> {
        ensure!(self.n_samples > 0, "evaluation over zero samples");
        Ok(EvalResult {
            accuracy: self.correct as f64 / self.n_samples as f64,
            mean_loss: self.loss_sum / self.n_samples as f64,
            n_samples: self.n_samples,
        })
    }
}

/// Accuracy (argmax match, ties to the lowest class) and mean cross-entropy
/// of `params` over a labelled set, computed in [`EVAL_CHUNK`]-row chunks.
pub fn evaluate(
    params: &ModelParams,
    images: &Tensor,
    labels: &[u8],
) -> Result<EvalResult, ContractViolation> {
    ensure!(
        images.dims().len() == 2 && images.dims()[1] == INPUT && images.rows() == labels.len(),
        "images {:?} do not match {} labels",
        images.dims(),
        labels.len()
    );
    let mut tally = EvalTally::default();
    let mut start = 0;
    while start < labels.len() {
        let end = (start + EVAL_CHUNK).min(labels.len());
        let chunk = images.slice_rows(start, end);
        tally = tally.merge(EvalTally::score(params, &chunk, &labels[start..end])?);
        start = end;
    }
    tally.finish()
}

use rayon::prelude::*;

use fedkit_core::nn::EVAL_CHUNK;
use fedkit_core::{ContractViolation, Dataset, EvalResult, EvalTally, ModelParams};

/// Same result as [`fedkit_core::evaluate`], bit for bit: chunks are scored
/// in parallel and merged left to right.
pub fn par_evaluate(params: &ModelParams, data: &Dataset) -> Result<EvalResult, ContractViolation> {
    let n = data.len();
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let tallies = starts
        .par_iter()
        .map(|&start| {
            let end = (start + EVAL_CHUNK).min(n);
            let images = data.images.slice_rows(start, end);
            EvalTally::score(params, &images, &data.labels[start..end])
        })
        .collect::<Result<Vec<_>, _>>()?;
    tallies
        .into_iter()
        .fold(EvalTally::default(), EvalTally::merge)
        .finish()
}

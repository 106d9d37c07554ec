use alloc::vec::Vec;
use rand::seq::SliceRandom;

use crate::error::{ensure, ContractViolation};
use crate::idx::RawImages;
use crate::nn::INPUT;
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Normalized images (`[N, 784]`, values in `[0, 1]`) with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>) -> Result<Self, ContractViolation> {
        ensure!(
            images.dims().len() == 2 && images.dims()[1] == INPUT,
            "images have dims {:?}, expected [N, {}]",
            images.dims(),
            INPUT
        );
        ensure!(
            images.rows() == labels.len(),
            "{} images but {} labels",
            images.rows(),
            labels.len()
        );
        ensure!(labels.iter().all(|&l| l < 10), "label outside 0..9");
        Ok(Self { images, labels })
    }

    /// Divides every intensity by 255.
    pub fn normalize(raw: &RawImages, labels: Vec<u8>) -> Result<Self, ContractViolation> {
        let data = raw.pixels.iter().map(|&p| normalize_pixel(p)).collect();
        Self::new(Tensor::new(alloc::vec![raw.count, INPUT], data)?, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_histogram(&self) -> [usize; 10] {
        let mut counts = [0; 10];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

pub fn normalize_pixel(p: u8) -> f32 {
    p as f32 / 255.0
}

/// One client's private training samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub client_id: u16,
    pub data: Dataset,
    /// Row indices into the dataset the shard was cut from.
    pub source_indices: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A seeded permutation of `0..n`, used for every pooled or sharded draw.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    order
}

/// Cuts a seeded permutation of `train` into `n_clients` consecutive blocks of
/// `shard_size`. Client ids run `1..=n_clients` (id 0 is the aggregator).
/// Samples past `n_clients * shard_size` in the permutation go unused.
pub fn partition_shards(
    train: &Dataset,
    n_clients: usize,
    shard_size: usize,
    seed: u64,
) -> Result<Vec<Shard>, ContractViolation> {
    ensure!(
        n_clients > 0 && shard_size > 0,
        "need at least one client and one sample per shard"
    );
    ensure!(
        n_clients <= u16::MAX as usize,
        "{} clients exceed the 16-bit id space",
        n_clients
    );
    let demand = n_clients.checked_mul(shard_size);
    ensure!(
        demand.is_some_and(|d| d <= train.len()),
        "{} shards of {} exceed the {} available samples",
        n_clients,
        shard_size,
        train.len()
    );
    let order = seeded_permutation(train.len(), seed);
    Ok(order
        .chunks_exact(shard_size)
        .take(n_clients)
        .enumerate()
        .map(|(i, idx)| Shard {
            client_id: (i + 1) as u16,
            data: train.subset(idx),
            source_indices: idx.to_vec(),
        })
        .collect())
}

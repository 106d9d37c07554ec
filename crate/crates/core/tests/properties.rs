mod support {
    pub mod oracle;
}

use fedkit_core::rng::seeded;
use fedkit_core::wire::MIN_FRAME_LEN;
use fedkit_core::{
    decode, encode, fedavg_aggregate, init_model, softmax, train_epochs, ClientUpdate, Dataset,
    DecodeError, ModelParams, Tensor, TrainConfig, WireMessage,
};
use proptest::prelude::*;
use rand::{Rng, RngCore};
use support::oracle::Net64;

/// Params with arbitrary bit patterns, NaN payloads included.
fn raw_params(seed: u64) -> ModelParams {
    let mut rng = seeded(seed);
    let mut p = ModelParams::zeros();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = f32::from_bits(rng.next_u32());
        }
    }
    p
}

fn random_params(seed: u64, spread: f32) -> ModelParams {
    let mut rng = seeded(seed);
    let mut p = ModelParams::zeros();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-spread..spread);
        }
    }
    p
}

fn same_frame(msg: &WireMessage) {
    let bytes = encode(msg);
    let back = decode(&bytes).expect("valid frame decodes");
    assert_eq!(encode(&back), bytes, "re-encoding differs");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn global_model_round_trips(round in any::<u32>(), seed in any::<u64>()) {
        same_frame(&WireMessage::GlobalModel { round, params: raw_params(seed) });
    }

    #[test]
    fn client_update_round_trips(round in any::<u32>(), id in any::<u16>(), n in 1u32.., seed in any::<u64>()) {
        let params = raw_params(seed);
        let msg = WireMessage::ClientUpdate(ClientUpdate { client_id: id, round, sample_count: n, params: params.clone() });
        same_frame(&msg);
        match decode(&encode(&msg)).unwrap() {
            WireMessage::ClientUpdate(u) => {
                prop_assert_eq!((u.client_id, u.round, u.sample_count), (id, round, n));
                prop_assert!(u.params.bit_eq(&params));
            }
            other => prop_assert!(false, "decoded {:?}", other.kind()),
        }
    }

    #[test]
    fn join_round_trips(id in any::<u16>()) {
        let bytes = encode(&WireMessage::JoinRequest { client_id: id });
        prop_assert_eq!(bytes.len(), MIN_FRAME_LEN);
        prop_assert_eq!(decode(&bytes).unwrap(), WireMessage::JoinRequest { client_id: id });
    }

    #[test]
    fn any_single_byte_flip_is_caught(pos in 0usize..MIN_FRAME_LEN, flip in 1u8..=255, id in any::<u16>()) {
        let mut bytes = encode(&WireMessage::JoinRequest { client_id: id });
        bytes[pos] ^= flip;
        let is_crc_mismatch = matches!(decode(&bytes), Err(DecodeError::CrcMismatch { .. }));
        prop_assert!(is_crc_mismatch);
    }

    #[test]
    fn softmax_rows_normalize(values in proptest::collection::vec(-50.0f32..50.0, 10 * 8)) {
        let p = softmax(&Tensor::new(vec![8, 10], values).unwrap());
        for i in 0..8 {
            let row = p.row(i);
            let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6, "row {} sums to {}", i, sum);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }
}

#[test]
fn fuzzed_bytes_never_panic() {
    let mut rng = seeded(0xf22);
    let valid = encode(&WireMessage::GlobalModel {
        round: 3,
        params: init_model(1),
    });
    let mut decoded_ok = 0;
    for i in 0..10_000 {
        let bytes: Vec<u8> = if i % 2 == 0 {
            let len = rng.random_range(0..256);
            (0..len).map(|_| rng.random()).collect()
        } else {
            // Truncated or corrupted real frames reach the deeper checks.
            let mut b = valid[..rng.random_range(0..valid.len())].to_vec();
            if !b.is_empty() && rng.random::<bool>() {
                let at = rng.random_range(0..b.len());
                b[at] ^= rng.random_range(1..=255u8);
            }
            b
        };
        if decode(&bytes).is_ok() {
            decoded_ok += 1;
        }
    }
    assert_eq!(decoded_ok, 0);
}

fn update(client_id: u16, sample_count: u32, params: ModelParams) -> ClientUpdate {
    ClientUpdate {
        client_id,
        round: 7,
        sample_count,
        params,
    }
}

#[test]
fn fedavg_stays_in_convex_hull() {
    let mut rng = seeded(20);
    let updates: Vec<ClientUpdate> = (1..=20)
        .map(|id| {
            update(
                id,
                rng.random_range(1..1000),
                random_params(u64::from(id), 2.0),
            )
        })
        .collect();
    let out = fedavg_aggregate(&updates).unwrap().flatten();
    let flats: Vec<Vec<f32>> = updates.iter().map(|u| u.params.flatten()).collect();
    for (i, &v) in out.iter().enumerate() {
        let lo = flats.iter().map(|f| f[i]).fold(f32::INFINITY, f32::min);
        let hi = flats.iter().map(|f| f[i]).fold(f32::NEG_INFINITY, f32::max);
        assert!(
            lo <= v && v <= hi,
            "coordinate {i}: {v} outside [{lo}, {hi}]"
        );
    }
}

#[test]
fn fedavg_ignores_update_order() {
    let updates: Vec<ClientUpdate> = (1..=12)
        .map(|id| {
            update(
                id,
                100 + u32::from(id),
                random_params(u64::from(id) + 40, 1.0),
            )
        })
        .collect();
    let reference = fedavg_aggregate(&updates).unwrap();
    let mut rng = seeded(5);
    for _ in 0..5 {
        let mut shuffled = updates.clone();
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut rng);
        assert!(fedavg_aggregate(&shuffled).unwrap().bit_eq(&reference));
    }
}

#[test]
fn fedavg_of_copies_is_identity() {
    let p = random_params(77, 3.0);
    let copies: Vec<ClientUpdate> = (1..=7).map(|id| update(id, 300, p.clone())).collect();
    assert!(fedavg_aggregate(&copies).unwrap().bit_eq(&p));
}

#[test]
fn equal_weights_give_arithmetic_mean() {
    let updates: Vec<ClientUpdate> = (1..=10)
        .map(|id| update(id, 300, random_params(u64::from(id), 1.0)))
        .collect();
    let out = fedavg_aggregate(&updates).unwrap().flatten();
    let flats: Vec<Vec<f32>> = updates.iter().map(|u| u.params.flatten()).collect();
    for (i, &v) in out.iter().enumerate() {
        let mean = flats.iter().map(|f| f64::from(f[i])).sum::<f64>() / flats.len() as f64;
        assert!((f64::from(v) - mean).abs() <= 1e-6, "coordinate {i}");
    }
}

#[test]
fn full_batch_epoch_is_one_gradient_step() {
    let n = 24;
    let mut rng = seeded(8);
    let images: Vec<f32> = (0..n * 784)
        .map(|_| {
            if rng.random::<f32>() < 0.7 {
                0.0
            } else {
                rng.random::<f32>()
            }
        })
        .collect();
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..10)).collect();
    let data = Dataset::new(Tensor::new(vec![n, 784], images).unwrap(), labels.clone()).unwrap();
    let config = TrainConfig {
        local_epochs: 1,
        minibatch: n,
        dropout_rate: 0.0,
        step_size: 0.1,
        ..Default::default()
    };
    let start = init_model(4);
    let trained = train_epochs(&start, &data, &config, &mut seeded(9)).unwrap();

    let net = Net64::from_params(&start);
    let x: Vec<Vec<f64>> = (0..n)
        .map(|i| data.images.row(i).iter().map(|&v| f64::from(v)).collect())
        .collect();
    let expected = net.step(&net.grad(&x, &labels, None), 0.1).flatten();
    for (i, (&got, want)) in trained.flatten().iter().zip(expected).enumerate() {
        assert!(
            (f64::from(got) - want).abs() <= 1e-5,
            "parameter {i}: {got} vs {want}"
        );
    }
}

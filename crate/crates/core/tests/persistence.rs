mod common;

use common::*;
use ngrf_core::antenna::ArraySpec;
use ngrf_core::baselines::MlpBaseline;
use ngrf_core::checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, AnyModel, Checkpoint};
use ngrf_core::dataset::{split_indices, Dataset, Measurement};
use ngrf_core::model::Query;
use ngrf_core::trainer::{train, TrainConfig};
use ngrf_core::{Error, Vec3};
use proptest::prelude::*;
use rand::Rng;

fn queries(n: usize, seed: u64) -> Vec<Query> {
    let mut r = rng(seed);
    (0..n).map(|_| Query { tx: Vec3::new(0.2, 0.3, 0.9), rx: rand_vec3(&mut r, 0.0, 2.0) }).collect()
}

fn roundtrip(ck: &Checkpoint) -> Checkpoint {
    let mut buf = Vec::new();
    write_checkpoint(ck, &mut buf).unwrap();
    assert_eq!(&buf[..8], b"NGRFCKPT");
    assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
    read_checkpoint(&mut buf.as_slice()).unwrap()
}

#[test]
fn every_model_kind_round_trips_bitwise() {
    let models = vec![
        AnyModel::Ngrf(tiny_ngrf(1, 7, 2, 2)),
        AnyModel::Cs1(tiny_cs1(2, 5, 2, 2, 2)),
        AnyModel::Cs2(tiny_cs2(3, 5, 1, 3, 2)),
        AnyModel::Mlp(MlpBaseline::new(2, 2, 4, &[16, 16], 4)),
    ];
    let q = queries(9, 5);
    for m in models {
        let ck = Checkpoint::new(m);
        let back = roundtrip(&ck);
        assert_eq!(back, ck);
        assert_eq!(back.model.predict(&q).unwrap(), ck.model.predict(&q).unwrap());
    }
}

#[test]
fn trained_checkpoint_keeps_history_and_config() {
    let mut r = rng(6);
    let tx = Vec3::new(0.5, 0.5, 0.5);
    let data: Vec<Measurement> =
        (0..20).map(|_| Measurement { tx, rx: rand_vec3(&mut r, 0.0, 1.0), h: rand_channel(&mut r, 2, 1, 1.0) }).collect();
    let cfg = TrainConfig { iterations: 10, batch_size: 4, eval_every: 5, ..Default::default() };
    let out = train(tiny_ngrf(7, 5, 2, 1), &data[..16], &data[16..], &cfg).unwrap();
    let ck = Checkpoint {
        model: AnyModel::Ngrf(out.best.clone()),
        iteration: out.best_iteration,
        train_config: Some(cfg.clone()),
        history: out.history.clone(),
        bounds: Some(bounds(0.0, 1.0)),
        carrier_hz: Some(2.4e9),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.history, ck.history);
    assert_eq!(back.train_config, ck.train_config);
    assert_eq!(back.bounds, ck.bounds);
    assert_eq!(back.iteration, ck.iteration);
    assert_eq!(back, ck);
    let q: Vec<Query> = data.iter().map(Measurement::query).collect();
    assert_eq!(back.model.predict(&q).unwrap(), AnyModel::Ngrf(out.best).predict(&q).unwrap());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let ck = Checkpoint::new(AnyModel::Ngrf(tiny_ngrf(1, 3, 1, 1)));
    let mut buf = Vec::new();
    write_checkpoint(&ck, &mut buf).unwrap();

    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Format(_))));

    let mut bad = buf.clone();
    bad[8] = 9;
    assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Format(_))));

    let truncated = &buf[..buf.len() - 5];
    assert!(read_checkpoint(&mut &truncated[..]).is_err());

    let mut trailing = buf.clone();
    trailing.push(0);
    assert!(read_checkpoint(&mut trailing.as_slice()).is_err());

    assert!(load_checkpoint("/nonexistent/model.ckpt").is_err());
}

fn random_dataset(n: usize, nt: usize, nr: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    Dataset {
        nt,
        nr,
        carrier_hz: 2.4e9,
        tx_array: Some(ArraySpec::Ura { rows: 1, cols: nt, spacing_lambda: 0.5 }),
        rx_array: Some(ArraySpec::Ula { n: nr, spacing_lambda: 0.5 }),
        bounds: Some(bounds(-1.0, 1.0)),
        records: (0..n)
            .map(|_| Measurement {
                tx: rand_vec3(&mut r, -1.0, 1.0),
                rx: rand_vec3(&mut r, -1.0, 1.0),
                h: rand_channel(&mut r, nt, nr, 1e-3),
            })
            .collect(),
    }
}

#[test]
fn dataset_round_trip_is_exact() {
    let ds = random_dataset(37, 4, 2, 1);
    let mut buf = Vec::new();
    ds.write_to(&mut buf).unwrap();
    assert_eq!(&buf[..8], b"NGRFDATA");
    assert_eq!(Dataset::read_from(&mut buf.as_slice()).unwrap(), ds);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ngrf");
    ds.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), ds);
}

#[test]
fn corrupt_datasets_are_rejected() {
    let ds = random_dataset(5, 2, 1, 2);
    let mut buf = Vec::new();
    ds.write_to(&mut buf).unwrap();
    let mut bad = buf.clone();
    bad[3] = 0;
    assert!(matches!(Dataset::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
    assert!(Dataset::read_from(&mut &buf[..buf.len() - 8]).is_err());
}

#[test]
fn bounds_fall_back_to_positions() {
    let mut ds = random_dataset(10, 1, 1, 3);
    ds.bounds = None;
    let b = ds.bounds_or_fit().unwrap();
    for m in &ds.records {
        assert!(b.contains(m.rx) && b.contains(m.tx));
    }
    ds.records.clear();
    assert!(ds.bounds_or_fit().is_err());
}

#[test]
fn split_is_seeded_disjoint_and_eighty_twenty() {
    let (a, b) = split_indices(625, 0.8, 1);
    assert_eq!((a.len(), b.len()), (500, 125));
    let mut all: Vec<usize> = a.iter().chain(&b).cloned().collect();
    all.sort();
    assert_eq!(all, (0..625).collect::<Vec<_>>());
    assert_eq!(split_indices(625, 0.8, 1), (a.clone(), b));
    assert_ne!(split_indices(625, 0.8, 2).0, a);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn any_dataset_round_trips(seed in any::<u64>(), n in 0usize..20, nt in 1usize..5, nr in 1usize..3) {
        let mut ds = random_dataset(n, nt, nr, seed);
        if rng(seed).gen_bool(0.5) {
            ds.tx_array = None;
            ds.rx_array = None;
            ds.bounds = None;
        }
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        prop_assert_eq!(Dataset::read_from(&mut buf.as_slice()).unwrap(), ds);
    }
}

#[test]
fn dataset_with_trailing_bytes_is_rejected() {
    let mut buf = Vec::new();
    random_dataset(3, 1, 1, 4).write_to(&mut buf).unwrap();
    buf.push(7);
    assert!(matches!(Dataset::read_from(&mut buf.as_slice()), Err(Error::Format(_))));
}

use std::path::Path;

use lll_core::bench::toy::{DataConfig, ToyKind};
use lll_core::bench::{AdapterConfig, Experiment, RunSpec, Variant};
use lll_core::cli::checkpoint::Checkpoint;
use lll_core::llltrain::{LllConfig, TrainMode, Trainer};
use lll_core::numcore::{AdamWConfig, AdamWState, ParamStore, Tensor};
use lll_core::tinylm::ModelConfig;
use proptest::prelude::*;

fn tiny() -> Experiment {
    Experiment {
        model: ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 32,
            adapter_position: Some(1),
            ..ModelConfig::default()
        },
        adapter: AdapterConfig {
            latent_dim: 8,
            ..AdapterConfig::default()
        },
        train: LllConfig {
            epochs_per_task: 4,
            alt_turns: 1,
            mode: TrainMode::Alt,
            gamma: 0.2,
            ..LllConfig::default()
        },
        data: DataConfig {
            n_train: 24,
            n_test: 8,
            data_seed: 3,
        },
    }
}

fn trainer() -> Trainer {
    tiny()
        .trainer(&RunSpec {
            variant: Variant::Rcvae,
            order: vec![ToyKind::Slot, ToyKind::Cls],
            gamma: 0.2,
            seed: 5,
        })
        .unwrap()
}

fn snapshot(t: &Trainer) -> Checkpoint {
    Checkpoint {
        config_digest: "d".into(),
        stage_label: "test".into(),
        config_text: String::new(),
        model: t.model.clone(),
        rvae: t.rvae.clone(),
        lll: t.cfg.clone(),
        state: t.state.clone(),
    }
}

fn restore(ck: Checkpoint, like: &Trainer) -> Trainer {
    Trainer::from_state(ck.model, ck.rvae, ck.lll, like.vocab.clone(), like.tasks.clone(), ck.state).unwrap()
}

fn assert_bitwise(a: &ParamStore, b: &ParamStore) {
    assert_eq!(a.len(), b.len());
    for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
        assert_eq!(na, nb);
        let (xa, xb): (Vec<u64>, Vec<u64>) = (
            ta.data().iter().map(|x| x.to_bits()).collect(),
            tb.data().iter().map(|x| x.to_bits()).collect(),
        );
        assert_eq!(xa, xb, "{na}");
    }
}

#[test]
fn round_trip_then_epoch_matches_uninterrupted_epoch() {
    let mut a = trainer();
    // Into the second stage so replay, the optimizer and every RNG stream
    // carry state.
    a.begin_stage().unwrap();
    for _ in 0..4 {
        a.run_epoch().unwrap();
    }
    a.finish_stage().unwrap();
    a.begin_stage().unwrap();
    a.run_epoch().unwrap();

    let ck = snapshot(&a);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    let mut b = restore(loaded, &a);

    let ra = a.run_epoch().unwrap();
    let rb = b.run_epoch().unwrap();
    assert_eq!(ra.loss.total.to_bits(), rb.loss.total.to_bits());
    assert_bitwise(&a.state.params, &b.state.params);
    assert_eq!(a.state.optimizer, b.state.optimizer);
    assert_eq!(a.state.progress, b.state.progress);

    let fa = a.run(&mut lll_core::llltrain::NoopObserver).unwrap();
    let fb = b.run(&mut lll_core::llltrain::NoopObserver).unwrap();
    assert_eq!(serde_json::to_string(&fa).unwrap(), serde_json::to_string(&fb).unwrap());
}

#[test]
fn corrupt_files_are_rejected() {
    let t = trainer();
    let bytes = snapshot(&t).to_bytes().unwrap();
    let p = Path::new("x.ckpt");
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
    assert!(Checkpoint::from_bytes(&bytes[1..], p).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra, p).is_err());
    assert!(Checkpoint::from_bytes(&bytes, p).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tensors_and_moments_round_trip_exactly(
        vals in proptest::collection::vec(proptest::num::f64::ANY, 1..40),
        step in 0u64..1000,
    ) {
        let mut t = trainer();
        let n = vals.len();
        let mut params = ParamStore::new();
        params.insert("a", Tensor::new(vec![n], vals.clone()).unwrap());
        params.insert("b.w", Tensor::new(vec![1, n], vals.iter().rev().copied().collect()).unwrap());
        let mut m = std::collections::BTreeMap::new();
        let mut v = std::collections::BTreeMap::new();
        m.insert("a".to_string(), vals.clone());
        v.insert("a".to_string(), vals.iter().map(|x| x * 0.5).collect());
        t.state.params = params;
        t.state.optimizer = AdamWState::from_moments(step, AdamWConfig::default(), m, v).unwrap();
        let ck = snapshot(&t);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), Path::new("p")).unwrap();
        assert_bitwise(&back.state.params, &ck.state.params);
        let bits = |x: &[f64]| x.iter().map(|y| y.to_bits()).collect::<Vec<_>>();
        let (m1, v1) = back.state.optimizer.moments();
        let (m0, v0) = ck.state.optimizer.moments();
        prop_assert_eq!(bits(&m1["a"]), bits(&m0["a"]));
        prop_assert_eq!(bits(&v1["a"]), bits(&v0["a"]));
        prop_assert_eq!(back.state.optimizer.step, step);
    }
}

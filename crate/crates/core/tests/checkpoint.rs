//! Checkpoint archive round-trips and the fine-tune carry-over filter.

use irstd_core::checkpoint::{
    carries_over_to_finetune, load_checkpoint, save_checkpoint, CheckpointMeta,
};
use irstd_core::nn::{Init, ParamStore};
use irstd_core::optim::{AdamW, AdamWConfig};
use irstd_core::Error;
use ndarray::{ArrayD, IxDyn};

fn demo_store(seed: u64) -> ParamStore {
    let mut store = ParamStore::new(seed);
    store.make("encoder.stage1.embed.weight", &[4, 3, 2, 2], Init::KaimingIn);
    store.make("encoder.stage1.embed.bias", &[4], Init::Normal(0.2));
    store.make("queries.encoder", &[4, 8], Init::Normal(1.0));
    store.make("queries.fpn", &[4, 8], Init::Normal(1.0));
    store.make("query_engine.sparse.stage1.transition.weight", &[8, 8], Init::KaimingIn);
    store.make("fpn.lateral1.weight", &[8, 4, 1, 1], Init::KaimingIn);
    store.make("decoder.hyper.lin0.weight", &[8, 8], Init::KaimingIn);
    store
}

fn bits(a: &ArrayD<f64>) -> Vec<u64> {
    a.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn archive_round_trips_params_optimizer_meta_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.tar");
    let store = demo_store(3);
    let mut opt = AdamW::new(&store, AdamWConfig::default());
    // Take one step so moments are nonzero and worth reloading.
    for p in store.params() {
        let mut inner = p.borrow_mut();
        let g = ArrayD::from_shape_fn(inner.grad.raw_dim(), |_| 0.25);
        inner.grad = g;
    }
    opt.step(&store, 1e-3);

    let meta = CheckpointMeta::new("distill", 1, 3, 300);
    let config = "model.stem=2\ndistill.steps=300\n";
    save_checkpoint(&path, &meta, config, &store, &opt.state()).unwrap();

    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.meta, meta);
    assert_eq!(loaded.config_text, config);
    assert_eq!(loaded.params.len(), store.len());
    for p in store.params() {
        let arr = &loaded.params[&p.name()];
        assert_eq!(bits(arr), bits(&p.value()), "param {}", p.name());
    }
    // Optimizer entries: t plus m and v per parameter.
    assert_eq!(loaded.optim.len(), 1 + 2 * store.len());
    assert_eq!(loaded.optim["optim.t"][[0]], 1.0);
    let state: std::collections::BTreeMap<String, ArrayD<f64>> =
        opt.state().into_iter().collect();
    for (name, arr) in &loaded.optim {
        assert_eq!(bits(arr), bits(&state[name]), "optim entry {name}");
    }
}

#[test]
fn identical_state_writes_byte_identical_archives() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.tar");
    let b = dir.path().join("b.tar");
    let store = demo_store(9);
    let opt = AdamW::new(&store, AdamWConfig::default());
    let meta = CheckpointMeta::new("finetune", 42, 9, 500);
    save_checkpoint(&a, &meta, "k=v\n", &store, &opt.state()).unwrap();
    save_checkpoint(&b, &meta, "k=v\n", &store, &opt.state()).unwrap();
    let bytes_a = std::fs::read(&a).unwrap();
    let bytes_b = std::fs::read(&b).unwrap();
    assert!(!bytes_a.is_empty());
    assert_eq!(bytes_a, bytes_b, "archive bytes must be deterministic");
}

#[test]
fn apply_all_restores_a_fresh_store_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.tar");
    let trained = demo_store(3);
    // Perturb so the checkpoint differs from the fresh initialization.
    for p in trained.params() {
        let mut v = p.value();
        v.mapv_inplace(|x| x * 1.5 + 0.1);
        p.set_value(v);
    }
    let meta = CheckpointMeta::new("distill", 7, 3, 10);
    save_checkpoint(&path, &meta, "", &trained, &[]).unwrap();

    let fresh = demo_store(99);
    load_checkpoint(&path).unwrap().apply_all(&fresh).unwrap();
    for (a, b) in trained.params().iter().zip(fresh.params()) {
        assert_eq!(bits(&a.value()), bits(&b.value()), "param {}", a.name());
    }
}

#[test]
fn apply_all_rejects_architecture_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.tar");
    let store = demo_store(3);
    let meta = CheckpointMeta::new("distill", 0, 3, 10);
    save_checkpoint(&path, &meta, "", &store, &[]).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();

    // Model with an extra parameter the checkpoint does not know.
    let mut extra = demo_store(3);
    extra.make("decoder.hyper.lin1.weight", &[8, 8], Init::KaimingIn);
    assert!(matches!(ckpt.apply_all(&extra), Err(Error::Checkpoint(_))));

    // Model missing a checkpointed parameter.
    let mut smaller = ParamStore::new(3);
    smaller.make("encoder.stage1.embed.weight", &[4, 3, 2, 2], Init::KaimingIn);
    assert!(matches!(ckpt.apply_all(&smaller), Err(Error::Checkpoint(_))));

    // Same name, different shape.
    let mut reshaped = ParamStore::new(3);
    reshaped.make("encoder.stage1.embed.weight", &[4, 3, 3, 3], Init::KaimingIn);
    reshaped.make("encoder.stage1.embed.bias", &[4], Init::Normal(0.2));
    reshaped.make("queries.encoder", &[4, 8], Init::Normal(1.0));
    reshaped.make("queries.fpn", &[4, 8], Init::Normal(1.0));
    reshaped.make("query_engine.sparse.stage1.transition.weight", &[8, 8], Init::KaimingIn);
    reshaped.make("fpn.lateral1.weight", &[8, 4, 1, 1], Init::KaimingIn);
    reshaped.make("decoder.hyper.lin0.weight", &[8, 8], Init::KaimingIn);
    assert!(matches!(ckpt.apply_all(&reshaped), Err(Error::Checkpoint(_))));
}

#[test]
fn carry_over_restores_encoder_and_queries_but_not_fpn_or_decoder() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("distill.tar");
    let distilled = demo_store(3);
    for p in distilled.params() {
        let mut v = p.value();
        v.mapv_inplace(|x| x + 10.0);
        p.set_value(v);
    }
    let meta = CheckpointMeta::new("distill", 100, 3, 100);
    save_checkpoint(&path, &meta, "", &distilled, &[]).unwrap();

    let finetune = demo_store(55);
    let fresh_fpn = finetune.get("fpn.lateral1.weight").unwrap().value();
    let fresh_dec = finetune.get("decoder.hyper.lin0.weight").unwrap().value();
    let fresh_qfpn = finetune.get("queries.fpn").unwrap().value();

    let applied = load_checkpoint(&path)
        .unwrap()
        .apply_carry_over(&finetune)
        .unwrap();
    assert_eq!(
        applied,
        vec![
            "encoder.stage1.embed.bias".to_string(),
            "encoder.stage1.embed.weight".to_string(),
            "queries.encoder".to_string(),
            "query_engine.sparse.stage1.transition.weight".to_string(),
        ]
    );
    for name in &applied {
        assert_eq!(
            bits(&finetune.get(name).unwrap().value()),
            bits(&distilled.get(name).unwrap().value()),
            "carried param {name}"
        );
    }
    // Re-initialized groups keep their fresh values.
    assert_eq!(bits(&finetune.get("fpn.lateral1.weight").unwrap().value()), bits(&fresh_fpn));
    assert_eq!(bits(&finetune.get("decoder.hyper.lin0.weight").unwrap().value()), bits(&fresh_dec));
    assert_eq!(bits(&finetune.get("queries.fpn").unwrap().value()), bits(&fresh_qfpn));
}

#[test]
fn carry_over_filter_names_the_surviving_groups() {
    assert!(carries_over_to_finetune("encoder.stage1.block0.dw.weight"));
    assert!(carries_over_to_finetune("queries.encoder"));
    assert!(carries_over_to_finetune("query_engine.dense.stage2.offset_head.weight"));
    assert!(!carries_over_to_finetune("queries.fpn"));
    assert!(!carries_over_to_finetune("queries.decoder"));
    assert!(!carries_over_to_finetune("fpn.lateral1.weight"));
    assert!(!carries_over_to_finetune("decoder.block0.self_attn.q.weight"));
    assert!(!carries_over_to_finetune("distill_head.granularity.lin0.weight"));
    assert!(!carries_over_to_finetune("encoder")); // prefix must be a path segment
}

#[test]
fn optimizer_state_from_archive_feeds_adamw_resume() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.tar");
    let store = demo_store(21);
    let mut opt = AdamW::new(&store, AdamWConfig::default());
    for step in 0..3 {
        store.zero_grads();
        for p in store.params() {
            let mut inner = p.borrow_mut();
            for (i, g) in inner.grad.iter_mut().enumerate() {
                *g = ((step * 7 + i) as f64 * 0.11).cos();
            }
        }
        opt.step(&store, 2e-3);
    }
    let meta = CheckpointMeta::new("distill", 3, 21, 10);
    save_checkpoint(&path, &meta, "", &store, &opt.state()).unwrap();

    let resumed_store = demo_store(21);
    let ckpt = load_checkpoint(&path).unwrap();
    ckpt.apply_all(&resumed_store).unwrap();
    let mut resumed_opt = AdamW::new(&resumed_store, AdamWConfig::default());
    resumed_opt.load_state(&ckpt.optim).unwrap();
    assert_eq!(resumed_opt.steps_taken(), 3);

    // One more identical step on both must agree bitwise.
    for (s, o) in [(&store, &mut opt), (&resumed_store, &mut resumed_opt)] {
        s.zero_grads();
        for p in s.params() {
            let mut inner = p.borrow_mut();
            for (i, g) in inner.grad.iter_mut().enumerate() {
                *g = (i as f64 * 0.37).sin();
            }
        }
        o.step(s, 2e-3);
    }
    for (a, b) in store.params().iter().zip(resumed_store.params()) {
        assert_eq!(bits(&a.value()), bits(&b.value()), "param {}", a.name());
    }
}

#[test]
fn damaged_or_foreign_archives_are_rejected() {
    let dir = tempfile::tempdir().unwrap();

    // Truncated file.
    let path = dir.path().join("trunc.tar");
    let store = demo_store(3);
    let meta = CheckpointMeta::new("distill", 0, 3, 1);
    save_checkpoint(&path, &meta, "", &store, &[]).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&path).is_err());

    // Tar with an entry outside the schema.
    let foreign = dir.path().join("foreign.tar");
    {
        let file = std::fs::File::create(&foreign).unwrap();
        let mut builder = tar::Builder::new(file);
        let data = b"not a checkpoint";
        let mut header = tar::Header::new_gnu();
        header.set_size(data.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        builder.append_data(&mut header, "rogue.bin", &data[..]).unwrap();
        builder.finish().unwrap();
    }
    assert!(matches!(load_checkpoint(&foreign), Err(Error::Checkpoint(_))));

    // Missing file propagates as an I/O error.
    assert!(load_checkpoint(&dir.path().join("absent.tar")).is_err());
}

#[test]
fn multidimensional_arrays_survive_npy_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.tar");
    let mut store = ParamStore::new(17);
    let p = store.make("encoder.stage2.block1.pw1.weight", &[5, 3, 3, 3], Init::KaimingIn);
    // Include values that stress the binary round-trip.
    let mut v = p.value();
    v[[0, 0, 0, 0]] = f64::MIN_POSITIVE;
    v[[1, 1, 1, 1]] = -1.0 / 3.0;
    v[[2, 2, 2, 2]] = 1e300;
    v[[4, 2, 2, 2]] = -0.0;
    p.set_value(v.clone());
    let meta = CheckpointMeta::new("distill", 0, 17, 1);
    save_checkpoint(&path, &meta, "", &store, &[]).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let arr = &loaded.params["encoder.stage2.block1.pw1.weight"];
    assert_eq!(arr.shape(), &[5, 3, 3, 3]);
    assert_eq!(bits(arr), bits(&v));
}

#[test]
fn tar_entries_follow_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.tar");
    let store = demo_store(3);
    let opt = AdamW::new(&store, AdamWConfig::default());
    let meta = CheckpointMeta::new("distill", 0, 3, 1);
    save_checkpoint(&path, &meta, "a=b\n", &store, &opt.state()).unwrap();

    let file = std::fs::File::open(&path).unwrap();
    let mut archive = tar::Archive::new(file);
    let names: Vec<String> = archive
        .entries()
        .unwrap()
        .map(|e| e.unwrap().path().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names[0], "meta.json");
    assert_eq!(names[1], "config.txt");
    assert!(names.contains(&"params/queries.encoder.npy".to_string()));
    assert!(names.contains(&"optim/optim.t.npy".to_string()));
    assert!(names.contains(&"optim/optim.queries.encoder.m.npy".to_string()));
    let params: Vec<&String> = names.iter().filter(|n| n.starts_with("params/")).collect();
    assert_eq!(params.len(), store.len());
    // Sorted within each section for byte determinism.
    let mut sorted = params.clone();
    sorted.sort();
    assert_eq!(params, sorted);
}

#[path = "support/corruptions.rs"]
mod corruptions;

use zsad_core::io::{
    decode_bundle, decode_checkpoint, encode_bundle, encode_checkpoint, gen_synthetic, heatmap_bytes, load_dataset,
    read_bundle, read_checkpoint, write_bundle, write_checkpoint, write_dataset, write_heatmap, Checkpoint, SynthSpec,
};
use zsad_core::metrics::auroc;
use zsad_core::numcore::Tensor;
use zsad_core::train::train;
use zsad_core::{ArchConfig, GridMap, TrainConfig};

use corruptions::{bundle_cases, checkpoint_cases, outcome, parts, random_bundle, tensor_entry};

#[test]
fn bundle_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..20 {
        let b = random_bundle(seed, seed % 3 != 0);
        let bytes = encode_bundle(&b).unwrap();
        let back = decode_bundle(&bytes).unwrap();
        assert_eq!(back, b);
        for (x, y) in back.clip_locals.iter().zip(&b.clip_locals) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_eq!(encode_bundle(&back).unwrap(), bytes);

        let path = dir.path().join(format!("{seed}.bundle"));
        write_bundle(&b, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        assert_eq!(read_bundle(&path).unwrap(), b);
    }
}

#[test]
fn bundle_header_layout() {
    let b = random_bundle(1, true);
    let bytes = encode_bundle(&b).unwrap();
    assert_eq!(&bytes[..8], b"SSVPFEAT");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    let (header, payload) = parts(&bytes);
    assert_eq!(header["grid"], serde_json::json!([3, 4]));
    assert_eq!(header["has_mask"], true);
    assert_eq!(header["category"], "c1");
    let g = tensor_entry(&mut header.clone(), "clip_global").clone();
    assert_eq!(g["dtype"], "f32");
    assert_eq!(g["shape"], serde_json::json!([5]));
    let first = f32::from_le_bytes(payload[0..4].try_into().unwrap());
    assert_eq!(f64::from(first), b.clip_global.data()[0]);
}

#[test]
fn bundle_corruptions_have_distinct_codes() {
    for case in bundle_cases(&random_bundle(2, true)) {
        assert!(case.ok(), "{}: expected {}, got {}", case.name, case.expected, case.got);
    }
}

fn tiny_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 4,
        seed,
        arch: ArchConfig {
            d_head: 4,
            text_hidden: 8,
            d_latent: 4,
            n_latent_tokens: 2,
            d_key: 4,
            vae_hidden: 8,
            gate_hidden: 4,
            prompt_bg_len: 2,
            prompt_state_len: 1,
            ..ArchConfig::desk()
        },
        ..TrainConfig::desk()
    }
}

fn tiny_checkpoint(seed: u64) -> Checkpoint {
    let spec = SynthSpec { n_categories: 1, samples_per_split: 8, grid: (3, 3), d_clip: 6, d_dino: 5, region_size: (1, 2), ..SynthSpec::default() };
    let data = gen_synthetic(&spec).unwrap().categories.remove(0).train;
    let cfg = TrainConfig { frozen: vec!["vtam.gate.local".into()], ..tiny_train_config(seed) };
    let t = train(&data, &cfg).unwrap();
    Checkpoint::from_model(&t.model, &cfg, t.rng, Some("train.history.jsonl".into()))
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny_checkpoint(3);
    let bytes = encode_checkpoint(&c).unwrap();
    assert_eq!(&bytes[..8], b"SSVPCKPT");
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, c);
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);

    let path = dir.path().join("m.ckpt");
    write_checkpoint(&c, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let loaded = read_checkpoint(&path).unwrap();
    let model = loaded.to_model().unwrap();
    let again = Checkpoint::from_model(&model, &loaded.train, loaded.rng.clone(), loaded.history.clone());
    assert_eq!(encode_checkpoint(&again).unwrap(), bytes);
    let frozen = model.store.id("vtam.gate.local0.w").unwrap();
    assert!(!model.store.entry(frozen).trainable);
}

#[test]
fn same_seed_checkpoints_are_byte_equal() {
    let a = encode_checkpoint(&tiny_checkpoint(5)).unwrap();
    let b = encode_checkpoint(&tiny_checkpoint(5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_corruptions() {
    let good = encode_checkpoint(&tiny_checkpoint(4)).unwrap();
    for case in checkpoint_cases(&good) {
        assert!(case.ok(), "{}: expected {}, got {}", case.name, case.expected, case.got);
    }
}

#[test]
fn heatmap_bytes_and_range() {
    let dir = tempfile::tempdir().unwrap();
    let zero = heatmap_bytes(&GridMap::filled(2, 3, 0.0)).unwrap();
    assert_eq!(&zero[..11], b"P5\n3 2\n255\n");
    assert!(zero[11..].iter().all(|&b| b == 0));
    let one = heatmap_bytes(&GridMap::filled(2, 3, 1.0)).unwrap();
    assert!(one[11..].iter().all(|&b| b == 255));
    let mixed = heatmap_bytes(&GridMap::new(2, 2, vec![0.0, 0.5, 0.5, 1.0]).unwrap()).unwrap();
    assert_eq!(&mixed[mixed.len() - 4..], &[0, 128, 128, 255]);

    let bad = GridMap::new(1, 2, vec![0.2, 1.5]).unwrap();
    assert_eq!(heatmap_bytes(&bad).unwrap_err().code(), "out_of_range");
    let path = dir.path().join("h.pgm");
    assert_eq!(outcome(write_heatmap(&bad, &path)), "out_of_range");
    write_heatmap(&GridMap::filled(2, 3, 1.0), &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), one);
}

#[test]
fn synthetic_anomalies_are_linearly_separable() {
    let spec = SynthSpec { n_categories: 1, samples_per_split: 100, seed: 7, ..SynthSpec::default() };
    let ds = gen_synthetic(&spec).unwrap();
    let cat = &ds.categories[0];
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for b in cat.train.iter().chain(&cat.test) {
        let mask = b.grid_mask().unwrap();
        for layer in &b.clip_locals {
            for i in 0..b.n_tokens() {
                scores.push(layer.row(i).iter().zip(&ds.clip_direction).map(|(x, d)| x * d).sum::<f64>());
                labels.push(mask.data[i]);
            }
        }
    }
    let a = auroc(&scores, &labels).unwrap();
    assert!(a >= 0.99, "linear probe AUROC {a}");
}

#[test]
fn offset_free_twins_lose_the_anomaly() {
    let ds = gen_synthetic(&SynthSpec { n_categories: 1, samples_per_split: 10, seed: 11, ..SynthSpec::default() }).unwrap();
    let proj = |row: &[f64]| row.iter().zip(&ds.clip_direction).map(|(x, d)| x * d).sum::<f64>();
    for b in &ds.categories[0].test {
        let twin = ds.offset_free_twin(b).unwrap();
        twin.validate().unwrap();
        assert_eq!(twin.label, 0);
        let mask = b.grid_mask().unwrap();
        for (orig, t) in b.clip_locals.iter().zip(&twin.clip_locals) {
            for u in 0..b.n_tokens() {
                let drop = proj(orig.row(u)) - proj(t.row(u));
                let want = if mask.data[u] != 0 { ds.spec.anomaly_offset } else { 0.0 };
                assert!((drop - want).abs() < 1e-5, "{} patch {u}: {drop}", b.source_id);
            }
        }
        if b.label == 0 {
            assert_eq!(twin.clip_locals, b.clip_locals);
            assert_eq!(twin.dino_global, b.dino_global);
        }
    }
}

#[test]
fn synthetic_labels_match_masks() {
    let ds = gen_synthetic(&SynthSpec { seed: 3, ..SynthSpec::default() }).unwrap();
    for cat in &ds.categories {
        let all: Vec<_> = cat.train.iter().chain(&cat.test).collect();
        assert_eq!(all.len(), 120);
        assert_eq!(cat.test.iter().filter(|b| b.label == 1).count(), 30);
        for b in all {
            assert_eq!(b.label == 1, b.mask.as_ref().unwrap().any());
            b.validate().unwrap();
            assert!(b.clip_locals.iter().all(Tensor::is_finite));
        }
    }
    let none = gen_synthetic(&SynthSpec { anomaly_rate: 0.0, ..SynthSpec::default() }).unwrap();
    assert!(none.categories.iter().flat_map(|c| c.train.iter().chain(&c.test)).all(|b| b.label == 0 && !b.mask.as_ref().unwrap().any()));
}

#[test]
fn written_datasets_reload_and_repeat() {
    let spec = SynthSpec { n_categories: 2, samples_per_split: 4, grid: (4, 4), d_clip: 6, d_dino: 5, region_size: (1, 2), ..SynthSpec::default() };
    let ds = gen_synthetic(&spec).unwrap();
    assert_eq!(ds, gen_synthetic(&spec).unwrap());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = write_dataset(a.path(), &ds).unwrap();
    let mb = write_dataset(b.path(), &gen_synthetic(&spec).unwrap()).unwrap();
    assert_eq!(ma, mb);
    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), "manifest.json"), read(b.path(), "manifest.json"));
    assert_eq!(read(a.path(), &ma.categories[1].test[3]), read(b.path(), &mb.categories[1].test[3]));

    let test = load_dataset(a.path(), "test", &[], &[]).unwrap();
    let expected: Vec<_> = ds.categories.iter().flat_map(|c| c.test.clone()).collect();
    assert_eq!(test, expected);
    let held = load_dataset(a.path(), "test", &["cat1".into()], &[]).unwrap();
    assert_eq!(held, ds.categories[1].test);
    let rest = load_dataset(a.path(), "train", &[], &["cat1".into()]).unwrap();
    assert_eq!(rest, ds.categories[0].train);
    assert!(load_dataset(a.path(), "val", &[], &[]).is_err());

    std::fs::remove_file(a.path().join("manifest.json")).unwrap();
    assert_eq!(load_dataset(a.path(), "test", &[], &[]).unwrap(), expected);
}

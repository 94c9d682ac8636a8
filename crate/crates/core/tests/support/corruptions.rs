//! Container corruptions paired with the error code each must produce.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use zsad_core::io::{decode_bundle, decode_checkpoint, encode_bundle};
use zsad_core::numcore::Tensor;
use zsad_core::{Error, FeatureBundle, Mask};

pub struct Case {
    pub name: &'static str,
    pub expected: &'static str,
    pub got: String,
}

impl Case {
    pub fn ok(&self) -> bool {
        self.expected == self.got
    }
}

pub fn outcome<T>(r: Result<T, Error>) -> String {
    match r {
        Ok(_) => "accepted".into(),
        Err(Error::Format(f)) => f.code().into(),
        Err(Error::Config(_)) => "config".into(),
        Err(other) => format!("other: {other}"),
    }
}

fn f32_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| f64::from(rng.random_range(-4.0f32..4.0))).collect()).unwrap()
}

/// Bundle on a 3×4 grid; the mask, when present, is at twice that resolution.
pub fn random_bundle(seed: u64, with_mask: bool) -> FeatureBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (3, 4);
    let n = h * w;
    let layers = rng.random_range(1..4);
    let mask = with_mask.then(|| Mask { height: 2 * h, width: 2 * w, data: (0..4 * n).map(|_| rng.random_range(0..2)).collect() });
    FeatureBundle {
        clip_global: f32_tensor(&mut rng, 1, 5),
        clip_locals: (0..layers).map(|_| f32_tensor(&mut rng, n, 5)).collect(),
        dino_global: f32_tensor(&mut rng, 1, 7),
        dino_locals: (0..layers).map(|_| f32_tensor(&mut rng, n, 7)).collect(),
        grid: (h, w),
        label: u8::from(mask.as_ref().is_some_and(Mask::any)),
        mask,
        category: format!("c{seed}"),
        source_id: format!("src/{seed}"),
    }
}

/// Splits a container into its JSON header and payload.
pub fn parts(bytes: &[u8]) -> (Value, Vec<u8>) {
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    (serde_json::from_slice(&bytes[16..16 + len]).unwrap(), bytes[16 + len..].to_vec())
}

pub fn rebuild(magic: &[u8], header: &Value, payload: &[u8]) -> Vec<u8> {
    let h = serde_json::to_vec(header).unwrap();
    let mut out = magic.to_vec();
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(payload);
    out
}

pub fn tensor_entry<'a>(header: &'a mut Value, name: &str) -> &'a mut Value {
    header["tensors"].as_array_mut().unwrap().iter_mut().find(|t| t["name"] == name).unwrap()
}

/// Corruptions of `b`, which must carry a mask and use 5-wide semantic features.
pub fn bundle_cases(b: &FeatureBundle) -> Vec<Case> {
    let good = encode_bundle(b).unwrap();
    let (header, payload) = parts(&good);
    let magic = b"SSVPFEAT";
    let mut cases = Vec::new();
    let mut push = |name, expected, bytes: &[u8]| cases.push(Case { name, expected, got: outcome(decode_bundle(bytes)) });

    let mut bad = good.clone();
    bad[0] = b'X';
    push("wrong magic", "bad_magic", &bad);
    push("three bytes", "bad_magic", b"SSV");

    let mut bad = good.clone();
    bad[8] = 2;
    push("version 2", "version_mismatch", &bad);

    push("payload short by 4", "truncated_payload", &good[..good.len() - 4]);
    push("cut inside length prefix", "truncated_payload", &good[..14]);
    push("cut inside header", "truncated_payload", &good[..40]);

    let mut bad = good[..16].to_vec();
    bad[12..16].copy_from_slice(&5u32.to_le_bytes());
    bad.extend_from_slice(b"{not ");
    push("header not json", "bad_header", &bad);

    let mut h = header.clone();
    tensor_entry(&mut h, "clip_local_0")["dtype"] = "f16".into();
    push("f16 dtype", "bad_header", &rebuild(magic, &h, &payload));

    let mut h = header.clone();
    let start = tensor_entry(&mut h, "clip_global")["offset"].as_u64().unwrap();
    tensor_entry(&mut h, "clip_local_0")["offset"] = Value::from(start + 32);
    tensor_entry(&mut h, "clip_global")["shape"] = json!([3, 3]);
    push("3x3 shape over 8 elements", "span_mismatch", &rebuild(magic, &h, &payload));

    let mut h = header.clone();
    tensor_entry(&mut h, "dino_global")["offset"] = tensor_entry(&mut h.clone(), "clip_global")["offset"].clone();
    push("shared offset", "offset_overlap", &rebuild(magic, &h, &payload));

    let mut h = header.clone();
    h["tensors"].as_array_mut().unwrap().retain(|t| t["name"] != "gt_mask");
    let mask_bytes = 4 * b.mask.as_ref().unwrap().data.len();
    push("mask dropped", "missing_tensor", &rebuild(magic, &h, &payload[..payload.len() - mask_bytes]));

    let mut h = header.clone();
    h["grid"] = json!([3, 3]);
    push("grid disagrees with tokens", "shape_inconsistent", &rebuild(magic, &h, &payload));

    let mut p = payload.clone();
    let at = p.len() - 4;
    p[at..].copy_from_slice(&0.5f32.to_le_bytes());
    push("non-binary mask", "shape_inconsistent", &rebuild(magic, &header, &p));
    cases
}

/// Corruptions of an encoded checkpoint with at least four tensors.
pub fn checkpoint_cases(good: &[u8]) -> Vec<Case> {
    let (header, payload) = parts(good);
    let magic = b"SSVPCKPT";
    let mut cases = Vec::new();
    let mut push = |name, expected, bytes: &[u8]| cases.push(Case { name, expected, got: outcome(decode_checkpoint(bytes)) });

    let mut bad = good.to_vec();
    bad[3] = 0;
    push("wrong magic", "bad_magic", &bad);
    push("bundle magic", "bad_magic", &encode_bundle(&random_bundle(0, false)).unwrap());

    let mut bad = good.to_vec();
    bad[8..12].copy_from_slice(&7u32.to_le_bytes());
    push("version 7", "version_mismatch", &bad);

    push("payload short by 1", "truncated_payload", &good[..good.len() - 1]);

    let mut h = header.clone();
    h["surprise"] = Value::from(1);
    push("unknown header field", "bad_header", &rebuild(magic, &h, &payload));

    let mut h = header.clone();
    let t = &mut h["tensors"][1];
    t["offset"] = Value::from(t["offset"].as_u64().unwrap() + 8);
    push("gap between tensors", "span_mismatch", &rebuild(magic, &h, &payload));

    let mut h = header.clone();
    h["tensors"][2]["offset"] = h["tensors"][1]["offset"].clone();
    push("shared offset", "offset_overlap", &rebuild(magic, &h, &payload));

    let mut h = header.clone();
    h["model_config"]["arch"]["d_head"] = Value::from(6);
    let got = outcome(decode_checkpoint(&rebuild(magic, &h, &payload)).and_then(|c| c.to_model()));
    cases.push(Case { name: "head width changed", expected: "dims_mismatch", got });

    let mut c = decode_checkpoint(good).unwrap();
    c.tensors.remove(3);
    cases.push(Case { name: "tensor missing", expected: "config", got: outcome(c.to_model()) });
    cases
}

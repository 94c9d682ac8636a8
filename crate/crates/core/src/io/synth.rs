use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{read_bundle, write_bundle, BUNDLE_VERSION};
use crate::data::{FeatureBundle, Mask};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Recipe for a synthetic dataset with a known, linearly detectable anomaly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_categories: usize,
    /// Bundles per split per category.
    pub samples_per_split: usize,
    pub anomaly_rate: f64,
    pub grid: (usize, usize),
    pub d_clip: usize,
    pub d_dino: usize,
    pub n_layers: usize,
    /// Shift applied to anomalous patches along the anomaly direction.
    pub anomaly_offset: f64,
    /// Inclusive range of region side lengths.
    pub region_size: (usize, usize),
    pub noise_std: f64,
    /// Std of the per-category prototype entries.
    pub prototype_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_categories: 3,
            samples_per_split: 60,
            anomaly_rate: 0.5,
            grid: (12, 12),
            d_clip: 64,
            d_dino: 96,
            n_layers: 2,
            anomaly_offset: 1.0,
            region_size: (2, 4),
            noise_std: 0.1,
            prototype_scale: 1.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.grid;
        let (lo, hi) = self.region_size;
        let ok = [
            (self.n_categories > 0, "n_categories must be positive"),
            (self.samples_per_split > 0, "samples_per_split must be positive"),
            ((0.0..1.0).contains(&self.anomaly_rate), "anomaly_rate must lie in [0, 1)"),
            (h > 0 && w > 0, "grid must be nonempty"),
            (self.d_clip >= 2 && self.d_dino > 0 && self.n_layers > 0, "feature dims must be positive"),
            (lo >= 1 && lo <= hi, "region_size must be a nonempty range"),
            (hi <= h.min(w), "region does not fit the grid"),
            (self.noise_std >= 0.0 && self.prototype_scale >= 0.0, "scales must be nonnegative"),
            (self.anomaly_offset.is_finite(), "anomaly_offset must be finite"),
        ];
        match ok.iter().find(|(c, _)| !c) {
            Some((_, msg)) => Err(Error::Config((*msg).to_string())),
            None => Ok(()),
        }
    }

    pub fn category_name(c: usize) -> String {
        format!("cat{c}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCategory {
    pub name: String,
    pub train: Vec<FeatureBundle>,
    pub test: Vec<FeatureBundle>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    /// Unit anomaly direction in the semantic feature space.
    pub clip_direction: Vec<f64>,
    pub dino_direction: Vec<f64>,
    pub categories: Vec<SynthCategory>,
}

fn f32_round(v: f64) -> f64 {
    f64::from(v as f32)
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Gaussian prototype with no component along `direction`.
fn prototype(rng: &mut ChaCha8Rng, direction: &[f64], std: f64) -> Vec<f64> {
    let mut v: Vec<f64> = direction.iter().map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
    let along: f64 = v.iter().zip(direction).map(|(a, b)| a * b).sum();
    for (x, d) in v.iter_mut().zip(direction) {
        *x -= along * d;
    }
    v
}

struct Prototypes {
    clip: Vec<Vec<f64>>,
    dino: Vec<Vec<f64>>,
}

fn make_locals(
    rng: &mut ChaCha8Rng,
    spec: &SynthSpec,
    protos: &[Vec<f64>],
    direction: &[f64],
    mask: &Mask,
) -> Vec<Tensor> {
    let n = spec.grid.0 * spec.grid.1;
    let d = direction.len();
    protos
        .iter()
        .map(|proto| {
            let mut data = Vec::with_capacity(n * d);
            for u in 0..n {
                let shift = if mask.data[u] != 0 { spec.anomaly_offset } else { 0.0 };
                for k in 0..d {
                    let noise: f64 = StandardNormal.sample(rng);
                    data.push(f32_round(proto[k] + spec.noise_std * noise + shift * direction[k]));
                }
            }
            Tensor::new(n, d, data).expect("consistent dims")
        })
        .collect()
}

fn mean_token(t: &Tensor) -> Tensor {
    let mut out = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    let n = t.rows() as f64;
    Tensor::row_vector(out.into_iter().map(|v| f32_round(v / n)).collect()).expect("nonempty")
}

fn random_region(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Mask {
    let (h, w) = spec.grid;
    let (lo, hi) = spec.region_size;
    let rh = rng.random_range(lo..=hi);
    let rw = rng.random_range(lo..=hi);
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    let mut m = Mask::empty(h, w);
    for r in top..top + rh {
        for c in left..left + rw {
            m.data[r * w + c] = 1;
        }
    }
    m
}

fn make_split(
    rng: &mut ChaCha8Rng,
    spec: &SynthSpec,
    category: &str,
    split: &str,
    protos: &Prototypes,
    dirs: (&[f64], &[f64]),
) -> Vec<FeatureBundle> {
    let n = spec.samples_per_split;
    let n_anom = ((spec.anomaly_rate * n as f64).round() as usize).min(n);
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n_anom)).collect();
    labels.shuffle(rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mask = if label == 1 { random_region(rng, spec) } else { Mask::empty(spec.grid.0, spec.grid.1) };
            let clip_locals = make_locals(rng, spec, &protos.clip, dirs.0, &mask);
            let dino_locals = make_locals(rng, spec, &protos.dino, dirs.1, &mask);
            FeatureBundle {
                clip_global: mean_token(clip_locals.last().expect("at least one layer")),
                dino_global: mean_token(dino_locals.last().expect("at least one layer")),
                clip_locals,
                dino_locals,
                grid: spec.grid,
                label,
                mask: Some(mask),
                category: category.to_string(),
                source_id: format!("{category}/{split}/{i:04}"),
            }
        })
        .collect()
}

/// Deterministic dataset from `spec.seed`.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let clip_direction = unit_vector(&mut rng, spec.d_clip);
    let dino_direction = unit_vector(&mut rng, spec.d_dino);
    let mut categories = Vec::with_capacity(spec.n_categories);
    for c in 0..spec.n_categories {
        let name = SynthSpec::category_name(c);
        let protos = Prototypes {
            clip: (0..spec.n_layers).map(|_| prototype(&mut rng, &clip_direction, spec.prototype_scale)).collect(),
            dino: (0..spec.n_layers).map(|_| prototype(&mut rng, &dino_direction, spec.prototype_scale)).collect(),
        };
        let dirs = (&clip_direction[..], &dino_direction[..]);
        let train = make_split(&mut rng, spec, &name, "train", &protos, dirs);
        let test = make_split(&mut rng, spec, &name, "test", &protos, dirs);
        categories.push(SynthCategory { name, train, test });
    }
    Ok(SynthDataset { spec: spec.clone(), clip_direction, dino_direction, categories })
}

impl SynthDataset {
    /// Copy of `b` with the injected offset removed from its masked patches.
    pub fn offset_free_twin(&self, b: &FeatureBundle) -> Result<FeatureBundle> {
        let n = b.n_tokens();
        let Some(mask) = b.grid_mask() else { return Ok(b.clone()) };
        let strip = |locals: &[Tensor], dir: &[f64]| -> Result<Vec<Tensor>> {
            locals
                .iter()
                .map(|t| {
                    if t.rows() != n || t.cols() != dir.len() {
                        return Err(Error::Data(format!("{}: not shaped like this dataset", b.source_id)));
                    }
                    let mut data = t.data().to_vec();
                    for u in (0..n).filter(|&u| mask.data[u] != 0) {
                        for (k, d) in dir.iter().enumerate() {
                            data[u * dir.len() + k] = f32_round(data[u * dir.len() + k] - self.spec.anomaly_offset * d);
                        }
                    }
                    Ok(Tensor::new(n, dir.len(), data)?)
                })
                .collect()
        };
        let clip_locals = strip(&b.clip_locals, &self.clip_direction)?;
        let dino_locals = strip(&b.dino_locals, &self.dino_direction)?;
        Ok(FeatureBundle {
            clip_global: mean_token(clip_locals.last().expect("at least one layer")),
            dino_global: mean_token(dino_locals.last().expect("at least one layer")),
            clip_locals,
            dino_locals,
            grid: b.grid,
            label: 0,
            mask: Some(Mask::empty(b.grid.0, b.grid.1)),
            category: b.category.clone(),
            source_id: format!("{}-twin", b.source_id),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestCategory {
    pub name: String,
    /// Paths relative to the dataset root.
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(default)]
    pub spec: Option<SynthSpec>,
    pub categories: Vec<ManifestCategory>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";
}

/// Writes `DIR/{category}/{train,test}/{index}.bundle` plus `manifest.json`.
pub fn write_dataset(dir: impl AsRef<Path>, ds: &SynthDataset) -> Result<Manifest> {
    let dir = dir.as_ref();
    let mut cats = Vec::new();
    for cat in &ds.categories {
        let write_split = |split: &str, bundles: &[FeatureBundle]| -> Result<Vec<String>> {
            let sub = dir.join(&cat.name).join(split);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            bundles
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let rel = format!("{}/{split}/{i:04}.bundle", cat.name);
                    write_bundle(b, dir.join(&rel))?;
                    Ok(rel)
                })
                .collect()
        };
        let train = write_split("train", &cat.train)?;
        let test = write_split("test", &cat.test)?;
        cats.push(ManifestCategory { name: cat.name.clone(), train, test });
    }
    let manifest = Manifest { format_version: BUNDLE_VERSION, spec: Some(ds.spec.clone()), categories: cats };
    let path = dir.join(Manifest::FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn scan_manifest(dir: &Path) -> Result<Manifest> {
    let read_dir = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> =
            std::fs::read_dir(p).map_err(|e| Error::io(p, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        v.sort();
        Ok(v)
    };
    let mut categories = Vec::new();
    for cat in read_dir(dir)?.into_iter().filter(|p| p.is_dir()) {
        let name = cat.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let split = |s: &str| -> Result<Vec<String>> {
            let p = cat.join(s);
            if !p.is_dir() {
                return Ok(Vec::new());
            }
            Ok(read_dir(&p)?
                .into_iter()
                .filter(|f| f.extension().is_some_and(|e| e == "bundle"))
                .filter_map(|f| f.strip_prefix(dir).ok().map(|r| r.to_string_lossy().into_owned()))
                .collect())
        };
        let (train, test) = (split("train")?, split("test")?);
        categories.push(ManifestCategory { name, train, test });
    }
    Ok(Manifest { format_version: BUNDLE_VERSION, spec: None, categories })
}

/// Reads one split. Without `manifest.json` the directory layout is scanned.
/// `only` (when nonempty) keeps the listed categories; `exclude` drops them.
pub fn load_dataset(dir: impl AsRef<Path>, split: &str, only: &[String], exclude: &[String]) -> Result<Vec<FeatureBundle>> {
    let dir = dir.as_ref();
    let mpath = dir.join(Manifest::FILE);
    let manifest = if mpath.exists() {
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        serde_json::from_str::<Manifest>(&text).map_err(|e| Error::Data(format!("{}: {e}", mpath.display())))?
    } else {
        scan_manifest(dir)?
    };
    let mut out = Vec::new();
    for cat in &manifest.categories {
        if (!only.is_empty() && !only.contains(&cat.name)) || exclude.contains(&cat.name) {
            continue;
        }
        let files = match split {
            "train" => &cat.train,
            "test" => &cat.test,
            other => return Err(Error::Config(format!("unknown split `{other}` (expected train or test)"))),
        };
        for f in files {
            out.push(read_bundle(dir.join(f))?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec { n_categories: 2, samples_per_split: 10, grid: (6, 6), d_clip: 8, d_dino: 12, ..SynthSpec::default() }
    }

    #[test]
    fn labels_match_masks_and_counts() {
        let ds = gen_synthetic(&small()).unwrap();
        for cat in &ds.categories {
            for b in cat.train.iter().chain(&cat.test) {
                b.validate().unwrap();
                assert_eq!(b.is_anomalous(), b.mask.as_ref().unwrap().any());
            }
            assert_eq!(cat.test.iter().filter(|b| b.is_anomalous()).count(), 5);
        }
    }

    #[test]
    fn zero_rate_is_all_normal() {
        let ds = gen_synthetic(&SynthSpec { anomaly_rate: 0.0, ..small() }).unwrap();
        assert!(ds.categories.iter().flat_map(|c| c.train.iter().chain(&c.test)).all(|b| b.label == 0 && !b.mask.as_ref().unwrap().any()));
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(gen_synthetic(&small()).unwrap(), gen_synthetic(&small()).unwrap());
        let other = gen_synthetic(&SynthSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(gen_synthetic(&small()).unwrap(), other);
    }

    #[test]
    fn region_must_fit() {
        assert!(SynthSpec { grid: (3, 3), region_size: (2, 4), ..small() }.validate().is_err());
    }
}

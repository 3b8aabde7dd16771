//! Seeded synthetic base/novel benchmark and the `PALD` dataset file format.
//!
//! Each class is a gaussian cluster around a center in a low-dimensional
//! signal subspace. The remaining latent coordinates carry large
//! class-independent nuisance noise. A fixed stack of random rotations and
//! `x + gain * tanh(x)` warps, shared by both splits, maps latents to the
//! observed inputs.
//!
//! File layout (all little-endian):
//!
//! | field        | type          |
//! |--------------|---------------|
//! | magic        | `b"PALD"`     |
//! | version      | u32 (= 1)     |
//! | item count   | u32           |
//! | dim          | u32           |
//! | label width  | u32 (= 4 bytes per label) |
//! | label min    | u32           |
//! | label count  | u32           |
//! | inputs       | `count * dim` f32 |
//! | labels       | `count` i32   |

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{put_f32s, put_i32, put_u32, to_u32, Reader};
use crate::error::{PalError, Result};

const DATASET_MAGIC: &[u8; 4] = b"PALD";
const DATASET_VERSION: u32 = 1;
const LABEL_WIDTH: u32 = 4;
const HEADER_BYTES: u64 = 28;
const MAX_REJECTIONS: u64 = 1_000_000;

/// An in-memory split: row-major inputs plus labels in a declared range.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    label_min: usize,
    label_count: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, dim: usize, label_min: usize, label_count: usize) -> Result<Self> {
        if dim == 0 || inputs.len() != labels.len() * dim {
            return Err(PalError::Parameter(format!(
                "{} values do not form {} rows of dim {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some((row, &l)) = labels.iter().enumerate().find(|(_, &l)| l < label_min || l >= label_min + label_count)
        {
            return Err(PalError::Parameter(format!(
                "row {row}: label {l} outside [{label_min}, {})",
                label_min + label_count
            )));
        }
        Ok(Self { inputs, labels, dim, label_min, label_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label_min(&self) -> usize {
        self.label_min
    }

    /// Size of the declared label range.
    pub fn label_count(&self) -> usize {
        self.label_count
    }

    /// Item indices grouped by label, in ascending label order.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            m.entry(l).or_default().push(i);
        }
        m
    }

    pub fn num_classes_present(&self) -> usize {
        self.by_class().len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(HEADER_BYTES as usize + self.inputs.len() * 4 + self.labels.len() * 4);
        out.extend_from_slice(DATASET_MAGIC);
        put_u32(&mut out, DATASET_VERSION);
        put_u32(&mut out, to_u32(self.len(), "item count")?);
        put_u32(&mut out, to_u32(self.dim, "dim")?);
        put_u32(&mut out, LABEL_WIDTH);
        put_u32(&mut out, to_u32(self.label_min, "label min")?);
        put_u32(&mut out, to_u32(self.label_count, "label count")?);
        put_f32s(&mut out, &self.inputs);
        for &l in &self.labels {
            let l = i32::try_from(l).map_err(|_| PalError::Parameter(format!("label {l} exceeds i32")))?;
            put_i32(&mut out, l);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(DATASET_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != DATASET_VERSION {
            return Err(PalError::Format { offset: at, msg: format!("unsupported version {version}") });
        }
        let count = r.u32("item count")? as usize;
        let at = r.offset();
        let dim = r.u32("dim")? as usize;
        if dim == 0 {
            return Err(PalError::Format { offset: at, msg: "dim must be positive".into() });
        }
        let at = r.offset();
        let width = r.u32("label width")?;
        if width != LABEL_WIDTH {
            return Err(PalError::Format { offset: at, msg: format!("label width {width}, expected {LABEL_WIDTH}") });
        }
        let label_min = r.u32("label min")? as usize;
        let label_count = r.u32("label count")? as usize;
        let inputs = r.f32s(count * dim, "inputs")?;
        let mut labels = Vec::with_capacity(count);
        for row in 0..count {
            let at = r.offset();
            let l = r.i32("label")?;
            let ok = l >= 0 && (l as usize) >= label_min && (l as usize) < label_min + label_count;
            if !ok {
                return Err(PalError::Format {
                    offset: at,
                    msg: format!("row {row}: label {l} outside [{label_min}, {})", label_min + label_count),
                });
            }
            labels.push(l as usize);
        }
        r.finish()?;
        Self::new(inputs, labels, dim, label_min, label_count)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Reads a `PALD` file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::load(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_base_classes: usize,
    pub n_novel_classes: usize,
    pub items_per_class: usize,
    pub raw_dim: usize,
    /// Latent dimensions that carry class identity.
    pub signal_dim: usize,
    /// Minimum pairwise distance between class centers.
    pub margin: f64,
    /// Within-class spread along the signal dimensions.
    pub cluster_sigma: f64,
    /// Spread of the class-independent nuisance dimensions.
    pub nuisance_sigma: f64,
    /// Number of rotation + warp layers in the mixing map.
    pub world_depth: usize,
    pub mixing_gain: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_base_classes: 20,
            n_novel_classes: 8,
            items_per_class: 50,
            raw_dim: 32,
            signal_dim: 8,
            margin: 2.0,
            cluster_sigma: 0.5,
            nuisance_sigma: 4.0,
            world_depth: 2,
            mixing_gain: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PalError::Parameter(m));
        if self.n_base_classes < 2 || self.n_novel_classes < 1 {
            return bad("need >= 2 base and >= 1 novel classes".into());
        }
        if self.items_per_class == 0 || self.raw_dim == 0 {
            return bad("items_per_class and raw_dim must be positive".into());
        }
        if self.signal_dim == 0 || self.signal_dim > self.raw_dim {
            return bad(format!("signal_dim {} must lie in 1..={}", self.signal_dim, self.raw_dim));
        }
        for (name, v) in [
            ("margin", self.margin),
            ("cluster_sigma", self.cluster_sigma),
            ("nuisance_sigma", self.nuisance_sigma),
            ("mixing_gain", self.mixing_gain),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// What `generate_synthetic` produced besides the splits.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationReport {
    /// Accuracy of assigning every base item to its nearest true class
    /// center in latent space.
    pub center_oracle_accuracy: f64,
    pub min_center_distance: f64,
    pub center_draws: u64,
}

#[derive(Clone, Debug)]
pub struct SyntheticBenchmark {
    pub base: Dataset,
    pub novel: Dataset,
    pub report: GenerationReport,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Random orthogonal matrix via Gram-Schmidt on a gaussian matrix.
fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut q: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(rng)).collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let d: f64 = (0..n).map(|k| q[i * n + k] * q[j * n + k]).sum();
                for k in 0..n {
                    q[i * n + k] -= d * q[j * n + k];
                }
            }
            let norm = (0..n).map(|k| q[i * n + k].powi(2)).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for k in 0..n {
                q[i * n + k] /= norm;
            }
        }
        if ok {
            return q;
        }
    }
}

struct MixingMap {
    rotations: Vec<Vec<f64>>,
    gain: f64,
    dim: usize,
}

impl MixingMap {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut h = x.to_vec();
        for q in &self.rotations {
            let mut out: Vec<f64> = (0..n).map(|i| (0..n).map(|k| q[i * n + k] * h[k]).sum()).collect();
            for v in &mut out {
                *v += self.gain * v.tanh();
            }
            h = out;
        }
        h
    }
}

/// Generates the base and novel splits. Deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticBenchmark> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.n_base_classes + spec.n_novel_classes;
    let sd = spec.signal_dim;

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut draws = 0u64;
    let margin_sq = spec.margin * spec.margin;
    while centers.len() < total {
        draws += 1;
        if draws > MAX_REJECTIONS {
            return Err(PalError::Feasibility(format!(
                "placed only {} of {total} centers after {MAX_REJECTIONS} draws; lower the margin ({}) or raise signal_dim ({sd})",
                centers.len(),
                spec.margin
            )));
        }
        let c: Vec<f64> = (0..sd).map(|_| StandardNormal.sample(&mut rng)).collect();
        if centers.iter().all(|o| sq_dist(o, &c) >= margin_sq) {
            centers.push(c);
        }
    }
    let min_center_distance = centers
        .iter()
        .enumerate()
        .flat_map(|(i, a)| centers[i + 1..].iter().map(move |b| sq_dist(a, b).sqrt()))
        .fold(f64::INFINITY, f64::min);

    let mixing = MixingMap {
        rotations: (0..spec.world_depth).map(|_| random_orthogonal(spec.raw_dim, &mut rng)).collect(),
        gain: spec.mixing_gain,
        dim: spec.raw_dim,
    };

    let mut splits = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
    let mut oracle_hits = 0usize;
    let mut oracle_total = 0usize;
    for (class, center) in centers.iter().enumerate() {
        let is_base = class < spec.n_base_classes;
        for _ in 0..spec.items_per_class {
            let mut latent = Vec::with_capacity(spec.raw_dim);
            for &c in center {
                let n: f64 = StandardNormal.sample(&mut rng);
                latent.push(c + spec.cluster_sigma * n);
            }
            for _ in sd..spec.raw_dim {
                let n: f64 = StandardNormal.sample(&mut rng);
                latent.push(spec.nuisance_sigma * n);
            }
            if is_base {
                let signal = &latent[..sd];
                let nearest = (0..spec.n_base_classes)
                    .min_by(|&a, &b| sq_dist(signal, &centers[a]).total_cmp(&sq_dist(signal, &centers[b])))
                    .expect("at least two base classes");
                oracle_hits += usize::from(nearest == class);
                oracle_total += 1;
            }
            let observed = mixing.apply(&latent);
            let (inputs, labels) = &mut splits[usize::from(!is_base)];
            // Stored as f32 on disk; round now so memory and file agree.
            inputs.extend(observed.into_iter().map(|v| v as f32 as f64));
            labels.push(class);
        }
    }
    let [(bx, by), (nx, ny)] = splits;
    Ok(SyntheticBenchmark {
        base: Dataset::new(bx, by, spec.raw_dim, 0, spec.n_base_classes)?,
        novel: Dataset::new(nx, ny, spec.raw_dim, spec.n_base_classes, spec.n_novel_classes)?,
        report: GenerationReport {
            center_oracle_accuracy: oracle_hits as f64 / oracle_total as f64,
            min_center_distance,
            center_draws: draws,
        },
    })
}

/// Writes `base.pald` and `novel.pald` into `dir`.
pub fn write_benchmark(bench: &SyntheticBenchmark, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    bench.base.save(dir.join("base.pald"))?;
    bench.novel.save(dir.join("novel.pald"))?;
    Ok(())
}

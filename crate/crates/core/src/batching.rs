//! Two-view augmented batches, positive index sets, and soft-anchor sampling
//! from a frozen partner encoder.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{dim_err, PalError, Result};

/// Vector-space augmentation: additive gaussian noise followed by random
/// coordinate masking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub mask_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { noise_sigma: crate::data::SyntheticSpec::default().margin / 4.0, mask_prob: 0.1 }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self { noise_sigma: 0.0, mask_prob: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(PalError::Parameter(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(PalError::Parameter(format!("mask_prob must lie in [0, 1), got {}", self.mask_prob)));
        }
        Ok(())
    }
}

/// One random view of `x`. Consumes the same amount of randomness for every
/// config so streams stay aligned across ablations.
pub fn augment<R: Rng + ?Sized>(x: &[f64], rng: &mut R, cfg: &AugmentConfig) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let noise: f64 = rng.sample(StandardNormal);
            let drop = rng.random::<f64>() < cfg.mask_prob;
            if drop {
                0.0
            } else {
                v + cfg.noise_sigma * noise
            }
        })
        .collect()
}

/// A raw item handed to [`build_batch`].
#[derive(Clone, Copy, Debug)]
pub struct RawItem<'a> {
    pub id: usize,
    pub input: &'a [f64],
    pub label: usize,
}

/// `concat(aug(raw), aug(raw))`: row `i` and row `i + B` are two views of
/// the same raw item.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch {
    raw_ids: Vec<usize>,
    inputs: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
}

impl AugmentedBatch {
    pub fn raw_len(&self) -> usize {
        self.raw_ids.len()
    }

    /// `2B`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn raw_ids(&self) -> &[usize] {
        &self.raw_ids
    }

    /// Row-major `2B x dim`.
    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Index of the other view of row `i`.
    pub fn view_partner(&self, i: usize) -> usize {
        let b = self.raw_len();
        if i < b {
            i + b
        } else {
            i - b
        }
    }

    /// `view_partner` for every row.
    pub fn view_map(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.view_partner(i)).collect()
    }
}

pub fn build_batch<R: Rng + ?Sized>(raw: &[RawItem<'_>], rng: &mut R, cfg: &AugmentConfig) -> Result<AugmentedBatch> {
    let Some(first) = raw.first() else {
        return Err(PalError::Parameter("batch needs at least one raw item".into()));
    };
    let dim = first.input.len();
    if let Some(bad) = raw.iter().find(|r| r.input.len() != dim) {
        return Err(dim_err("build_batch", format!("item {} has dim {}, expected {dim}", bad.id, bad.input.len())));
    }
    let mut inputs = Vec::with_capacity(2 * raw.len() * dim);
    for _ in 0..2 {
        for item in raw {
            inputs.extend(augment(item.input, rng, cfg));
        }
    }
    let labels: Vec<usize> = raw.iter().chain(raw).map(|r| r.label).collect();
    Ok(AugmentedBatch { raw_ids: raw.iter().map(|r| r.id).collect(), inputs, labels, dim })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositiveMode {
    /// Every other row with the same label.
    Supervised,
    /// Only the other view of the same raw item.
    Unsupervised,
}

/// Per-row positive index sets over a `2B` batch (0-based).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositiveSets {
    sets: Vec<Vec<usize>>,
    mode: PositiveMode,
}

impl PositiveSets {
    pub fn new(sets: Vec<Vec<usize>>, mode: PositiveMode) -> Result<Self> {
        let n = sets.len();
        for (i, s) in sets.iter().enumerate() {
            if let Some(&j) = s.iter().find(|&&j| j >= n || j == i) {
                return Err(PalError::Contract(format!("positive {j} invalid for row {i} of {n}")));
            }
        }
        Ok(Self { sets, mode })
    }

    pub fn mode(&self) -> PositiveMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn get(&self, i: usize) -> &[usize] {
        &self.sets[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.sets.iter().map(Vec::as_slice)
    }

    pub fn from_labels(labels: &[usize]) -> Self {
        let sets = (0..labels.len())
            .map(|i| (0..labels.len()).filter(|&j| j != i && labels[j] == labels[i]).collect())
            .collect();
        Self { sets, mode: PositiveMode::Supervised }
    }

    /// Pairs row `i` with `i + half` and back.
    pub fn view_pairs(n: usize) -> Result<Self> {
        if !n.is_multiple_of(2) || n == 0 {
            return Err(PalError::Parameter(format!("view pairing needs an even positive row count, got {n}")));
        }
        let b = n / 2;
        let sets = (0..n).map(|i| vec![if i < b { i + b } else { i - b }]).collect();
        Ok(Self { sets, mode: PositiveMode::Unsupervised })
    }
}

pub fn positive_index_sets(batch: &AugmentedBatch, mode: PositiveMode) -> PositiveSets {
    match mode {
        PositiveMode::Supervised => PositiveSets::from_labels(batch.labels()),
        PositiveMode::Unsupervised => PositiveSets::view_pairs(batch.len()).expect("2B rows"),
    }
}

/// How many anchors to draw per instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnchorCount {
    #[default]
    All,
    Limit(usize),
}

impl AnchorCount {
    pub fn from_option(n: Option<usize>) -> Self {
        n.map_or(AnchorCount::All, AnchorCount::Limit)
    }
}

/// Soft anchors for each row of a main batch: partner embeddings of batch
/// members, split into same-class positives and other-class negatives.
/// Anchor values are plain numbers and never enter a graph as parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSets {
    pool: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    positives: Vec<Vec<usize>>,
    negatives: Vec<Vec<usize>>,
}

impl AnchorSets {
    /// Builds anchor sets over an explicit feature pool.
    pub fn from_pool(
        pool: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        positives: Vec<Vec<usize>>,
        negatives: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if dim == 0 || pool.len() != labels.len() * dim {
            return Err(dim_err(
                "anchor_sets",
                format!("{} pool values for {} labels of dim {dim}", pool.len(), labels.len()),
            ));
        }
        if positives.len() != negatives.len() {
            return Err(dim_err("anchor_sets", "positive/negative row counts differ"));
        }
        let p = labels.len();
        if positives.iter().chain(&negatives).flatten().any(|&j| j >= p) {
            return Err(PalError::Contract("anchor index outside pool".into()));
        }
        Ok(Self { pool, dim, labels, positives, negatives })
    }

    /// Number of main-batch rows.
    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major `pool_len x dim` partner features.
    pub fn pool(&self) -> &[f64] {
        &self.pool
    }

    pub fn pool_len(&self) -> usize {
        self.labels.len()
    }

    pub fn pool_labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn feature(&self, j: usize) -> &[f64] {
        &self.pool[j * self.dim..(j + 1) * self.dim]
    }

    pub fn positive_indices(&self, i: usize) -> &[usize] {
        &self.positives[i]
    }

    pub fn negative_indices(&self, i: usize) -> &[usize] {
        &self.negatives[i]
    }

    pub fn positives(&self, i: usize) -> impl Iterator<Item = &[f64]> {
        self.positives[i].iter().map(|&j| self.feature(j))
    }

    pub fn negatives(&self, i: usize) -> impl Iterator<Item = &[f64]> {
        self.negatives[i].iter().map(|&j| self.feature(j))
    }

    /// Rows whose positive set came up empty.
    pub fn empty_positive_rows(&self) -> usize {
        self.positives.iter().filter(|p| p.is_empty()).count()
    }
}

fn draw<R: Rng + ?Sized>(eligible: Vec<usize>, count: AnchorCount, rng: &mut R) -> Vec<usize> {
    match count {
        AnchorCount::Limit(n) if n < eligible.len() => {
            let mut picked: Vec<usize> =
                index::sample(rng, eligible.len(), n).into_iter().map(|k| eligible[k]).collect();
            picked.sort_unstable();
            picked
        }
        _ => eligible,
    }
}

/// Embeds the batch with the frozen partner and samples per-row anchors.
/// Positives exclude the row itself but include its other view.
pub fn sample_anchor_sets<R: Rng + ?Sized>(
    partner: &Encoder,
    batch: &AugmentedBatch,
    n_pos: AnchorCount,
    n_neg: AnchorCount,
    rng: &mut R,
) -> Result<AnchorSets> {
    if !partner.is_frozen() {
        return Err(PalError::Contract("anchor sampling requires a frozen partner encoder".into()));
    }
    for (name, c) in [("n_pos", n_pos), ("n_neg", n_neg)] {
        if c == AnchorCount::Limit(0) {
            return Err(PalError::Parameter(format!("{name} must be >= 1")));
        }
    }
    let pool = partner.embed_batch(batch.inputs(), batch.len())?;
    let labels = batch.labels().to_vec();
    let n = labels.len();
    let mut positives = Vec::with_capacity(n);
    let mut negatives = Vec::with_capacity(n);
    for i in 0..n {
        let same = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let diff = (0..n).filter(|&j| labels[j] != labels[i]).collect();
        positives.push(draw(same, n_pos, rng));
        negatives.push(draw(diff, n_neg, rng));
    }
    AnchorSets::from_pool(pool, partner.embed_dim(), labels, positives, negatives)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn items(data: &[Vec<f64>], labels: &[usize]) -> Vec<RawItem<'static>> {
        let leaked: &'static [Vec<f64>] = Box::leak(data.to_vec().into_boxed_slice());
        leaked.iter().zip(labels).enumerate().map(|(id, (x, &label))| RawItem { id, input: x, label }).collect()
    }

    #[test]
    fn identity_augmentation() {
        let x = vec![0.5, -1.25, 3.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&x, &mut rng, &AugmentConfig::identity()), x);
    }

    #[test]
    fn augmentation_is_seed_deterministic() {
        let x = vec![0.5; 10];
        let cfg = AugmentConfig { noise_sigma: 0.3, mask_prob: 0.2 };
        let a = augment(&x, &mut ChaCha8Rng::seed_from_u64(4), &cfg);
        let b = augment(&x, &mut ChaCha8Rng::seed_from_u64(4), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn mask_fraction_matches_probability() {
        let x = vec![1.0; 1000];
        let cfg = AugmentConfig { noise_sigma: 0.0, mask_prob: 0.2 };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut fracs = Vec::new();
        for _ in 0..100 {
            let y = augment(&x, &mut rng, &cfg);
            fracs.push(y.iter().filter(|&&v| v == 0.0).count() as f64 / 1000.0);
        }
        let mean = fracs.iter().sum::<f64>() / 100.0;
        assert!((mean - 0.2).abs() <= 0.05, "{mean}");
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig { noise_sigma: -1.0, mask_prob: 0.0 }.validate().is_err());
        assert!(AugmentConfig { noise_sigma: 0.0, mask_prob: 1.0 }.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }

    #[test]
    fn batch_structure() {
        let raw = items(&[vec![1.0, 2.0], vec![3.0, 4.0]], &[5, 7]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = build_batch(&raw, &mut rng, &AugmentConfig::identity()).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b.view_map(), vec![2, 3, 0, 1]);
        assert_eq!(b.labels(), &[5, 7, 5, 7]);
        assert_eq!(b.input(3), &[3.0, 4.0]);
        assert!(build_batch(&[], &mut rng, &AugmentConfig::identity()).is_err());
    }

    #[test]
    fn halves_differ_under_noise() {
        let raw = items(&[vec![1.0; 6], vec![0.0; 6]], &[0, 1]);
        let cfg = AugmentConfig { noise_sigma: 0.1, mask_prob: 0.0 };
        let b = build_batch(&raw, &mut ChaCha8Rng::seed_from_u64(2), &cfg).unwrap();
        assert_ne!(b.input(0), b.input(2));
        assert_ne!(b.input(1), b.input(3));
    }

    #[test]
    fn positive_set_rules() {
        let raw = items(&[vec![0.0], vec![1.0]], &[0, 1]);
        let b = build_batch(&raw, &mut ChaCha8Rng::seed_from_u64(0), &AugmentConfig::identity()).unwrap();
        let sup = positive_index_sets(&b, PositiveMode::Supervised);
        assert_eq!(sup.get(0), &[2]);
        assert_eq!(sup.get(1), &[3]);

        let raw = items(&[vec![0.0], vec![1.0], vec![2.0]], &[0, 1, 2]);
        let b = build_batch(&raw, &mut ChaCha8Rng::seed_from_u64(0), &AugmentConfig::identity()).unwrap();
        let unsup = positive_index_sets(&b, PositiveMode::Unsupervised);
        assert_eq!(unsup.get(1), &[4]);
        assert_eq!(unsup.get(4), &[1]);

        let raw = items(&[vec![0.0], vec![1.0], vec![2.0]], &[3, 3, 3]);
        let b = build_batch(&raw, &mut ChaCha8Rng::seed_from_u64(0), &AugmentConfig::identity()).unwrap();
        let all = positive_index_sets(&b, PositiveMode::Supervised);
        assert!(all.iter().all(|s| s.len() == 5));
    }

    fn partner() -> Encoder {
        Encoder::new(EncoderConfig { input_dim: 3, hidden_dims: vec![4], embed_dim: 2, seed: 0 }).unwrap().frozen()
    }

    fn class_batch() -> AugmentedBatch {
        let data: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 1.0, -(i as f64)]).collect();
        let raw = items(&data, &[0, 0, 1, 1, 2, 2]);
        build_batch(&raw, &mut ChaCha8Rng::seed_from_u64(3), &AugmentConfig::default()).unwrap()
    }

    #[test]
    fn anchors_partition_by_class() {
        let b = class_batch();
        let a = sample_anchor_sets(
            &partner(),
            &b,
            AnchorCount::Limit(1),
            AnchorCount::All,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        for i in 0..b.len() {
            assert_eq!(a.positive_indices(i).len(), 1);
            let p = a.positive_indices(i)[0];
            assert_eq!(b.labels()[p], b.labels()[i]);
            assert_ne!(p, i);
            let neg = a.negative_indices(i);
            assert_eq!(neg.len(), 8);
            assert!(neg.iter().all(|&j| b.labels()[j] != b.labels()[i]));
        }
    }

    #[test]
    fn anchor_sampling_is_deterministic_and_checked() {
        let b = class_batch();
        let p = partner();
        let draw = |s| {
            sample_anchor_sets(&p, &b, AnchorCount::Limit(2), AnchorCount::Limit(3), &mut ChaCha8Rng::seed_from_u64(s))
                .unwrap()
        };
        assert_eq!(draw(9), draw(9));
        let err =
            sample_anchor_sets(&p, &b, AnchorCount::Limit(0), AnchorCount::All, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(PalError::Parameter(_))));
        let mut thawed = p.clone();
        thawed.unfreeze();
        let err =
            sample_anchor_sets(&thawed, &b, AnchorCount::All, AnchorCount::All, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(PalError::Contract(_))));
    }

    #[test]
    fn positive_sampling_is_uniform() {
        let b = class_batch();
        let p = partner();
        // Row 0 (class 0): eligible positives are rows 1, 6 and 7.
        let mut counts = std::collections::HashMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let a = sample_anchor_sets(&p, &b, AnchorCount::Limit(1), AnchorCount::Limit(1), &mut rng).unwrap();
            *counts.entry(a.positive_indices(0)[0]).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 3);
        for (_, c) in counts {
            assert!((c as f64 / 1000.0 - 1.0 / 3.0).abs() <= 0.05);
        }
    }
}

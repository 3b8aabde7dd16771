//! N-way K-shot episodes over the novel split, nearest-prototype
//! classification, and accuracy aggregation.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::Encoder;
use crate::error::{dim_err, PalError, Result};
use crate::numeric::{l2_normalize_in_place, L2_EPS};
use crate::par::{map_indexed, Exec};
use crate::tensor::pairwise_dot;

/// One few-shot task. Item indices refer to the split it was drawn from.
/// Support and query are stored class-major: entry `c * k + j` is the `j`-th
/// support item of episode class `c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    pub k: usize,
    pub q: usize,
}

impl Episode {
    pub fn n(&self) -> usize {
        self.classes.len()
    }

    /// Episode-local labels (`0..n`) of the support items.
    pub fn support_labels(&self) -> Vec<usize> {
        (0..self.n()).flat_map(|c| std::iter::repeat_n(c, self.k)).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        (0..self.n()).flat_map(|c| std::iter::repeat_n(c, self.q)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSpec {
    pub n: usize,
    pub k: usize,
    pub q: usize,
    pub episodes: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self { n: 5, k: 1, q: 15, episodes: 600 }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 || self.q == 0 || self.episodes == 0 {
            return Err(PalError::Parameter(format!("episode spec needs positive n, k, q, episodes: {self:?}")));
        }
        Ok(())
    }
}

/// Draws `n` classes uniformly without replacement among classes holding at
/// least `k + q` items, then `k + q` distinct items per class.
pub fn sample_episode<R: Rng + ?Sized>(novel: &Dataset, n: usize, k: usize, q: usize, rng: &mut R) -> Result<Episode> {
    if n == 0 || k == 0 || q == 0 {
        return Err(PalError::Parameter(format!("n, k, q must be positive (got {n}, {k}, {q})")));
    }
    let groups = novel.by_class();
    let eligible: Vec<(&usize, &Vec<usize>)> = groups.iter().filter(|(_, items)| items.len() >= k + q).collect();
    if eligible.len() < n {
        let smallest = groups.values().map(Vec::len).min().unwrap_or(0);
        return Err(PalError::Capacity(format!(
            "{n}-way {k}-shot with {q} queries needs {n} classes of >= {} items; split has {} such classes \
             ({} classes total, smallest has {smallest} items)",
            k + q,
            eligible.len(),
            groups.len()
        )));
    }
    let mut picked: Vec<usize> = index::sample(rng, eligible.len(), n).into_vec();
    picked.sort_unstable();
    let mut classes = Vec::with_capacity(n);
    let mut support = Vec::with_capacity(n * k);
    let mut query = Vec::with_capacity(n * q);
    for &p in &picked {
        let (&label, items) = eligible[p];
        classes.push(label);
        let chosen = index::sample(rng, items.len(), k + q).into_vec();
        support.extend(chosen[..k].iter().map(|&j| items[j]));
        query.extend(chosen[k..].iter().map(|&j| items[j]));
    }
    Ok(Episode { classes, support, query, k, q })
}

/// Per-class mean of unit support embeddings, then L2-normalized. A zero
/// mean stays zero. `labels[i]` in `0..n` names the group of row `i`.
pub fn prototypes_from_embeddings(embeddings: &[f64], dim: usize, labels: &[usize], n: usize) -> Result<Vec<f64>> {
    if dim == 0 || embeddings.len() != labels.len() * dim {
        return Err(dim_err(
            "prototypes",
            format!("{} values for {} labels of dim {dim}", embeddings.len(), labels.len()),
        ));
    }
    let mut sums = vec![0.0; n * dim];
    let mut counts = vec![0usize; n];
    for (row, &c) in embeddings.chunks_exact(dim).zip(labels) {
        if c >= n {
            return Err(PalError::Index { label: c, classes: n });
        }
        counts[c] += 1;
        for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row) {
            *s += v;
        }
    }
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(PalError::Contract(format!("prototype class {c} has no support items")));
    }
    for (proto, &k) in sums.chunks_exact_mut(dim).zip(&counts) {
        for v in proto.iter_mut() {
            *v /= k as f64;
        }
        l2_normalize_in_place(proto, L2_EPS);
    }
    Ok(sums)
}

/// Unit prototypes for an episode's support set under `enc`.
pub fn prototypes(enc: &Encoder, split: &Dataset, episode: &Episode) -> Result<Vec<f64>> {
    let inputs: Vec<f64> = episode.support.iter().flat_map(|&i| split.input(i).iter().copied()).collect();
    let z = enc.embed_batch(&inputs, episode.support.len())?;
    prototypes_from_embeddings(&z, enc.embed_dim(), &episode.support_labels(), episode.n())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = pairwise_dot(a, a).sqrt();
    let nb = pairwise_dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    pairwise_dot(a, b) / (na * nb)
}

/// Index of the prototype with the highest cosine similarity to `z_q`;
/// ties go to the lowest index.
pub fn classify_query(protos: &[f64], dim: usize, z_q: &[f64]) -> Result<usize> {
    if dim == 0 || protos.is_empty() || !protos.len().is_multiple_of(dim) || z_q.len() != dim {
        return Err(dim_err(
            "classify_query",
            format!("{} prototype values, query of {}, dim {dim}", protos.len(), z_q.len()),
        ));
    }
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (c, p) in protos.chunks_exact(dim).enumerate() {
        let s = cosine(p, z_q);
        if s > best_sim {
            best = c;
            best_sim = s;
        }
    }
    Ok(best)
}

/// Mean accuracy with a normal-approximation 95% interval.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub per_episode: Vec<f64>,
}

impl EvalReport {
    /// `ci95 = 1.96 * s / sqrt(n)` with the sample standard deviation `s`.
    pub fn from_accuracies(per_episode: Vec<f64>) -> Result<Self> {
        let n = per_episode.len();
        if n == 0 {
            return Err(PalError::Parameter("report needs at least one episode".into()));
        }
        // Shifted by the first value so constant inputs give exactly zero spread.
        let shift = per_episode[0];
        let mean = shift + per_episode.iter().map(|a| a - shift).sum::<f64>() / n as f64;
        let ci95 = if n > 1 {
            let var = per_episode.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self { episodes: n, mean_accuracy: mean, ci95, per_episode })
    }

    /// `"mean ± ci"` in percent with two decimals.
    pub fn summary(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean_accuracy, 100.0 * self.ci95)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("episode_id,accuracy\n");
        for (i, a) in self.per_episode.iter().enumerate() {
            let _ = writeln!(s, "{i},{a}");
        }
        let _ = writeln!(s, "# mean ± ci95: {} ({} episodes)", self.summary(), self.episodes);
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn episode_rng(seed: u64, episode: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode as u64);
    rng
}

fn episode_accuracy(embeddings: &[f64], dim: usize, ep: &Episode) -> Result<f64> {
    let gather = |ids: &[usize]| -> Vec<f64> {
        ids.iter().flat_map(|&i| embeddings[i * dim..(i + 1) * dim].iter().copied()).collect()
    };
    let protos = prototypes_from_embeddings(&gather(&ep.support), dim, &ep.support_labels(), ep.n())?;
    let mut hits = 0usize;
    for (&item, truth) in ep.query.iter().zip(ep.query_labels()) {
        hits += usize::from(classify_query(&protos, dim, &embeddings[item * dim..(item + 1) * dim])? == truth);
    }
    Ok(hits as f64 / ep.query.len() as f64)
}

/// Evaluates precomputed embeddings (`split.len() x dim`). Episode `e` draws
/// from its own generator stream, so results do not depend on `exec`.
pub fn evaluate_embeddings(
    split: &Dataset,
    embeddings: &[f64],
    dim: usize,
    spec: &EpisodeSpec,
    seed: u64,
    exec: Exec,
) -> Result<EvalReport> {
    spec.validate()?;
    if embeddings.len() != split.len() * dim {
        return Err(dim_err(
            "evaluate",
            format!("{} embedding values for {} items of dim {dim}", embeddings.len(), split.len()),
        ));
    }
    let accs = map_indexed(exec, spec.episodes, |e| {
        let ep = sample_episode(split, spec.n, spec.k, spec.q, &mut episode_rng(seed, e))?;
        episode_accuracy(embeddings, dim, &ep)
    });
    EvalReport::from_accuracies(accs.into_iter().collect::<Result<Vec<_>>>()?)
}

/// Embeds the whole split once, then evaluates `spec.episodes` episodes.
pub fn evaluate(enc: &Encoder, split: &Dataset, spec: &EpisodeSpec, seed: u64, exec: Exec) -> Result<EvalReport> {
    let z = enc.embed_batch(split.inputs(), split.len())?;
    evaluate_embeddings(split, &z, enc.embed_dim(), spec, seed, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy_split(classes: usize, per: usize) -> Dataset {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for c in 0..classes {
            for i in 0..per {
                x.extend([c as f64, i as f64]);
                y.push(10 + c);
            }
        }
        Dataset::new(x, y, 2, 10, classes).unwrap()
    }

    #[test]
    fn episode_sizes() {
        let d = toy_split(8, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = sample_episode(&d, 5, 1, 15, &mut rng).unwrap();
        assert_eq!((e.support.len(), e.query.len()), (5, 75));
        let e = sample_episode(&d, 5, 5, 15, &mut rng).unwrap();
        assert_eq!((e.support.len(), e.query.len()), (25, 75));
        for (c, &label) in e.classes.iter().enumerate() {
            assert!(e.support[c * 5..(c + 1) * 5].iter().all(|&i| d.labels()[i] == label));
            assert!(e.query[c * 15..(c + 1) * 15].iter().all(|&i| d.labels()[i] == label));
        }
        assert!(e.support.iter().all(|s| !e.query.contains(s)));
    }

    #[test]
    fn episode_is_seed_deterministic() {
        let d = toy_split(8, 20);
        let a = sample_episode(&d, 5, 1, 15, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_episode(&d, 5, 1, 15, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn capacity_errors_name_shortfall() {
        let d = toy_split(4, 20);
        let err = sample_episode(&d, 5, 1, 15, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, PalError::Capacity(_)));
        assert!(err.to_string().contains("4 such classes"), "{err}");
        let d = toy_split(8, 10);
        assert!(matches!(sample_episode(&d, 5, 1, 15, &mut ChaCha8Rng::seed_from_u64(0)), Err(PalError::Capacity(_))));
    }

    #[test]
    fn prototype_examples() {
        let p = prototypes_from_embeddings(&[0.6, 0.8], 2, &[0], 1).unwrap();
        assert_eq!(p, vec![0.6, 0.8]);
        let p = prototypes_from_embeddings(&[1.0, 0.0, -1.0, 0.0], 2, &[0, 0], 1).unwrap();
        assert_eq!(p, vec![0.0, 0.0]);
        let p = prototypes_from_embeddings(&[1.0, 0.0, 0.0, 1.0], 2, &[0, 0], 1).unwrap();
        assert_abs_diff_eq!(p[0], 1.0 / 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0 / 2f64.sqrt(), epsilon = 1e-15);
        assert!(matches!(prototypes_from_embeddings(&[1.0, 0.0], 2, &[1], 2), Err(PalError::Contract(_))));
    }

    #[test]
    fn classify_examples() {
        let protos = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(classify_query(&protos, 3, &[0.0, 0.0, 1.0]).unwrap(), 2);
        assert_eq!(classify_query(&[1.0, 0.0, 1.0, 0.0], 2, &[0.0, 1.0]).unwrap(), 0);
        assert_eq!(classify_query(&[1.0, 0.0, 0.0, 1.0], 2, &[0.8, 0.6]).unwrap(), 0);
    }

    #[test]
    fn report_statistics() {
        let r = EvalReport::from_accuracies(vec![0.8, 0.8, 0.8]).unwrap();
        assert_abs_diff_eq!(r.mean_accuracy, 0.8, epsilon = 1e-12);
        assert_eq!(r.ci95, 0.0);
        let r = EvalReport::from_accuracies(vec![0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(r.ci95, 1.96 * 0.5f64.sqrt() / 2f64.sqrt(), epsilon = 1e-12);
        assert!(r.to_csv().starts_with("episode_id,accuracy\n0,0\n1,1\n# mean"));
    }

    #[test]
    fn orthogonal_class_embeddings_are_perfect() {
        let d = toy_split(8, 20);
        let mut z = vec![0.0; d.len() * 8];
        for (i, &l) in d.labels().iter().enumerate() {
            z[i * 8 + (l - 10)] = 1.0;
        }
        let spec = EpisodeSpec { episodes: 50, ..EpisodeSpec::default() };
        let r = evaluate_embeddings(&d, &z, 8, &spec, 0, Exec::Parallel).unwrap();
        assert_eq!(r.mean_accuracy, 1.0);
        assert_eq!(r.ci95, 0.0);
        let s = evaluate_embeddings(&d, &z, 8, &spec, 0, Exec::Sequential).unwrap();
        assert_eq!(r, s);
    }
}

use std::collections::BTreeSet;

use pal::data::{generate_synthetic, Dataset, SyntheticSpec};
use pal::encoder::{Encoder, EncoderConfig};
use pal::eval::{evaluate, prototypes_from_embeddings, sample_episode, EpisodeSpec};
use pal::numeric::{l2_normalize, L2_EPS};
use pal::par::Exec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn novel() -> Dataset {
    generate_synthetic(&SyntheticSpec::default()).unwrap().novel
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn episodes_are_well_formed(n in 2usize..=8, k in 1usize..=5, q in 1usize..=10, seed in any::<u64>()) {
        let data = novel();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ep = sample_episode(&data, n, k, q, &mut rng).unwrap();
        prop_assert_eq!(ep.classes.len(), n);
        prop_assert_eq!(ep.classes.iter().collect::<BTreeSet<_>>().len(), n);
        prop_assert!(ep.classes.iter().all(|c| (data.label_min()..data.label_min() + data.label_count()).contains(c)));
        prop_assert_eq!(ep.support.len(), n * k);
        prop_assert_eq!(ep.query.len(), n * q);
        let support: BTreeSet<_> = ep.support.iter().collect();
        prop_assert!(ep.query.iter().all(|i| !support.contains(i)));
        for (c, &class) in ep.classes.iter().enumerate() {
            prop_assert!(ep.support[c * k..(c + 1) * k].iter().all(|&i| data.labels()[i] == class));
            prop_assert!(ep.query[c * q..(c + 1) * q].iter().all(|&i| data.labels()[i] == class));
        }
    }

    #[test]
    fn prototypes_approach_the_class_mean_as_k_grows(seed in 0u64..1000) {
        let data = novel();
        let enc = Encoder::new(EncoderConfig::new(data.dim(), seed)).unwrap();
        let d = enc.embed_dim();
        let z = enc.embed_batch(data.inputs(), data.len()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mean_dist = Vec::new();
        for k in [1, 5, 25] {
            let mut total = 0.0;
            for _ in 0..100 {
                let ep = sample_episode(&data, 5, k, 1, &mut rng).unwrap();
                let emb: Vec<f64> = ep.support.iter().flat_map(|&i| z[i * d..(i + 1) * d].iter().copied()).collect();
                let protos = prototypes_from_embeddings(&emb, d, &ep.support_labels(), 5).unwrap();
                for (c, &class) in ep.classes.iter().enumerate() {
                    let members: Vec<usize> = (0..data.len()).filter(|&i| data.labels()[i] == class).collect();
                    let mut mean = vec![0.0; d];
                    for &i in &members {
                        mean.iter_mut().zip(&z[i * d..(i + 1) * d]).for_each(|(m, v)| *m += v);
                    }
                    total += dist(&protos[c * d..(c + 1) * d], &l2_normalize(&mean, L2_EPS));
                }
            }
            mean_dist.push(total / 500.0);
        }
        prop_assert!(mean_dist[0] >= mean_dist[1] && mean_dist[1] >= mean_dist[2], "{mean_dist:?}");
    }
}

#[test]
fn evaluation_is_reproducible_and_strategy_independent() {
    let data = novel();
    let enc = Encoder::new(EncoderConfig::new(data.dim(), 3)).unwrap();
    let spec = EpisodeSpec { episodes: 100, ..EpisodeSpec::default() };
    let a = evaluate(&enc, &data, &spec, 9, Exec::Parallel).unwrap();
    let b = evaluate(&enc, &data, &spec, 9, Exec::Sequential).unwrap();
    assert_eq!(a, b);
    assert!(a.per_episode.iter().all(|x| (0.0..=1.0).contains(x)));
    assert_ne!(evaluate(&enc, &data, &spec, 10, Exec::Sequential).unwrap(), a);
}

#[test]
fn report_csv_lists_every_episode() {
    let data = novel();
    let enc = Encoder::new(EncoderConfig::new(data.dim(), 0)).unwrap();
    let r = evaluate(&enc, &data, &EpisodeSpec { episodes: 7, ..EpisodeSpec::default() }, 0, Exec::Sequential).unwrap();
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "episode_id,accuracy");
    assert_eq!(lines.len(), 1 + 7 + 1);
    assert!(lines[8].starts_with("# mean ± ci95:"));
}

#[test]
fn oversized_episodes_are_capacity_errors() {
    let data = novel();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = sample_episode(&data, 9, 1, 15, &mut rng).unwrap_err();
    assert!(matches!(err, pal::PalError::Capacity(_)), "{err}");
    assert!(sample_episode(&data, 5, 40, 15, &mut rng).is_err());
}

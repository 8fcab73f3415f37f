//! Non-IID client partitioning via per-class Dirichlet proportions.

use std::collections::BTreeMap;

use crate::data::{Corpus, TaskSpec};
use crate::error::{Error, Result};
use crate::rng::{dirichlet, Prng};

/// For one task: the train-corpus indices owned by each client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientPartition {
    pub per_client: Vec<Vec<usize>>,
}

impl ClientPartition {
    pub fn num_clients(&self) -> usize {
        self.per_client.len()
    }

    pub fn total_samples(&self) -> usize {
        self.per_client.iter().map(|c| c.len()).sum()
    }

    pub fn empty_clients(&self) -> Vec<usize> {
        self.per_client
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_empty())
            .map(|(k, _)| k)
            .collect()
    }
}

/// Round fractional shares to integer counts summing to `total`
/// (largest remainder, ties by client index).
fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = proportions
        .iter()
        .map(|&p| (p * total as f64).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = proportions[a] * total as f64 - counts[a] as f64;
        let fb = proportions[b] * total as f64 - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().take(total - assigned) {
        counts[k] += 1;
    }
    counts
}

/// Split one task's training samples across `k` clients: for each class,
/// client shares are drawn from Dirichlet(beta) and samples are dealt out by
/// those shares. Empty client slices are allowed.
pub fn dirichlet_partition<F>(
    corpus: &Corpus<F>,
    task: &TaskSpec,
    k: usize,
    beta: f64,
    rng: &mut Prng,
) -> Result<ClientPartition> {
    if k == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if beta <= 0.0 {
        return Err(Error::Config(format!("beta {beta} must be positive")));
    }
    let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &class in &task.classes {
        let mut indices: Vec<usize> = task
            .train
            .iter()
            .cloned()
            .filter(|&i| corpus.train[i].label == class)
            .collect();
        // shuffle so contiguous shares are random subsets
        use rand::seq::SliceRandom;
        indices.shuffle(rng);
        let proportions = dirichlet(rng, beta, k);
        let counts = largest_remainder(&proportions, indices.len());
        let mut cursor = 0;
        for (client, &count) in counts.iter().enumerate() {
            per_client[client].extend(&indices[cursor..cursor + count]);
            cursor += count;
        }
    }
    for c in per_client.iter_mut() {
        c.sort_unstable();
    }
    Ok(ClientPartition { per_client })
}

/// Mean total-variation distance between each client's label distribution
/// and the global label distribution of the task. Clients with no samples
/// are skipped.
pub fn mean_tv_distance<F>(
    corpus: &Corpus<F>,
    task: &TaskSpec,
    partition: &ClientPartition,
) -> f64 {
    let count_labels = |indices: &[usize]| -> BTreeMap<u32, f64> {
        let mut map = BTreeMap::new();
        for &i in indices {
            *map.entry(corpus.train[i].label).or_insert(0.0) += 1.0;
        }
        let total: f64 = map.values().sum();
        if total > 0.0 {
            map.values_mut().for_each(|v| *v /= total);
        }
        map
    };
    let global = count_labels(&task.train);
    let mut sum = 0.0;
    let mut counted = 0usize;
    for client in &partition.per_client {
        if client.is_empty() {
            continue;
        }
        let local = count_labels(client);
        let mut tv = 0.0;
        for (&class, &g) in &global {
            let l = local.get(&class).copied().unwrap_or(0.0);
            tv += (g - l).abs();
        }
        sum += 0.5 * tv;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        sum / counted as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_tasks, synthetic_corpus};
    use crate::rng::stream;

    fn setup() -> (Corpus<f32>, TaskSpec) {
        let corpus: Corpus<f32> = synthetic_corpus(4, 20, 2, 8, 1, 3);
        let tasks = split_tasks(&corpus, 2, &mut stream(1, &[])).unwrap();
        let task = tasks.tasks[0].clone();
        (corpus, task)
    }

    #[test]
    fn single_client_gets_everything() {
        let (corpus, task) = setup();
        let p = dirichlet_partition(&corpus, &task, 1, 0.5, &mut stream(2, &[])).unwrap();
        assert_eq!(p.per_client[0].len(), task.train.len());
    }

    #[test]
    fn partition_conserves_samples_and_is_disjoint() {
        let (corpus, task) = setup();
        for seed in 0..6 {
            let p = dirichlet_partition(&corpus, &task, 5, 0.1, &mut stream(seed, &[])).unwrap();
            assert_eq!(p.total_samples(), task.train.len());
            let mut all: Vec<usize> = p.per_client.iter().flatten().cloned().collect();
            all.sort_unstable();
            let mut expect = task.train.clone();
            expect.sort_unstable();
            assert_eq!(all, expect);
        }
    }

    #[test]
    fn per_class_counts_are_conserved() {
        let (corpus, task) = setup();
        let p = dirichlet_partition(&corpus, &task, 3, 0.5, &mut stream(7, &[])).unwrap();
        for &class in &task.classes {
            let total: usize = p
                .per_client
                .iter()
                .flatten()
                .filter(|&&i| corpus.train[i].label == class)
                .count();
            assert_eq!(total, 20);
        }
    }

    #[test]
    fn smaller_beta_is_more_skewed() {
        // measured on a multi-class task; with very few classes the skew
        // metric degenerates (one client can hold the global distribution)
        let corpus: Corpus<f32> = synthetic_corpus(10, 12, 1, 8, 1, 3);
        let tasks = split_tasks(&corpus, 1, &mut stream(1, &[])).unwrap();
        let task = &tasks.tasks[0];
        let mean_over_seeds = |beta: f64| -> f64 {
            (0..10)
                .map(|seed| {
                    let p =
                        dirichlet_partition(&corpus, task, 10, beta, &mut stream(seed, &[9]))
                            .unwrap();
                    mean_tv_distance(&corpus, task, &p)
                })
                .sum::<f64>()
                / 10.0
        };
        let tv_005 = mean_over_seeds(0.05);
        let tv_01 = mean_over_seeds(0.1);
        let tv_05 = mean_over_seeds(0.5);
        assert!(
            tv_005 > tv_01 && tv_01 > tv_05,
            "expected monotone skew: {tv_005} > {tv_01} > {tv_05}"
        );
    }

    #[test]
    fn largest_remainder_rounds_exactly() {
        let counts = largest_remainder(&[0.5, 0.25, 0.25], 5);
        assert_eq!(counts.iter().sum::<usize>(), 5);
        assert_eq!(counts[0], 3); // 2.5 floors to 2, largest remainder wins the extra
        let tie = largest_remainder(&[0.5, 0.5], 3);
        assert_eq!(tie, vec![2, 1]); // tie broken by client index
    }

    #[test]
    fn invalid_arguments_are_config_errors() {
        let (corpus, task) = setup();
        assert!(dirichlet_partition(&corpus, &task, 0, 0.5, &mut stream(1, &[])).is_err());
        assert!(dirichlet_partition(&corpus, &task, 2, 0.0, &mut stream(1, &[])).is_err());
    }
}

//! Seeded generator for implicit-feedback data with latent topic structure.
//!
//! Items belong to topics and carry a log-normal popularity weight. Each user prefers a few topics; every interaction is drawn from a
//! preferred topic with probability `topic_affinity`, otherwise from global
//! popularity. Per-user counts follow a shifted geometric law, which gives the
//! long tail typical of rating logs.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedAliasIndex, Distribution, Geometric, LogNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{assemble, AssembleOptions, DatasetError, Fragment, InteractionDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_topics: usize,
    /// Topics each user draws from.
    pub topics_per_user: usize,
    pub min_per_user: usize,
    pub mean_per_user: f64,
    /// Spread of log-popularity; larger means a heavier head and longer tail.
    pub popularity_sigma: f64,
    pub topic_affinity: f64,
    /// Share of each user's interactions held out as test.
    pub test_fraction: f64,
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    /// Roughly the shape of the 100K MovieLens release.
    fn default() -> Self {
        SyntheticConfig {
            num_users: 943,
            num_items: 1682,
            num_topics: 20,
            topics_per_user: 3,
            min_per_user: 20,
            mean_per_user: 106.0,
            popularity_sigma: 1.4,
            topic_affinity: 0.8,
            test_fraction: 0.2,
            valid_fraction: 0.05,
            seed: 2021,
        }
    }
}

impl SyntheticConfig {
    fn check(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::Invalid(m.to_string()));
        if self.num_users == 0 || self.num_items < 2 || self.num_topics == 0 {
            return bad("need users, at least two items and a topic");
        }
        if self.topics_per_user == 0 || self.topics_per_user > self.num_topics {
            return bad("topics_per_user must be in 1..=num_topics");
        }
        if self.min_per_user < 2 || self.min_per_user > self.num_items {
            return bad("min_per_user must be in 2..=num_items");
        }
        if !(self.mean_per_user >= self.min_per_user as f64) {
            return bad("mean_per_user must be at least min_per_user");
        }
        if !(0.0..=1.0).contains(&self.topic_affinity)
            || !(0.0..1.0).contains(&self.test_fraction)
            || !(self.popularity_sigma >= 0.0 && self.popularity_sigma.is_finite())
        {
            return bad("affinity, test_fraction or popularity_sigma out of range");
        }
        Ok(())
    }
}

/// Train and test fragments keyed by dense IDs.
pub fn generate_fragments(config: &SyntheticConfig) -> Result<(Fragment, Fragment), DatasetError> {
    config.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_items = config.num_items;

    let law = LogNormal::new(0.0, config.popularity_sigma)
        .map_err(|e| DatasetError::Invalid(e.to_string()))?;
    let popularity: Vec<f64> = (0..n_items).map(|_| law.sample(&mut rng)).collect();
    let topic_of: Vec<usize> = (0..n_items)
        .map(|_| rng.random_range(0..config.num_topics))
        .collect();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); config.num_topics];
    for (i, &t) in topic_of.iter().enumerate() {
        members[t].push(i);
    }
    members.retain(|m| !m.is_empty());
    let samplers: Vec<WeightedAliasIndex<f64>> = members
        .iter()
        .map(|m| WeightedAliasIndex::new(m.iter().map(|&i| popularity[i]).collect()).unwrap())
        .collect();
    let global = WeightedAliasIndex::new(popularity.clone()).unwrap();
    let extra = 1.0 / (config.mean_per_user - config.min_per_user as f64 + 1.0);
    let count_law = Geometric::new(extra).unwrap();
    let topics_per_user = config.topics_per_user.min(members.len());

    let mut train = Fragment::default();
    let mut test = Fragment::default();
    let topic_ids: Vec<usize> = (0..members.len()).collect();
    for u in 0..config.num_users {
        let prefs: Vec<usize> = topic_ids
            .choose_multiple(&mut rng, topics_per_user)
            .copied()
            .collect();
        let cap = (n_items * 3 / 4).max(config.min_per_user);
        let target = (config.min_per_user + count_law.sample(&mut rng) as usize).min(cap);
        let mut picked = std::collections::BTreeSet::new();
        let mut order = Vec::with_capacity(target);
        let mut attempts = 0;
        while picked.len() < target && attempts < target * 50 {
            attempts += 1;
            let item = if rng.random_bool(config.topic_affinity) {
                let t = prefs[rng.random_range(0..prefs.len())];
                members[t][samplers[t].sample(&mut rng)]
            } else {
                global.sample(&mut rng)
            };
            if picked.insert(item) {
                order.push(item);
            }
        }
        order.shuffle(&mut rng);
        let n_test = ((order.len() as f64) * config.test_fraction).round() as usize;
        let n_test = n_test.min(order.len().saturating_sub(1));
        for (k, &item) in order.iter().enumerate() {
            if k < n_test {
                test.insert(u as u64, item as u64);
            } else {
                train.insert(u as u64, item as u64);
            }
        }
    }
    Ok((train, test))
}

/// Generates fragments and assembles them with a validation hold-out.
pub fn generate(config: &SyntheticConfig) -> Result<InteractionDataset, DatasetError> {
    let (train, test) = generate_fragments(config)?;
    let options = AssembleOptions {
        valid_fraction: config.valid_fraction,
        seed: config.seed,
    };
    Ok(assemble(&train, None, &test, &options)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            num_users: 60,
            num_items: 80,
            num_topics: 4,
            min_per_user: 5,
            mean_per_user: 12.0,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = SyntheticConfig { seed: 7, ..small() };
        assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn every_user_meets_the_minimum() {
        let c = small();
        let (train, test) = generate_fragments(&c).unwrap();
        let mut per_user = vec![0; c.num_users];
        for &(u, _) in train.pairs.iter().chain(&test.pairs) {
            per_user[u as usize] += 1;
        }
        assert!(per_user.iter().all(|&n| n >= c.min_per_user));
        assert!(train.pairs.is_disjoint(&test.pairs));
    }

    #[test]
    fn default_shape_resembles_the_100k_log() {
        let ds = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(ds.num_users, 943);
        assert!(
            ds.num_items > 1500 && ds.num_items <= 1682,
            "{}",
            ds.num_items
        );
        let n = ds.num_interactions();
        assert!((85_000..=115_000).contains(&n), "{n}");
    }

    #[test]
    fn rejects_bad_config() {
        let c = SyntheticConfig {
            topics_per_user: 0,
            ..small()
        };
        assert!(generate(&c).is_err());
    }
}

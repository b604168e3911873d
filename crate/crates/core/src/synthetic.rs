//! Seeded synthetic multi-behavior logs with planted purchase intent.
//!
//! Each user prefers one topic. Purchases and adds come mostly from that
//! topic, weighted by each item's purchase appeal. On top of the shopping
//! sessions, every user browses: these views follow a separate, steeper
//! popularity that is unrelated to purchase appeal, so the most viewed
//! items are not the most bought.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::behavior::Behavior;
use crate::dataset::{Interaction, InteractionLog};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub topics: usize,
    /// Inclusive range of purchases per user.
    pub purchases: (usize, usize),
    /// Adds not followed by a purchase.
    pub extra_adds: (usize, usize),
    /// Browsing views outside the user's sessions.
    pub noise_views: (usize, usize),
    /// Probability that a purchase or add stays within the preferred topic.
    pub topic_affinity: f64,
    /// Share of browsing views drawn from the preferred topic.
    pub browse_affinity: f64,
    /// Zipf exponent of purchase appeal.
    pub popularity_skew: f64,
    /// Zipf exponent of browsing popularity.
    pub view_skew: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 500,
            items: 200,
            topics: 10,
            purchases: (5, 8),
            extra_adds: (2, 5),
            noise_views: (45, 65),
            topic_affinity: 0.85,
            browse_affinity: 0.3,
            popularity_skew: 0.8,
            view_skew: 0.9,
            seed: 7,
        }
    }
}

fn range(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.gen_range(lo..=hi.max(lo))
}

enum Step {
    Buy(usize),
    Cart(usize),
    Browse(usize),
}

/// Generates a deduplicated log. Every user gets at least two purchases.
pub fn generate(cfg: &SyntheticConfig) -> Result<InteractionLog> {
    if cfg.users == 0 || cfg.topics == 0 || cfg.items < cfg.topics {
        return Err(Error::Config(format!(
            "need users > 0 and items >= topics > 0, got {} users, {} items, {} topics",
            cfg.users, cfg.items, cfg.topics
        )));
    }
    if cfg.purchases.0 < 2 {
        return Err(Error::Config("at least two purchases per user are required for the split".into()));
    }
    if cfg.purchases.1 > cfg.items / cfg.topics {
        return Err(Error::Config("more purchases per user than items per topic".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.items;

    // topic membership and both popularities are shuffled independently so
    // ids carry no signal
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut topic_of = vec![0; n];
    for (rank, &v) in order.iter().enumerate() {
        topic_of[v] = rank % cfg.topics;
    }
    let mut zipf = |skew: f64| {
        order.shuffle(&mut rng);
        let mut w = vec![0.0; n];
        for (rank, &v) in order.iter().enumerate() {
            w[v] = 1.0 / ((rank + 1) as f64).powf(skew);
        }
        w
    };
    let popularity = zipf(cfg.popularity_skew);
    let view_popularity = zipf(cfg.view_skew);
    let members: Vec<Vec<usize>> = (0..cfg.topics).map(|t| (0..n).filter(|&v| topic_of[v] == t).collect()).collect();
    let topic_pick: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| WeightedIndex::new(m.iter().map(|&v| popularity[v])).expect("topic has items"))
        .collect();
    let global_pick = WeightedIndex::new(&popularity).expect("positive popularity");
    let browse_pick = WeightedIndex::new(&view_popularity).expect("positive popularity");

    let mut events = Vec::new();
    for u in 0..cfg.users {
        let home = rng.gen_range(0..cfg.topics);
        let pick = |rng: &mut ChaCha8Rng, affinity: f64| -> usize {
            if rng.gen_bool(affinity) {
                members[home][topic_pick[home].sample(rng)]
            } else {
                global_pick.sample(rng)
            }
        };

        let mut bought = Vec::new();
        let target = range(&mut rng, cfg.purchases);
        while bought.len() < target {
            // fall back to the home topic so the loop always terminates
            let v = if bought.len() + 1 < target || rng.gen_bool(0.5) {
                pick(&mut rng, cfg.topic_affinity)
            } else {
                members[home][rng.gen_range(0..members[home].len())]
            };
            if !bought.contains(&v) {
                bought.push(v);
            }
        }
        let extra = range(&mut rng, cfg.extra_adds);
        let mut carted: Vec<usize> = (0..extra).map(|_| pick(&mut rng, cfg.topic_affinity)).collect();
        carted.retain(|v| !bought.contains(v));
        let browse = range(&mut rng, cfg.noise_views);

        let mut steps: Vec<Step> = bought.iter().map(|&v| Step::Buy(v)).collect();
        steps.extend(carted.iter().map(|&v| Step::Cart(v)));
        for _ in 0..browse {
            let v = if rng.gen_bool(cfg.browse_affinity) { pick(&mut rng, 1.0) } else { browse_pick.sample(&mut rng) };
            steps.push(Step::Browse(v));
        }
        steps.shuffle(&mut rng);

        let mut t: i64 = 0;
        for step in steps {
            let mut emit = |rng: &mut ChaCha8Rng, item: usize, behavior: Behavior| {
                t += rng.gen_range(1..120);
                events.push(Interaction { user: u, item, behavior, timestamp: t });
            };
            match step {
                Step::Buy(v) => {
                    if rng.gen_bool(0.9) {
                        emit(&mut rng, v, Behavior::View);
                    }
                    if rng.gen_bool(0.6) {
                        emit(&mut rng, v, Behavior::Add);
                    }
                    emit(&mut rng, v, Behavior::Purchase);
                }
                Step::Cart(v) => {
                    emit(&mut rng, v, Behavior::View);
                    emit(&mut rng, v, Behavior::Add);
                }
                Step::Browse(v) => emit(&mut rng, v, Behavior::View),
            }
        }
    }

    let mut log = InteractionLog::new(events, cfg.users, n);
    log.user_ids = (0..cfg.users).map(|u| format!("u{u}")).collect();
    log.item_ids = (0..n).map(|v| format!("i{v}")).collect();
    log.dedup();
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_log_has_expected_shape() {
        let log = generate(&SyntheticConfig::default()).unwrap();
        log.validate().unwrap();
        let s = log.stats();
        assert_eq!((s.users, s.items), (500, 200));
        assert!(s.view_ratio > 0.72 && s.view_ratio < 0.78, "view ratio {}", s.view_ratio);
        let mut purchases = vec![0; 500];
        for e in &log.events {
            if e.behavior == Behavior::Purchase {
                purchases[e.user] += 1;
            }
        }
        assert!(purchases.iter().all(|&p| p >= 5));
    }

    #[test]
    fn same_seed_same_log() {
        let cfg = SyntheticConfig { users: 30, items: 60, topics: 5, ..SyntheticConfig::default() };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SyntheticConfig { seed: 8, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn invalid_sizes_are_rejected() {
        assert!(generate(&SyntheticConfig { users: 0, ..SyntheticConfig::default() }).is_err());
        assert!(generate(&SyntheticConfig { items: 3, topics: 5, ..SyntheticConfig::default() }).is_err());
        assert!(generate(&SyntheticConfig { purchases: (1, 3), ..SyntheticConfig::default() }).is_err());
    }
}

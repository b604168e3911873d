//! Full-ranking evaluation: every item is scored for each held-out user,
//! training purchases are excluded, and the held-out item's rank gives
//! `HR@K` and `NDCG@K`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::behavior::Behavior;
use crate::dataset::HeldOut;
use crate::error::{Error, Result};
use crate::graph::BehaviorGraph;
use crate::model::{ParameterSet, Refinement};
use crate::scalar::{dot, Scalar};

/// Target-behavior scores of every item for user `u`.
pub fn score_items<T: Scalar>(u: usize, refined: &Refinement<T>, params: &ParameterSet<T>) -> Vec<T> {
    let h = params.w_pre.row(Behavior::TARGET.index());
    let hp: Vec<T> = h.iter().zip(refined.user.row(u)).map(|(&a, &b)| a * b).collect();
    (0..refined.item.rows()).map(|v| dot(&hp, refined.item.row(v))).collect()
}

/// 1-based position of `target` when items are sorted by descending score,
/// ties broken by ascending item id, with `excluded` items removed.
pub fn rank_of<T: Scalar>(scores: &[T], target: usize, excluded: &[usize]) -> Result<usize> {
    let s_t = *scores.get(target).ok_or_else(|| Error::Lookup(format!("item {target} outside {} scores", scores.len())))?;
    if !s_t.is_finite() {
        return Err(Error::NonFinite { tensor: format!("score of item {target}") });
    }
    let mut ahead = 0usize;
    for (v, &s) in scores.iter().enumerate() {
        if v != target && (s > s_t || (s == s_t && v < target)) {
            ahead += 1;
        }
    }
    let mut excluded = excluded.to_vec();
    excluded.sort_unstable();
    excluded.dedup();
    for &v in &excluded {
        if v != target && v < scores.len() && (scores[v] > s_t || (scores[v] == s_t && v < target)) {
            ahead -= 1;
        }
    }
    Ok(ahead + 1)
}

/// The `k` best items by descending score, ties by ascending id, skipping `excluded`.
pub fn top_k<T: Scalar>(scores: &[T], k: usize, excluded: &[usize]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).filter(|v| !excluded.contains(v)).collect();
    ids.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

/// Averaged metrics for one cutoff list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub users: usize,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

impl EvalResult {
    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.hr.get(&k).copied()
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ndcg.get(&k).copied()
    }

    /// Flat report keyed `HR@K` / `NDCG@K` plus the user count.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (k, v) in &self.hr {
            map.insert(format!("HR@{k}"), (*v).into());
        }
        for (k, v) in &self.ndcg {
            map.insert(format!("NDCG@{k}"), (*v).into());
        }
        map.insert("users".into(), self.users.into());
        serde_json::Value::Object(map)
    }
}

/// `HR@K` and `NDCG@K = mean(1[rank ≤ K] / log2(rank + 1))`.
pub fn metrics(ranks: &[usize], ks: &[usize]) -> Result<EvalResult> {
    if ranks.is_empty() {
        return Err(Error::UndefinedMetrics);
    }
    let n = ranks.len() as f64;
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        let hits = ranks.iter().filter(|&&r| r <= k).count() as f64;
        let gain: f64 = ranks.iter().filter(|&&r| r <= k).map(|&r| 1.0 / ((r + 1) as f64).log2()).sum();
        hr.insert(k, hits / n);
        ndcg.insert(k, gain / n);
    }
    Ok(EvalResult { users: ranks.len(), hr, ndcg })
}

/// Ranks of each held-out item. `also_exclude` removes a second held-out
/// item per user (the validation purchase when evaluating on test).
pub fn rank_held_out<T: Scalar>(
    refined: &Refinement<T>,
    params: &ParameterSet<T>,
    train: &BehaviorGraph,
    held: &HeldOut,
    also_exclude: Option<&HeldOut>,
) -> Result<Vec<usize>> {
    let pairs: Vec<(usize, usize)> = held.iter().map(|(&u, &v)| (u, v)).collect();
    pairs
        .par_iter()
        .map(|&(u, target)| {
            if u >= refined.user.rows() || target >= refined.item.rows() {
                return Err(Error::Lookup(format!("held-out pair ({u}, {target}) outside the model")));
            }
            let scores = score_items(u, refined, params);
            let mut excluded: Vec<usize> = train.items_of_user(Behavior::TARGET, u).to_vec();
            if let Some(&v) = also_exclude.and_then(|h| h.get(&u)) {
                if !excluded.contains(&v) {
                    excluded.push(v);
                }
            }
            rank_of(&scores, target, &excluded)
        })
        .collect()
}

/// Ranks then metrics at every cutoff in `ks`.
pub fn evaluate<T: Scalar>(
    refined: &Refinement<T>,
    params: &ParameterSet<T>,
    train: &BehaviorGraph,
    held: &HeldOut,
    also_exclude: Option<&HeldOut>,
    ks: &[usize],
) -> Result<EvalResult> {
    let ranks = rank_held_out(refined, params, train, held, also_exclude)?;
    metrics(&ranks, ks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rank_counts_higher_scores_and_lower_tied_ids() {
        let s = [0.5, 0.9, 0.5, 0.1, 0.5];
        assert_eq!(rank_of(&s, 1, &[]).unwrap(), 1);
        assert_eq!(rank_of(&s, 0, &[]).unwrap(), 2);
        assert_eq!(rank_of(&s, 2, &[]).unwrap(), 3);
        assert_eq!(rank_of(&s, 4, &[]).unwrap(), 4);
        assert_eq!(rank_of(&s, 3, &[]).unwrap(), 5);
        // excluding items ahead moves the target up; items behind do not matter
        assert_eq!(rank_of(&s, 4, &[1, 0]).unwrap(), 2);
        assert_eq!(rank_of(&s, 4, &[3]).unwrap(), 4);
        assert!(rank_of(&s, 9, &[]).is_err());
        assert!(rank_of(&[f64::NAN], 0, &[]).is_err());
    }

    #[test]
    fn metric_hand_cases() {
        let r = metrics(&[1], &[10]).unwrap();
        assert_eq!(r.hr_at(10), Some(1.0));
        assert_eq!(r.ndcg_at(10), Some(1.0));
        let r = metrics(&[3], &[10]).unwrap();
        assert_eq!(r.ndcg_at(10), Some(0.5));
        let r = metrics(&[11], &[10]).unwrap();
        assert_eq!((r.hr_at(10), r.ndcg_at(10)), (Some(0.0), Some(0.0)));
        let r = metrics(&[1, 3, 20, 50], &[10, 50]).unwrap();
        assert_eq!(r.hr_at(10), Some(0.5));
        assert_eq!(r.hr_at(50), Some(1.0));
        assert!((r.ndcg_at(10).unwrap() - 1.5 / 4.0).abs() < 1e-15);
        assert!(matches!(metrics(&[], &[10]), Err(Error::UndefinedMetrics)));
    }

    #[test]
    fn mixed_ranks_average() {
        let r = metrics(&[1, 12, 101], &[10]).unwrap();
        assert!((r.hr_at(10).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.ndcg_at(10).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn six_item_hand_sort() {
        // descending: 4 (0.9), 1 (0.7), 3 (0.7), 0 (0.4), 5 (0.2), 2 (0.1)
        let s = [0.4, 0.7, 0.1, 0.7, 0.9, 0.2];
        assert_eq!(top_k(&s, 6, &[]), vec![4, 1, 3, 0, 5, 2]);
        for (pos, v) in [4, 1, 3, 0, 5, 2].into_iter().enumerate() {
            assert_eq!(rank_of(&s, v, &[]).unwrap(), pos + 1);
        }
        // train purchases 4 and 1 removed from the list
        assert_eq!(rank_of(&s, 3, &[4, 1]).unwrap(), 1);
        assert_eq!(rank_of(&s, 2, &[4, 1]).unwrap(), 4);
        assert_eq!(rank_of(&[0.3; 6], 5, &[]).unwrap(), 6);
    }

    #[test]
    fn json_uses_table_column_names() {
        let r = metrics(&[1, 2], &[10, 50]).unwrap();
        let j = r.to_json();
        let keys: Vec<&str> = j.as_object().unwrap().keys().map(String::as_str).collect();
        for k in ["HR@10", "HR@50", "NDCG@10", "NDCG@50", "users"] {
            assert!(keys.contains(&k), "{k}");
        }
        assert_eq!(j["HR@10"], 1.0);
    }

    #[test]
    fn top_k_order() {
        let s = [0.5, 0.9, 0.5, 0.1];
        assert_eq!(top_k(&s, 3, &[]), vec![1, 0, 2]);
        assert_eq!(top_k(&s, 2, &[1]), vec![0, 2]);
    }

    proptest! {
        #[test]
        fn rank_matches_sorting(scores in prop::collection::vec(-3i32..3, 1..40), t in 0usize..40, ex in prop::collection::vec(0usize..40, 0..6)) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let t = t % scores.len();
            let excluded: Vec<usize> = ex.into_iter().filter(|&v| v < scores.len() && v != t).collect();
            let mut dedup = excluded.clone();
            dedup.sort();
            dedup.dedup();
            let order = top_k(&scores, scores.len(), &dedup);
            let pos = order.iter().position(|&v| v == t).unwrap() + 1;
            prop_assert_eq!(rank_of(&scores, t, &dedup).unwrap(), pos);
        }

        #[test]
        fn monotone_transforms_keep_ranks(scores in prop::collection::vec(-5.0f64..5.0, 2..30), t in 0usize..30, a in 0.1f64..3.0, b in -2.0f64..2.0) {
            let t = t % scores.len();
            let base = rank_of(&scores, t, &[]).unwrap();
            let transforms: [&dyn Fn(f64) -> f64; 3] = [&|x| a * x + b, &|x| x.exp(), &|x| x * x * x + x];
            for f in transforms {
                let mapped: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
                prop_assert_eq!(rank_of(&mapped, t, &[]).unwrap(), base);
            }
        }

        #[test]
        fn metrics_are_bounded_and_monotone(ranks in prop::collection::vec(1usize..200, 1..50)) {
            let r = metrics(&ranks, &[10, 50, 100]).unwrap();
            let (h10, h50, h100) = (r.hr_at(10).unwrap(), r.hr_at(50).unwrap(), r.hr_at(100).unwrap());
            prop_assert!(h10 <= h50 && h50 <= h100 && h100 <= 1.0);
            for k in [10, 50, 100] {
                prop_assert!(r.ndcg_at(k).unwrap() <= r.hr_at(k).unwrap() + 1e-15);
                prop_assert!(r.ndcg_at(k).unwrap() >= 0.0);
            }
        }
    }
}

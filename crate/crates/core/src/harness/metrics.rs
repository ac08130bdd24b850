use std::collections::BTreeMap;
use std::time::Duration;

use crate::generation::gen_reward;
use crate::sqlgate::Connection;
use crate::trajectory::{CandidateSet, Trajectory};

/// One prediction to score: the predicted query (absent when nothing was produced), the gold
/// query and the database both run against.
pub struct ExItem<'a> {
    pub predicted: Option<&'a str>,
    pub gold: &'a str,
    pub db: &'a Connection,
}

/// Fraction of predictions whose results match the gold results. Missing or failing predictions,
/// and golds that fail to execute, count as incorrect.
pub fn evaluate_ex(items: &[ExItem<'_>], timeout: Duration) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let correct = items
        .iter()
        .filter(|item| {
            let t = match item.predicted {
                Some(sql) => Trajectory::solved(Vec::new(), "", sql),
                None => Trajectory::unsolved(Vec::new(), crate::trajectory::Termination::TurnLimit),
            };
            gen_reward(&t, item.gold, item.db, timeout) == Ok(1.0)
        })
        .count();
    correct as f64 / items.len() as f64
}

pub fn is_correct(t: &Trajectory) -> bool {
    t.reward == Some(1.0)
}

/// For each `n`, the fraction of sets with a correct trajectory among the first `n` candidates,
/// using rewards already attached to the trajectories. `n` larger than a pool uses the whole pool.
pub fn pass_at_n(sets: &[CandidateSet], ns: &[usize]) -> BTreeMap<usize, f64> {
    ns.iter()
        .map(|&n| {
            let hits = sets
                .iter()
                .filter(|s| s.candidates.iter().take(n).any(is_correct))
                .count();
            let v = if sets.is_empty() {
                0.0
            } else {
                hits as f64 / sets.len() as f64
            };
            (n, v)
        })
        .collect()
}

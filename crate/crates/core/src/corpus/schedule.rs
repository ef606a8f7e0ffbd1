use serde::{Deserialize, Serialize};

use crate::rng::{self, Stream};
use crate::{Error, Result};

/// Partition of class ids into incremental sessions ("B-m Inc-n").
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub base_size: usize,
    pub increment: usize,
    pub sessions: Vec<Vec<u32>>,
    pub seed: u64,
}

impl TaskSchedule {
    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    /// Classes of sessions `0..=session`, in schedule order.
    pub fn seen_through(&self, session: usize) -> Vec<u32> {
        self.sessions[..=session].iter().flatten().copied().collect()
    }

    /// Session index owning `class_id`.
    pub fn session_of(&self, class_id: u32) -> Option<usize> {
        self.sessions.iter().position(|s| s.contains(&class_id))
    }
}

/// Shuffles the class ids with a seeded stream and cuts them into sessions:
/// the first takes `m` classes (`n` when `m == 0`), the rest take `n` each and
/// the last session holds any remainder.
///
/// The input is treated as a set; its order does not affect the result.
pub fn split_tasks(class_ids: &[u32], m: usize, n: usize, seed: u64) -> Result<TaskSchedule> {
    if n == 0 {
        return Err(Error::InvalidArgument("increment must be at least 1".into()));
    }
    let mut ids = class_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let total = ids.len();
    if total == 0 {
        return Err(Error::DegenerateSchedule("no classes".into()));
    }
    if m > total {
        return Err(Error::DegenerateSchedule(format!(
            "base size {m} exceeds {total} classes"
        )));
    }
    let first = if m > 0 { m } else { n.min(total) };
    let incremental = (total - first).div_ceil(n);
    if m + n > total && incremental < 1 {
        return Err(Error::DegenerateSchedule(format!(
            "B{m} Inc{n} over {total} classes leaves no incremental session"
        )));
    }

    rng::shuffle(&mut ids, &mut rng::stream(seed, Stream::TaskSplit, &[]));
    let mut sessions = vec![ids[..first].to_vec()];
    sessions.extend(ids[first..].chunks(n).map(<[u32]>::to_vec));
    Ok(TaskSchedule {
        base_size: m,
        increment: n,
        sessions,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn sizes(s: &TaskSchedule) -> Vec<usize> {
        s.sessions.iter().map(Vec::len).collect()
    }

    #[test]
    fn b0_inc10_over_100_classes() {
        let ids: Vec<u32> = (0..100).collect();
        let s = split_tasks(&ids, 0, 10, 1993).unwrap();
        assert_eq!(sizes(&s), vec![10; 10]);
    }

    #[test]
    fn b50_inc10_over_100_classes() {
        let ids: Vec<u32> = (0..100).collect();
        let s = split_tasks(&ids, 50, 10, 1993).unwrap();
        assert_eq!(sizes(&s), vec![50, 10, 10, 10, 10, 10]);
    }

    #[test]
    fn remainder_goes_to_last_session() {
        let s = split_tasks(&[0, 1, 2, 3, 4], 0, 2, 1).unwrap();
        assert_eq!(sizes(&s), vec![2, 2, 1]);
    }

    #[test]
    fn degenerate_schedules_are_rejected() {
        let ids: Vec<u32> = (0..5).collect();
        assert!(matches!(split_tasks(&ids, 5, 2, 1), Err(Error::DegenerateSchedule(_))));
        assert!(matches!(split_tasks(&ids, 0, 6, 1), Err(Error::DegenerateSchedule(_))));
        assert!(matches!(split_tasks(&ids, 6, 1, 1), Err(Error::DegenerateSchedule(_))));
        assert!(split_tasks(&ids, 0, 0, 1).is_err());
        // A single full session is allowed when m + n does not overshoot.
        assert_eq!(sizes(&split_tasks(&ids, 0, 5, 1).unwrap()), vec![5]);
    }

    #[test]
    fn different_seeds_give_different_orders() {
        let ids: Vec<u32> = (0..10).collect();
        let collisions = (0..100u64)
            .filter(|&s| {
                split_tasks(&ids, 0, 2, s).unwrap().sessions == split_tasks(&ids, 0, 2, s + 1000).unwrap().sessions
            })
            .count();
        assert!(collisions <= 1, "{collisions} collisions");
    }

    proptest! {
        #[test]
        fn schedule_is_a_partition(
            ids in proptest::collection::btree_set(0u32..500, 2..60),
            n in 1usize..8,
            seed in any::<u64>(),
        ) {
            let ids: Vec<u32> = ids.into_iter().collect();
            let m = if ids.len() > n { ids.len() / 3 } else { 0 };
            let Ok(s) = split_tasks(&ids, m, n, seed) else { return Ok(()); };
            let mut all: Vec<u32> = s.sessions.iter().flatten().copied().collect();
            prop_assert_eq!(all.len(), ids.len());
            all.sort_unstable();
            prop_assert_eq!(&all, &ids);
            prop_assert_eq!(&s, &split_tasks(&ids, m, n, seed).unwrap());
            let mut reversed = ids.clone();
            reversed.reverse();
            prop_assert_eq!(&s, &split_tasks(&reversed, m, n, seed).unwrap());
        }
    }
}

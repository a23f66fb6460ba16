use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use super::{AppObservation, ObservationRecord, UidHash};

/// Anything that belongs to one user at one instant.
pub trait UserRecord {
    fn uid(&self) -> &UidHash;
    fn epoch(&self) -> i64;
}

impl UserRecord for ObservationRecord {
    fn uid(&self) -> &UidHash {
        &self.uid
    }
    fn epoch(&self) -> i64 {
        self.ts.epoch_seconds
    }
}

impl UserRecord for AppObservation {
    fn uid(&self) -> &UidHash {
        &self.uid
    }
    fn epoch(&self) -> i64 {
        self.ts.epoch_seconds
    }
}

/// Group records by user, each group sorted by time with ties kept in input
/// order.
///
/// The result depends only on the input sequence, never on the size of the
/// rayon pool the per-user sorts run on.
pub fn partition_by_user<R>(records: Vec<R>) -> BTreeMap<UidHash, Vec<R>>
where
    R: UserRecord + Send,
{
    let mut groups: HashMap<UidHash, Vec<R>> = HashMap::new();
    for r in records {
        match groups.get_mut(r.uid()) {
            Some(v) => v.push(r),
            None => {
                groups.insert(r.uid().clone(), vec![r]);
            }
        }
    }
    let mut groups: Vec<(UidHash, Vec<R>)> = groups.into_iter().collect();
    groups
        .par_iter_mut()
        .for_each(|(_, v)| v.sort_by_key(|r| r.epoch()));
    groups.into_iter().collect()
}

/// [`partition_by_user`] on a dedicated pool of `threads` workers.
pub fn partition_in_pool<R>(records: Vec<R>, threads: usize) -> BTreeMap<UidHash, Vec<R>>
where
    R: UserRecord + Send,
{
    match rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build() {
        Ok(pool) => pool.install(|| partition_by_user(records)),
        Err(_) => partition_by_user(records),
    }
}

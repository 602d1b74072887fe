use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::AttackLabel;

/// Splits one epoch into class-balanced batches of indices into `labels`.
///
/// Each batch draws `batch_size / K` samples from every one of the `K`
/// attack classes (the remainder goes to a rotating subset of classes). Each
/// class is walked through its own shuffled queue, reshuffled when exhausted,
/// and the epoch lasts until the largest class has been covered once.
pub fn balanced_batches<R: Rng + ?Sized>(
    labels: &[AttackLabel],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let mut by_class: BTreeMap<AttackLabel, Vec<usize>> = BTreeMap::new();
    for (i, &a) in labels.iter().enumerate() {
        by_class.entry(a).or_default().push(i);
    }
    let k = by_class.len();
    if k < 2 {
        return Err(Error::Invalid(format!(
            "balanced batches need at least 2 attack classes, found {k}"
        )));
    }
    if batch_size < 2 * k {
        return Err(Error::Invalid(format!(
            "batch size {batch_size} cannot hold 2 samples of each of {k} classes"
        )));
    }
    if let Some((a, _)) = by_class.iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::Invalid(format!("attack class {} has fewer than 2 samples", a.0)));
    }

    let base = batch_size / k;
    let extra = batch_size % k;
    let n_batches = by_class
        .values()
        .map(|v| v.len().div_ceil(base))
        .max()
        .unwrap_or(0);

    let mut queues: Vec<(Vec<usize>, usize)> = by_class
        .into_values()
        .map(|mut v| {
            v.shuffle(rng);
            (v, 0)
        })
        .collect();

    let mut batches = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut batch = Vec::with_capacity(batch_size);
        for (ci, (queue, cursor)) in queues.iter_mut().enumerate() {
            let quota = base + usize::from((ci + k - b % k) % k < extra);
            let mut taken = Vec::with_capacity(quota);
            while taken.len() < quota {
                if *cursor == queue.len() {
                    queue.shuffle(rng);
                    *cursor = 0;
                }
                let idx = queue[*cursor];
                *cursor += 1;
                if taken.len() < queue.len() && taken.contains(&idx) {
                    // wrapped around mid-batch onto an index already drawn
                    continue;
                }
                taken.push(idx);
            }
            batch.extend(taken);
        }
        batches.push(batch);
    }
    Ok(batches)
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Provenance, Result, SplitPart, TraceDataset, TraceError};

/// Partitions a dataset by request id into `(train, test)`.
///
/// The train fold receives `round_half_up(train_fraction * n_requests)`
/// requests, clamped so both folds are non-empty. Requests are never split
/// and the assignment depends only on the request-id set and `seed`.
pub fn split_dataset(ds: &TraceDataset, train_fraction: f64, seed: u64) -> Result<(TraceDataset, TraceDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(TraceError::Split(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let mut ids = ds.request_ids();
    if ids.len() < 2 {
        return Err(TraceError::Split(format!(
            "need at least 2 requests, dataset has {}",
            ids.len()
        )));
    }
    let n = ids.len();
    let n_train = ((train_fraction * n as f64 + 0.5).floor() as usize).clamp(1, n - 1);
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train_ids = ids[..n_train].to_vec();
    train_ids.sort_unstable();

    let fold = |part: SplitPart| TraceDataset {
        model: ds.model.clone(),
        traces: ds
            .traces
            .iter()
            .filter(|t| (train_ids.binary_search(&t.request_id).is_ok()) == (part == SplitPart::Train))
            .cloned()
            .collect(),
        provenance: Provenance::Split {
            part,
            train_fraction,
            seed,
            parent: Box::new(ds.provenance.clone()),
        },
    };
    Ok((fold(SplitPart::Train), fold(SplitPart::Test)))
}

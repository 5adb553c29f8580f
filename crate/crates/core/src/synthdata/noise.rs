use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Split, SyntheticDataset};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

const SHUFFLE_ATTEMPTS: usize = 64;

/// Which training pairs had their captions swapped and where each caption came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorruptionRecord {
    pub noise_rate: f64,
    /// Corrupted sample indices, ascending.
    pub indices: Vec<usize>,
    /// `sources[k]` is the sample whose original caption now sits at `indices[k]`.
    pub sources: Vec<usize>,
    /// One flag per training pair, in training-split order.
    pub is_noisy: Vec<bool>,
}

impl CorruptionRecord {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn noisy_count(&self) -> usize {
        self.is_noisy.iter().filter(|&&b| b).count()
    }
}

/// Permutation `perm` of `0..ids.len()` with `ids[perm[k]] != ids[k]` for every `k`.
pub(super) fn cross_identity_derangement(ids: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let n = ids.len();
    let mut counts = std::collections::BTreeMap::new();
    ids.iter().for_each(|&i| *counts.entry(i).or_insert(0usize) += 1);
    let largest = counts.values().copied().max().unwrap_or(0);
    if n < 2 || 2 * largest > n {
        return Err(Error::Noise(format!(
            "{n} selected pairs with {largest} from one identity admit no cross-identity derangement"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..SHUFFLE_ATTEMPTS {
        perm.shuffle(rng);
        if (0..n).all(|k| ids[perm[k]] != ids[k]) {
            return Ok(perm);
        }
    }
    // sorted by identity, a cyclic shift by the largest group size never lands in the same group
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.sort_by_key(|&k| ids[k]);
    let mut perm = vec![0; n];
    for pos in 0..n {
        perm[order[pos]] = order[(pos + largest) % n];
    }
    Ok(perm)
}

/// Swaps the captions of `floor(ρ·N)` training pairs among themselves so that every
/// swapped caption describes a different identity. Image labels are left untouched.
pub fn inject_noise(ds: &SyntheticDataset, rho: f64, seed: u64) -> Result<(SyntheticDataset, CorruptionRecord)> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Parameter(format!("noise rate {rho} outside [0, 1)")));
    }
    let train = ds.split_indices(Split::Train);
    let count = (rho * train.len() as f64).floor() as usize;
    if count == 0 {
        return Ok((ds.clone(), CorruptionRecord::default()));
    }
    if ds.corruption.is_some() {
        return Err(Error::Noise("dataset already carries injected noise".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth.noise", &[]));
    let mut chosen: Vec<usize> = train.choose_multiple(&mut rng, count).copied().collect();
    chosen.sort_unstable();
    let ids: Vec<usize> = chosen.iter().map(|&i| ds.samples[i].caption_identity).collect();
    let perm = cross_identity_derangement(&ids, &mut rng)?;

    let mut out = ds.clone();
    let sources: Vec<usize> = perm.iter().map(|&k| chosen[k]).collect();
    for (&dst, &src) in chosen.iter().zip(&sources) {
        out.samples[dst].caption = ds.samples[src].caption.clone();
        out.samples[dst].caption_identity = ds.samples[src].caption_identity;
    }
    let is_noisy = train.iter().map(|i| chosen.binary_search(i).is_ok()).collect();
    let record = CorruptionRecord {
        noise_rate: rho,
        indices: chosen,
        sources,
        is_noisy,
    };
    out.corruption = Some(record.clone());
    Ok((out, record))
}

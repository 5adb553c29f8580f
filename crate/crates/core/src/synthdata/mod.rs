//! Synthetic compositional person-retrieval data with controllable caption noise.
//!
//! Every identity owns one attribute token per slot. Its image prototype is the
//! normalised sum of one codebook vector per attribute, so unseen identities are
//! still describable by seen tokens. Each slot's values sit at the vertices of a
//! regular simplex inside that slot's own block of a random orthonormal basis.
//! Images carry the prototype on `s` random patches and pure background noise elsewhere.

mod augment;
mod io;
mod noise;


use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::losses::identity_labels;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub use augment::{augment_views, text_augment, TextAugment, DEFAULT_SIGMA_AUG};
pub use io::{read_dataset, write_dataset};
pub use noise::{inject_noise, CorruptionRecord};

/// Reserved token that replaces masked caption words.
pub const MASK_TOKEN: usize = 0;
/// Reserved end-of-sequence token appended before encoding.
pub const EOS_TOKEN: usize = 1;
const FIRST_ATTRIBUTE_TOKEN: usize = 2;
const MAX_PROTOTYPE_TRIES: usize = 10_000;
const MAX_PROTOTYPE_COSINE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub samples_per_id: usize,
    pub num_patches: usize,
    pub patch_dim: usize,
    pub d_sig: usize,
    /// Number of patches that carry the identity signal.
    pub signal_patches: usize,
    pub sigma: f64,
    pub sigma_background: f64,
    /// Scale of the projected prototype on signal patches.
    pub signal_gain: f64,
    /// Magnitude of a shared offset added to every signal patch.
    pub foreground_offset: f64,
    pub attribute_slots: usize,
    pub attribute_values: usize,
    pub filler_per_caption: usize,
    pub vocab: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_identities: 32,
            samples_per_id: 8,
            num_patches: 16,
            patch_dim: 12,
            d_sig: 12,
            signal_patches: 6,
            sigma: 0.1,
            sigma_background: 1.0,
            signal_gain: 3.0,
            foreground_offset: 3.0,
            attribute_slots: 4,
            attribute_values: 4,
            filler_per_caption: 4,
            vocab: 64,
            train_fraction: 0.7,
            val_fraction: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_identities < 2 {
            return bad("need at least 2 identities");
        }
        if self.samples_per_id == 0 {
            return bad("samples_per_id must be positive");
        }
        if self.signal_patches == 0 || self.signal_patches > self.num_patches {
            return bad("signal_patches must lie in 1..=num_patches");
        }
        if self.d_sig == 0 || self.d_sig > self.patch_dim {
            return bad("d_sig must lie in 1..=patch_dim");
        }
        if self.attribute_slots == 0 || self.attribute_values < 2 {
            return bad("need at least one attribute slot with two or more values");
        }
        if self.attribute_slots * (self.attribute_values - 1) > self.d_sig {
            return bad("attribute simplices do not fit in d_sig dimensions");
        }
        if self.filler_start() >= self.vocab {
            return bad("vocabulary leaves no room for filler tokens");
        }
        for v in [self.sigma, self.sigma_background, self.signal_gain, self.foreground_offset] {
            if !(v.is_finite() && v >= 0.0) {
                return bad("noise scales and gains must be finite and non-negative");
            }
        }
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&v) || t + v > 1.0 + 1e-12 {
            return bad("split fractions must be in [0,1] and sum to at most 1");
        }
        Ok(())
    }

    fn filler_start(&self) -> usize {
        FIRST_ATTRIBUTE_TOKEN + self.attribute_slots * self.attribute_values
    }

    /// Token id of attribute `value` in `slot`.
    pub fn attribute_token(&self, slot: usize, value: usize) -> usize {
        FIRST_ATTRIBUTE_TOKEN + slot * self.attribute_values + value
    }

    pub fn is_attribute_token(&self, token: usize) -> bool {
        (FIRST_ATTRIBUTE_TOKEN..self.filler_start()).contains(&token)
    }

    pub fn is_filler_token(&self, token: usize) -> bool {
        (self.filler_start()..self.vocab).contains(&token)
    }

    /// Longest caption produced, excluding the end-of-sequence token.
    pub fn caption_len(&self) -> usize {
        self.attribute_slots + self.filler_per_caption
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    pub id: usize,
    /// Unit vector of length `d_sig`.
    pub prototype: Vec<f64>,
    /// One attribute token per slot.
    pub attributes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    /// `P×d_patch`.
    pub patches: Tensor,
    /// Sorted indices of the patches that carry the prototype.
    pub signal_mask: Vec<usize>,
    pub identity: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One image-caption pair. `image.identity` is the label and is never altered by noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: SyntheticImage,
    pub caption: Vec<usize>,
    /// Identity the caption actually describes.
    pub caption_identity: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub config: SynthConfig,
    pub seed: u64,
    pub identities: Vec<Identity>,
    pub samples: Vec<Sample>,
    /// Set once noise with a positive rate has been injected.
    pub corruption: Option<CorruptionRecord>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of the samples in `split`, ascending.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    /// Identity ids whose samples fall in `split`, ascending.
    pub fn split_identities(&self, split: Split) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.image.identity)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// `y_{ij} = 1` iff samples `i` and `j` share an image identity.
    pub fn labels(&self) -> Tensor {
        let ids: Vec<usize> = self.samples.iter().map(|s| s.image.identity).collect();
        identity_labels(&ids)
    }
}

fn gaussian_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Random matrix with orthonormal columns, `patch_dim × d_sig`, via Gram-Schmidt.
fn orthonormal_projection<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v = gaussian_vec(rng, rows, 1.0);
        for b in &basis {
            let d = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
            normalize(&mut v);
            basis.push(v);
        }
    }
    basis
}

/// Vertices of a regular simplex with `n` points, as coordinates in `n − 1` dimensions.
fn simplex(n: usize) -> Vec<Vec<f64>> {
    let centred: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j)) - 1.0 / n as f64).collect())
        .collect();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n - 1);
    for v in &centred {
        let mut u = v.clone();
        for b in &basis {
            let d = dot(&u, b);
            u.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        if dot(&u, &u) > 1e-12 && basis.len() < n - 1 {
            normalize(&mut u);
            basis.push(u);
        }
    }
    centred
        .iter()
        .map(|v| {
            let mut c: Vec<f64> = basis.iter().map(|b| dot(v, b)).collect();
            normalize(&mut c);
            c
        })
        .collect()
}

/// `codebook[slot][value]`, unit vectors in `d_sig` dimensions.
fn simplex_codebook<R: Rng>(rng: &mut R, config: &SynthConfig) -> Vec<Vec<Vec<f64>>> {
    let basis = orthonormal_projection(rng, config.d_sig, config.d_sig);
    let vertices = simplex(config.attribute_values);
    let block = config.attribute_values - 1;
    (0..config.attribute_slots)
        .map(|slot| {
            vertices
                .iter()
                .map(|c| {
                    let mut v = vec![0.0; config.d_sig];
                    for (j, &cj) in c.iter().enumerate() {
                        v.iter_mut().zip(&basis[slot * block + j]).for_each(|(x, b)| *x += cj * b);
                    }
                    v
                })
                .collect()
        })
        .collect()
}

fn sample_identities(config: &SynthConfig, seed: u64) -> Result<Vec<Identity>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth.identities", &[]));
    let codebook = simplex_codebook(&mut rng, config);
    let mut identities: Vec<Identity> = Vec::with_capacity(config.n_identities);
    let mut failures = 0;
    while identities.len() < config.n_identities {
        let values: Vec<usize> = (0..config.attribute_slots)
            .map(|_| rng.gen_range(0..config.attribute_values))
            .collect();
        let mut proto = vec![0.0; config.d_sig];
        for (slot, &v) in values.iter().enumerate() {
            proto.iter_mut().zip(&codebook[slot][v]).for_each(|(p, c)| *p += c);
        }
        normalize(&mut proto);
        let clash = identities
            .iter()
            .any(|other| dot(&other.prototype, &proto) >= MAX_PROTOTYPE_COSINE);
        if clash {
            failures += 1;
            if failures >= MAX_PROTOTYPE_TRIES {
                return Err(Error::Config(format!(
                    "could not place {} identities with pairwise cosine < {MAX_PROTOTYPE_COSINE} in {} dimensions",
                    config.n_identities, config.d_sig
                )));
            }
            continue;
        }
        identities.push(Identity {
            id: identities.len(),
            prototype: proto,
            attributes: values
                .iter()
                .enumerate()
                .map(|(slot, &v)| config.attribute_token(slot, v))
                .collect(),
        });
    }
    Ok(identities)
}

fn assign_splits(config: &SynthConfig, seed: u64) -> Vec<Split> {
    let n = config.n_identities;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth.split", &[])));
    let n_train = (config.train_fraction * n as f64).round() as usize;
    let n_val = ((config.val_fraction * n as f64).round() as usize).min(n - n_train);
    let mut splits = vec![Split::Test; n];
    for (rank, &id) in order.iter().enumerate() {
        splits[id] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Builds a deterministic dataset of `n_identities × samples_per_id` pairs.
pub fn generate_dataset(config: &SynthConfig, seed: u64) -> Result<SyntheticDataset> {
    config.validate()?;
    let identities = sample_identities(config, seed)?;
    let splits = assign_splits(config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth.projection", &[]));
    let projection = orthonormal_projection(&mut rng, config.patch_dim, config.d_sig);
    let mut offset = gaussian_vec(&mut rng, config.patch_dim, 1.0);
    normalize(&mut offset);
    offset.iter_mut().for_each(|x| *x *= config.foreground_offset);

    let fillers: Vec<usize> = (config.filler_start()..config.vocab).collect();
    let mut samples = Vec::with_capacity(config.n_identities * config.samples_per_id);
    for identity in &identities {
        // signal direction in patch space
        let mut signal = offset.clone();
        for (k, column) in projection.iter().enumerate() {
            let c = config.signal_gain * identity.prototype[k];
            signal.iter_mut().zip(column).for_each(|(s, b)| *s += c * b);
        }
        for j in 0..config.samples_per_id {
            let index = identity.id * config.samples_per_id + j;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth.sample", &[index as u64]));
            let mut signal_mask: Vec<usize> = (0..config.num_patches).collect();
            signal_mask.shuffle(&mut rng);
            signal_mask.truncate(config.signal_patches);
            signal_mask.sort_unstable();

            let mut patches = Tensor::zeros(&[config.num_patches, config.patch_dim]);
            for p in 0..config.num_patches {
                let is_signal = signal_mask.binary_search(&p).is_ok();
                let row = patches.row_mut(p);
                if is_signal {
                    let noise = gaussian_vec(&mut rng, config.patch_dim, config.sigma);
                    for ((r, s), n) in row.iter_mut().zip(&signal).zip(noise) {
                        *r = s + n;
                    }
                } else {
                    row.copy_from_slice(&gaussian_vec(&mut rng, config.patch_dim, config.sigma_background));
                }
            }

            let mut caption = identity.attributes.clone();
            for _ in 0..config.filler_per_caption {
                caption.push(*fillers.choose(&mut rng).expect("filler vocabulary is nonempty"));
            }
            caption.shuffle(&mut rng);
            samples.push(Sample {
                image: SyntheticImage {
                    patches,
                    signal_mask,
                    identity: identity.id,
                },
                caption,
                caption_identity: identity.id,
                split: splits[identity.id],
            });
        }
    }
    Ok(SyntheticDataset {
        config: config.clone(),
        seed,
        identities,
        samples,
        corruption: None,
    })
}

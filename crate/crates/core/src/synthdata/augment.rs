use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{SynthConfig, SyntheticImage, FIRST_ATTRIBUTE_TOKEN, MASK_TOKEN};
use crate::error::{Error, Result};

pub const DEFAULT_SIGMA_AUG: f64 = 0.05;

/// Two independently jittered copies of `img`. Signal metadata carries over unchanged.
pub fn augment_views(img: &SyntheticImage, seed: u64, sigma_aug: f64) -> Result<(SyntheticImage, SyntheticImage)> {
    if !(sigma_aug.is_finite() && sigma_aug >= 0.0) {
        return Err(Error::Parameter(format!("augmentation scale {sigma_aug}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |img: &SyntheticImage| {
        let mut out = img.clone();
        if sigma_aug > 0.0 {
            for v in out.patches.data_mut() {
                *v += sigma_aug * rng.sample::<f64, _>(StandardNormal);
            }
        }
        out
    };
    let a = jitter(img);
    let b = jitter(img);
    Ok((a, b))
}

/// Per-token masking, replacement and removal probabilities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextAugment {
    pub p_mask: f64,
    pub p_replace: f64,
    pub p_remove: f64,
}

impl Default for TextAugment {
    fn default() -> Self {
        Self {
            p_mask: 0.1,
            p_replace: 0.05,
            p_remove: 0.05,
        }
    }
}

impl TextAugment {
    pub const NONE: TextAugment = TextAugment {
        p_mask: 0.0,
        p_replace: 0.0,
        p_remove: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_mask, self.p_replace, self.p_remove];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || ps.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::Parameter(format!(
                "text augmentation probabilities {ps:?} must lie in [0,1] and sum to at most 1"
            )));
        }
        Ok(())
    }
}

/// Applies one independent action per token. Attribute tokens survive a removal draw
/// with probability 0.5, and a caption never shrinks below one token.
pub fn text_augment(tokens: &[usize], seed: u64, probs: &TextAugment, config: &SynthConfig) -> Result<Vec<usize>> {
    probs.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let u: f64 = rng.gen();
        if u < probs.p_mask {
            out.push(MASK_TOKEN);
        } else if u < probs.p_mask + probs.p_replace {
            out.push(rng.gen_range(FIRST_ATTRIBUTE_TOKEN..config.vocab));
        } else if u < probs.p_mask + probs.p_replace + probs.p_remove {
            if config.is_attribute_token(t) && rng.gen_bool(0.5) {
                out.push(t);
            }
        } else {
            out.push(t);
        }
    }
    if out.is_empty() {
        if let Some(&first) = tokens.first() {
            out.push(first);
        }
    }
    Ok(out)
}

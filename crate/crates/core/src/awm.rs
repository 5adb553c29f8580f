//! Attention-weighted selective masking and the self-supervised losses that accompany it.
//!
//! Patch relevance is the CLS-query attention averaged over every layer and head of a
//! forward pass on the complete image. The lowest-relevance patches are dropped.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;

use crate::encoders::AttentionTrace;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Default temperature of the image-text contrastive term.
pub const DEFAULT_ITC_TAU: f64 = 0.07;
/// Default temperature of the NT-Xent term.
pub const DEFAULT_SIMCLR_TAU: f64 = 0.1;

/// Averaged CLS attention per patch (CLS itself excluded).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRelevance {
    pub weights: Vec<f64>,
    pub layers: usize,
    pub heads: usize,
}

/// Patches that survive masking. Ties in relevance keep the lower patch index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    /// Sorted ascending.
    pub keep: Vec<usize>,
    pub num_patches: usize,
    /// Mask ratio in thousandths, kept integral so plans compare exactly.
    pub ratio_milli: u32,
}

impl MaskPlan {
    pub fn ratio(&self) -> f64 {
        f64::from(self.ratio_milli) / 1000.0
    }

    pub fn is_kept(&self, patch: usize) -> bool {
        self.keep.binary_search(&patch).is_ok()
    }
}

/// Mean over layers and heads of the CLS attention row, read at each patch position.
pub fn attention_weights(trace: &AttentionTrace) -> Result<PatchRelevance> {
    if !trace.is_complete() {
        return Err(Error::TraceProvenance {
            tokens: trace.tokens(),
            expected: 1 + trace.num_patches,
        });
    }
    let (layers, heads) = (trace.layers(), trace.heads());
    if layers == 0 || heads == 0 {
        return Err(Error::Parameter("attention trace has no layers or heads".into()));
    }
    let mut weights = vec![0.0; trace.num_patches];
    for layer in &trace.weights {
        if layer.len() != heads {
            return Err(Error::Parameter("ragged attention trace".into()));
        }
        for row in layer {
            if row.len() != trace.tokens() {
                return Err(Error::Parameter("attention row length differs from token count".into()));
            }
            // position 0 is the CLS key; token s+1 carries patch kept[s]
            for (slot, &patch) in trace.kept.iter().enumerate() {
                weights[patch] += row[slot + 1];
            }
        }
    }
    let norm = (layers * heads) as f64;
    weights.iter_mut().for_each(|w| *w /= norm);
    Ok(PatchRelevance {
        weights,
        layers,
        heads,
    })
}

fn ratio_milli(ratio: f64) -> Result<u32> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Parameter(format!("mask ratio {ratio} outside (0, 1)")));
    }
    Ok((ratio * 1000.0).round() as u32)
}

/// Number of patches dropped at `ratio`: `floor(ratio · P)`.
pub fn drop_count(num_patches: usize, ratio: f64) -> usize {
    (ratio * num_patches as f64).floor() as usize
}

/// Keeps the `P − floor(ratio·P)` most relevant patches.
pub fn select_mask(rel: &PatchRelevance, ratio: f64) -> Result<MaskPlan> {
    let milli = ratio_milli(ratio)?;
    let p = rel.weights.len();
    let keep_n = p - drop_count(p, ratio);
    if keep_n == 0 {
        return Err(Error::Mask(format!("ratio {ratio} would drop all {p} patches")));
    }
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        rel.weights[b]
            .total_cmp(&rel.weights[a])
            .then_with(|| a.cmp(&b))
    });
    let mut keep = order[..keep_n].to_vec();
    keep.sort_unstable();
    Ok(MaskPlan {
        keep,
        num_patches: p,
        ratio_milli: milli,
    })
}

/// Uniformly random keep-set of the same size `select_mask` would produce.
pub fn random_mask<R: Rng>(num_patches: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    let milli = ratio_milli(ratio)?;
    let keep_n = num_patches - drop_count(num_patches, ratio);
    if keep_n == 0 {
        return Err(Error::Mask(format!("ratio {ratio} would drop all {num_patches} patches")));
    }
    let mut keep = sample(rng, num_patches, keep_n).into_vec();
    keep.sort_unstable();
    Ok(MaskPlan {
        keep,
        num_patches,
        ratio_milli: milli,
    })
}

fn require_batch(tape: &Tape, a: Var, b: Var, what: &str) -> Result<usize> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 2 || sa != sb {
        return Err(Error::Shape {
            op: "ssl_loss",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    if sa[0] < 2 {
        return Err(Error::Batch(format!("{what} needs at least 2 pairs, got {}", sa[0])));
    }
    Ok(sa[0])
}

/// `−Σ_i log_softmax(logits/τ)[i, target_i] / rows`.
fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize], temperature: f64) -> Result<Var> {
    let cols = tape.shape(logits)[1];
    let rows = targets.len();
    let mut pick = Tensor::zeros(&[rows, cols]);
    for (i, &t) in targets.iter().enumerate() {
        pick.data_mut()[i * cols + t] = -1.0 / rows as f64;
    }
    let logp = tape.log_softmax_rows(logits, temperature)?;
    let w = tape.constant(pick);
    let picked = tape.mul(logp, w)?;
    Ok(tape.sum(picked))
}

/// Symmetric InfoNCE between normalised image and text rows, positives on the diagonal.
pub fn itc_loss(tape: &mut Tape, img: Var, txt: Var, tau: f64) -> Result<Var> {
    let b = require_batch(tape, img, txt, "ITC")?;
    let diag: Vec<usize> = (0..b).collect();
    let i2t = tape.matmul_nt(img, txt)?;
    let t2i = tape.matmul_nt(txt, img)?;
    let a = cross_entropy(tape, i2t, &diag, tau)?;
    let c = cross_entropy(tape, t2i, &diag, tau)?;
    let s = tape.add(a, c)?;
    Ok(tape.scale(s, 0.5))
}

/// NT-Xent over the `2B` views: each view's positive is its partner, self-similarity
/// is excluded from the denominator.
pub fn simclr_loss(tape: &mut Tape, z1: Var, z2: Var, tau: f64) -> Result<Var> {
    let b = require_batch(tape, z1, z2, "SimCLR")?;
    let z = tape.concat_rows(&[z1, z2])?;
    let sims = tape.matmul_nt(z, z)?;
    // a large finite negative keeps 0·logp well defined on the excluded diagonal
    let mut self_mask = Tensor::zeros(&[2 * b, 2 * b]);
    for i in 0..2 * b {
        self_mask.data_mut()[i * 2 * b + i] = -1e9;
    }
    let m = tape.constant(self_mask);
    let logits = tape.add(sims, m)?;
    let targets: Vec<usize> = (0..2 * b).map(|i| (i + b) % (2 * b)).collect();
    cross_entropy(tape, logits, &targets, tau)
}

/// Symmetric `2 − 2·cos` regression of online predictions onto stop-gradient targets.
pub fn byol_loss(tape: &mut Tape, pred1: Var, targ2: Var, pred2: Var, targ1: Var) -> Result<Var> {
    if tape.requires_grad(targ1) || tape.requires_grad(targ2) {
        return Err(Error::Contract("BYOL targets must not carry gradient".into()));
    }
    let b = require_batch(tape, pred1, targ2, "BYOL")?;
    require_batch(tape, pred2, targ1, "BYOL")?;
    let mut cos_total = None;
    for (p, t) in [(pred1, targ2), (pred2, targ1)] {
        let pn = tape.l2_normalize_rows(p)?;
        let tn = tape.l2_normalize_rows(t)?;
        let prod = tape.mul(pn, tn)?;
        let s = tape.sum(prod);
        cos_total = Some(match cos_total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let cos_total = cos_total.expect("two directions");
    // mean over B pairs and both directions of (2 − 2cos)
    Ok(tape.affine(cos_total, -2.0 / (2 * b) as f64, 2.0))
}

/// `L_ITC + L_SimCLR + L_BYOL`, unweighted.
pub fn awm_total(tape: &mut Tape, itc: Var, simclr: Var, byol: Var) -> Result<Var> {
    for (name, v) in [("itc", itc), ("simclr", simclr), ("byol", byol)] {
        let x = tape.value(v).item()?;
        if !x.is_finite() {
            return Err(Error::NumericGuard(format!("{name} term is {x}")));
        }
    }
    let s = tape.add(itc, simclr)?;
    tape.add(s, byol)
}

/// Writes `sample_id,patch_index,weight,kept` rows for offline inspection.
pub fn write_relevance_csv(path: &Path, rows: &[(usize, &PatchRelevance, &MaskPlan)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "patch_index", "weight", "kept"])?;
    for (sample, rel, plan) in rows {
        for (p, weight) in rel.weights.iter().enumerate() {
            w.write_record([
                sample.to_string(),
                p.to_string(),
                format!("{weight:.17e}"),
                u8::from(plan.is_kept(p)).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

//! Cross-modal matching losses over a batch of image/text global features.
//!
//! All losses consume the softmax matching distribution `p` over cosine similarities
//! and, where labels matter, the label distribution `q` built from identity equality.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Similarity temperature used by the matching losses.
pub const DEFAULT_TAU: f64 = 0.02;
/// Additive guard on `q` inside the KL ratios.
pub const DEFAULT_EPSILON: f64 = 1e-8;
/// Floor applied to log arguments in the focal loss.
pub const LOG_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

/// Aligned image/text features with identity labels.
///
/// `img` and `txt` are `N×d` rows on a tape and are expected to be L2-normalised.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub img: Var,
    pub txt: Var,
    pub identity_ids: Vec<usize>,
    /// `y[i][j] = 1` iff image `i` and text `j` carry the same identity label.
    pub labels: Tensor,
    pub tau: f64,
    pub epsilon: f64,
}

impl PairBatch {
    pub fn new(img: Var, txt: Var, identity_ids: Vec<usize>, tau: f64, epsilon: f64) -> Self {
        let labels = identity_labels(&identity_ids);
        Self {
            img,
            txt,
            identity_ids,
            labels,
            tau,
            epsilon,
        }
    }

    pub fn len(&self) -> usize {
        self.identity_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identity_ids.is_empty()
    }

    fn oriented_labels(&self, dir: Direction) -> Result<Tensor> {
        match dir {
            Direction::ImageToText => Ok(self.labels.clone()),
            Direction::TextToImage => self.labels.transpose(),
        }
    }
}

/// Binary `N×N` matrix marking pairs that share an identity.
pub fn identity_labels(ids: &[usize]) -> Tensor {
    let n = ids.len();
    let mut y = Tensor::zeros(&[n, n]);
    for (i, a) in ids.iter().enumerate() {
        for (j, b) in ids.iter().enumerate() {
            if a == b {
                y.data_mut()[i * n + j] = 1.0;
            }
        }
    }
    y
}

/// Focal weights: `alpha` on positives, `beta` on negatives, focusing exponent `gamma`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WafParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for WafParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.05,
            gamma: 2.0,
        }
    }
}

impl WafParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.gamma >= 0.0) {
            return Err(Error::Parameter(format!("invalid focal weights {self:?}")));
        }
        Ok(())
    }
}

/// Cosine similarity matrix in the given direction: rows are images for image-to-text
/// and captions for text-to-image.
pub fn match_logits(tape: &mut Tape, batch: &PairBatch, dir: Direction) -> Result<Var> {
    if !(batch.tau > 0.0) {
        return Err(Error::Parameter(format!("tau must be positive, got {}", batch.tau)));
    }
    let (a, b) = match dir {
        Direction::ImageToText => (batch.img, batch.txt),
        Direction::TextToImage => (batch.txt, batch.img),
    };
    let sims = tape.matmul_nt(a, b)?;
    if tape.shape(sims) != [batch.len(), batch.len()] {
        return Err(Error::Shape {
            op: "match_probs",
            lhs: tape.shape(sims).to_vec(),
            rhs: vec![batch.len(), batch.len()],
        });
    }
    Ok(sims)
}

/// Row-softmax of cosine similarities at temperature `tau`.
pub fn match_probs(tape: &mut Tape, batch: &PairBatch, dir: Direction) -> Result<Var> {
    let sims = match_logits(tape, batch, dir)?;
    tape.softmax_rows(sims, batch.tau)
}

/// `q_ij = y_ij / Σ_k y_ik` in the given direction.
pub fn true_probs(batch: &PairBatch, dir: Direction) -> Result<Tensor> {
    let mut q = batch.oriented_labels(dir)?;
    let n = q.cols();
    for (i, row) in q.data_mut().chunks_mut(n).enumerate() {
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            return Err(Error::Label(format!("row {i} of the label matrix has no positive")));
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(q)
}

/// `(1/N) Σ_ij p·ln(p/(q+ε))`, plus `q·ln((q+ε)/p)` when `reverse` is set.
fn distribution_matching(
    tape: &mut Tape,
    p: Var,
    q: &Tensor,
    epsilon: f64,
    reverse: bool,
) -> Result<Var> {
    let n = q.rows() as f64;
    if let Some(pos) = tape.value(p).data().iter().position(|&v| v == 0.0 || !v.is_finite()) {
        return Err(Error::NumericGuard(format!(
            "matching probability at cell {pos} is {}; inputs were not finite",
            tape.value(p).data()[pos]
        )));
    }
    let log_q_eps = Tensor::new(
        q.shape().to_vec(),
        q.data().iter().map(|v| (v + epsilon).ln()).collect(),
    )?;
    let log_p = tape.ln(p);
    let lq = tape.constant(log_q_eps.clone());
    let diff = tape.sub(log_p, lq)?;
    let forward = tape.mul(p, diff)?;
    let total = if reverse {
        // q·ln(q+ε) − q·ln p
        let qv = tape.constant(q.clone());
        let rev = tape.sub(lq, log_p)?;
        let rev = tape.mul(qv, rev)?;
        tape.add(forward, rev)?
    } else {
        forward
    };
    let s = tape.sum(total);
    Ok(tape.scale(s, 1.0 / n))
}

fn matching_loss(tape: &mut Tape, batch: &PairBatch, reverse: bool) -> Result<Var> {
    if !(batch.epsilon > 0.0) {
        return Err(Error::Parameter(format!("epsilon must be positive, got {}", batch.epsilon)));
    }
    let mut parts = Vec::with_capacity(2);
    for dir in [Direction::ImageToText, Direction::TextToImage] {
        let p = match_probs(tape, batch, dir)?;
        let q = true_probs(batch, dir)?;
        parts.push(distribution_matching(tape, p, &q, batch.epsilon, reverse)?);
    }
    tape.add(parts[0], parts[1])
}

/// Forward-only similarity distribution matching, summed over both directions.
pub fn sdm_loss(tape: &mut Tape, batch: &PairBatch) -> Result<Var> {
    matching_loss(tape, batch, false)
}

/// Bidirectional similarity distribution matching: `KL(p‖q) + KL(q‖p)` per direction,
/// with `ε` added to `q` in both ratios, summed over image-to-text and text-to-image.
pub fn bsdm_loss(tape: &mut Tape, batch: &PairBatch) -> Result<Var> {
    matching_loss(tape, batch, true)
}

/// Per-cell focal terms on the matching probabilities, averaged over the `N²` cells and
/// summed over both directions.
pub fn waf_loss(tape: &mut Tape, batch: &PairBatch, params: &WafParams) -> Result<Var> {
    params.validate()?;
    let n2 = (batch.len() * batch.len()) as f64;
    let mut parts = Vec::with_capacity(2);
    for dir in [Direction::ImageToText, Direction::TextToImage] {
        let sims = match_logits(tape, batch, dir)?;
        let p = tape.softmax_rows(sims, batch.tau)?;
        let y = batch.oriented_labels(dir)?;
        let pos_w = Tensor::new(
            y.shape().to_vec(),
            y.data().iter().map(|&v| -params.alpha * v).collect(),
        )?;
        let neg_w = Tensor::new(
            y.shape().to_vec(),
            y.data().iter().map(|&v| -params.beta * (1.0 - v)).collect(),
        )?;
        let one_minus_p = tape.affine(p, -1.0, 1.0);
        // −α(1−p)^γ ln p on positives
        let focus_pos = tape.powf(one_minus_p, params.gamma);
        let log_p = tape.ln_floor(p, LOG_FLOOR);
        let pos = tape.mul(focus_pos, log_p)?;
        let pw = tape.constant(pos_w);
        let pos = tape.mul(pos, pw)?;
        // −β p^γ ln(1−p) on negatives
        let focus_neg = tape.powf(p, params.gamma);
        let log_1mp = tape.log1m_softmax_rows(sims, batch.tau, LOG_FLOOR)?;
        let neg = tape.mul(focus_neg, log_1mp)?;
        let nw = tape.constant(neg_w);
        let neg = tape.mul(neg, nw)?;
        let cells = tape.add(pos, neg)?;
        let s = tape.sum(cells);
        parts.push(tape.scale(s, 1.0 / n2));
    }
    tape.add(parts[0], parts[1])
}

/// One focal cell evaluated directly; handy for reporting and hand checks.
pub fn waf_cell(p: f64, positive: bool, params: &WafParams) -> f64 {
    if positive {
        -params.alpha * (1.0 - p).powf(params.gamma) * p.max(LOG_FLOOR).ln()
    } else {
        -params.beta * p.powf(params.gamma) * (1.0 - p).max(LOG_FLOOR).ln()
    }
}

/// Mean cross-entropy of `softmax(features · classifier)` against identity labels.
pub fn id_loss(tape: &mut Tape, features: Var, identity_ids: &[usize], classifier: Var) -> Result<Var> {
    let logits = tape.matmul(features, classifier)?;
    let (b, c) = (tape.shape(logits)[0], tape.shape(logits)[1]);
    if identity_ids.len() != b {
        return Err(Error::Shape {
            op: "id_loss",
            lhs: vec![b],
            rhs: vec![identity_ids.len()],
        });
    }
    let mut onehot = Tensor::zeros(&[b, c]);
    for (i, &id) in identity_ids.iter().enumerate() {
        if id >= c {
            return Err(Error::Label(format!("identity {id} outside {c} classifier classes")));
        }
        onehot.data_mut()[i * c + id] = -1.0 / b as f64;
    }
    let logp = tape.log_softmax_rows(logits, 1.0)?;
    let w = tape.constant(onehot);
    let picked = tape.mul(logp, w)?;
    Ok(tape.sum(picked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for _ in 0..n {
            let r: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            rows.push(r.iter().map(|v| v / norm).collect::<Vec<_>>());
        }
        Tensor::from_rows(&rows).unwrap()
    }

    fn batch_on(tape: &mut Tape, img: &Tensor, txt: &Tensor, ids: &[usize], tau: f64) -> PairBatch {
        let i = tape.param(img.clone());
        let t = tape.param(txt.clone());
        PairBatch::new(i, t, ids.to_vec(), tau, DEFAULT_EPSILON)
    }

    fn softmax_oracle(a: &Tensor, b: &Tensor, tau: f64) -> Vec<Vec<f64>> {
        (0..a.rows())
            .map(|i| {
                let logits: Vec<f64> = (0..b.rows())
                    .map(|j| a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum::<f64>() / tau)
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                logits.iter().map(|l| (l - m).exp() / z).collect()
            })
            .collect()
    }

    /// Double-loop evaluation of the forward and reverse KL parts.
    fn kl_oracle(a: &Tensor, b: &Tensor, ids: &[usize], tau: f64, eps: f64) -> (f64, f64) {
        let n = ids.len();
        let (mut fwd, mut rev) = (0.0, 0.0);
        for (x, y) in [(a, b), (b, a)] {
            let p = softmax_oracle(x, y, tau);
            for i in 0..n {
                let positives = ids.iter().filter(|&&k| k == ids[i]).count() as f64;
                for j in 0..n {
                    let q = if ids[i] == ids[j] { 1.0 / positives } else { 0.0 };
                    fwd += p[i][j] * (p[i][j] / (q + eps)).ln() / n as f64;
                    rev += q * ((q + eps) / p[i][j]).ln() / n as f64;
                }
            }
        }
        (fwd, rev)
    }

    #[test]
    fn match_probs_examples() {
        let mut tape = Tape::new();
        let f = unit_rows(1, 4, 1);
        let b = batch_on(&mut tape, &f, &f, &[0], 0.02);
        let p = match_probs(&mut tape, &b, Direction::ImageToText).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0]);

        let same = Tensor::from_rows(&[[0.6, 0.8], [0.6, 0.8]]).unwrap();
        let b = batch_on(&mut tape, &same, &same, &[0, 1], 0.02);
        let p = match_probs(&mut tape, &b, Direction::ImageToText).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5; 4]);

        let (img, txt) = (unit_rows(3, 5, 2), unit_rows(3, 5, 3));
        let b = batch_on(&mut tape, &img, &txt, &[0, 1, 2], 0.02);
        let i2t = match_probs(&mut tape, &b, Direction::ImageToText).unwrap();
        let t2i = match_probs(&mut tape, &b, Direction::TextToImage).unwrap();
        let (oi, ot) = (softmax_oracle(&img, &txt, 0.02), softmax_oracle(&txt, &img, 0.02));
        for i in 0..3 {
            for j in 0..3 {
                assert!((tape.value(i2t).row(i)[j] - oi[i][j]).abs() < 1e-10);
                assert!((tape.value(t2i).row(i)[j] - ot[i][j]).abs() < 1e-10);
            }
        }

        let b = PairBatch { tau: 0.0, ..b };
        assert!(matches!(
            match_probs(&mut tape, &b, Direction::ImageToText),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn true_probs_examples() {
        let mut tape = Tape::new();
        let f = unit_rows(4, 3, 1);
        let b = batch_on(&mut tape, &f, &f, &[0, 1, 2, 3], 0.02);
        assert_eq!(true_probs(&b, Direction::ImageToText).unwrap(), Tensor::identity(4));

        let f = unit_rows(6, 3, 1);
        let b = batch_on(&mut tape, &f, &f, &[0, 1, 1, 2, 2, 2], 0.02);
        let q = true_probs(&b, Direction::ImageToText).unwrap();
        assert_eq!(&q.row(1)[1..3], &[0.5, 0.5]);
        for r in 0..6 {
            assert!((q.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        let mut broken = b.clone();
        broken.labels.row_mut(2).iter_mut().for_each(|v| *v = 0.0);
        assert!(matches!(true_probs(&broken, Direction::ImageToText), Err(Error::Label(_))));
    }

    #[test]
    fn bsdm_matches_double_loop_oracle() {
        for seed in 0..6 {
            let ids = [0usize, 1, 1, 2];
            let (img, txt) = (unit_rows(4, 6, seed), unit_rows(4, 6, seed + 100));
            let mut tape = Tape::new();
            let b = batch_on(&mut tape, &img, &txt, &ids, 0.5);
            let bsdm = { let v = bsdm_loss(&mut tape, &b).unwrap(); tape.value(v).item().unwrap() };
            let sdm = { let v = sdm_loss(&mut tape, &b).unwrap(); tape.value(v).item().unwrap() };
            let (fwd, rev) = kl_oracle(&img, &txt, &ids, 0.5, DEFAULT_EPSILON);
            assert!((bsdm - (fwd + rev)).abs() < 1e-10, "{bsdm} vs {}", fwd + rev);
            assert!((sdm - fwd).abs() < 1e-10);
        }
    }

    #[test]
    fn bsdm_vanishes_on_identical_uniform_distributions() {
        let same = unit_rows(1, 4, 3);
        let rows = Tensor::from_rows(&[same.row(0); 4]).unwrap();
        let mut tape = Tape::new();
        let b = batch_on(&mut tape, &rows, &rows, &[7, 7, 7, 7], 0.02);
        let loss = { let v = bsdm_loss(&mut tape, &b).unwrap(); tape.value(v).item().unwrap() };
        assert!(loss.abs() < 1e-6, "{loss}");

        // shrinking ε moves the loss monotonically towards 0
        let mut prev = f64::INFINITY;
        for eps in [1e-2, 1e-4, 1e-6, 1e-8] {
            let b = PairBatch { epsilon: eps, ..b.clone() };
            let loss = { let v = bsdm_loss(&mut tape, &b).unwrap(); tape.value(v).item().unwrap() };
            assert!(loss.abs() <= prev);
            prev = loss.abs();
        }
    }

    #[test]
    fn sdm_examples() {
        // p = q exactly: every row uniform over a single shared identity
        let same = unit_rows(1, 3, 9);
        let rows = Tensor::from_rows(&[same.row(0); 3]).unwrap();
        let mut tape = Tape::new();
        let b = batch_on(&mut tape, &rows, &rows, &[1, 1, 1], 0.02);
        let loss = { let v = sdm_loss(&mut tape, &b).unwrap(); tape.value(v).item().unwrap() };
        assert!(loss.abs() < 9.0 * DEFAULT_EPSILON);

        // Gibbs bound with ε slack
        for seed in 0..20 {
            let (img, txt) = (unit_rows(5, 4, seed), unit_rows(5, 4, seed + 50));
            let b = batch_on(&mut tape, &img, &txt, &[0, 1, 0, 2, 3], 1.0);
            let loss = { let v = sdm_loss(&mut tape, &b).unwrap(); tape.value(v).item().unwrap() };
            assert!(loss >= -25.0 * DEFAULT_EPSILON);
            let loss = { let v = bsdm_loss(&mut tape, &b).unwrap(); tape.value(v).item().unwrap() };
            assert!(loss >= -4.0 * DEFAULT_EPSILON * 5.0);
        }

        // nearly one-hot p on the wrong column: p·ln(p/ε) ≈ ln(1/ε) per direction
        let img = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let txt = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let b = batch_on(&mut tape, &img, &txt, &[0, 1], 0.02);
        let loss = { let v = sdm_loss(&mut tape, &b).unwrap(); tape.value(v).item().unwrap() };
        let expected = 2.0 * (1.0 / DEFAULT_EPSILON).ln();
        assert!(loss.is_finite());
        assert!((loss - expected).abs() < 0.01, "{loss} vs {expected}");
    }

    #[test]
    fn bsdm_rejects_exact_zero_probabilities() {
        let mut tape = Tape::new();
        let img = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let txt = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        // exp(−1/1e-4) underflows to exactly zero
        let b = batch_on(&mut tape, &img, &txt, &[0, 1], 1e-4);
        assert!(matches!(bsdm_loss(&mut tape, &b), Err(Error::NumericGuard(_))));
        let b = PairBatch { epsilon: 0.0, tau: 0.02, ..b };
        assert!(matches!(bsdm_loss(&mut tape, &b), Err(Error::Parameter(_))));
    }

    #[test]
    fn swapping_modalities_leaves_bsdm_invariant() {
        let ids = [0usize, 1, 1, 2, 3];
        let (img, txt) = (unit_rows(5, 4, 1), unit_rows(5, 4, 2));
        let mut tape = Tape::new();
        let b1 = batch_on(&mut tape, &img, &txt, &ids, 0.1);
        let l1 = bsdm_loss(&mut tape, &b1).unwrap();
        tape.backward(l1).unwrap();
        let (gi1, gt1) = (tape.grad_tensor(b1.img), tape.grad_tensor(b1.txt));

        let mut tape2 = Tape::new();
        let b2 = batch_on(&mut tape2, &txt, &img, &ids, 0.1);
        let l2 = bsdm_loss(&mut tape2, &b2).unwrap();
        tape2.backward(l2).unwrap();
        let v1 = tape.value(l1).item().unwrap();
        let v2 = tape2.value(l2).item().unwrap();
        assert!((v1 - v2).abs() < 1e-12);
        for (a, b) in gi1.data().iter().zip(tape2.grad_tensor(b2.txt).data()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in gt1.data().iter().zip(tape2.grad_tensor(b2.img).data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn waf_cell_values() {
        let params = WafParams::default();
        assert_eq!(waf_cell(1.0, true, &params), 0.0);
        assert_eq!(waf_cell(0.0, false, &params), 0.0);
        let v = waf_cell(0.5, true, &params);
        assert!((v - 0.1 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((v - 0.017329).abs() < 1e-6);
    }

    #[test]
    fn waf_matches_cell_sum() {
        let params = WafParams::default();
        let ids = [0usize, 1, 1, 2];
        let (img, txt) = (unit_rows(4, 5, 4), unit_rows(4, 5, 5));
        let mut tape = Tape::new();
        let b = batch_on(&mut tape, &img, &txt, &ids, 0.3);
        let loss = { let v = waf_loss(&mut tape, &b, &params).unwrap(); tape.value(v).item().unwrap() };
        let mut expected = 0.0;
        for (x, y) in [(&img, &txt), (&txt, &img)] {
            let p = softmax_oracle(x, y, 0.3);
            for i in 0..4 {
                for j in 0..4 {
                    expected += waf_cell(p[i][j], ids[i] == ids[j], &params) / 16.0;
                }
            }
        }
        assert!((loss - expected).abs() < 1e-12);
        let bad = WafParams { alpha: 0.0, ..params };
        assert!(waf_loss(&mut tape, &b, &bad).is_err());
    }

    #[test]
    fn waf_cells_are_monotone_in_p() {
        let params = WafParams::default();
        let h = 1e-6;
        for k in 1..100 {
            let p = k as f64 / 100.0;
            let dpos = (waf_cell(p + h, true, &params) - waf_cell(p - h, true, &params)) / (2.0 * h);
            let dneg = (waf_cell(p + h, false, &params) - waf_cell(p - h, false, &params)) / (2.0 * h);
            assert!(dpos <= 0.0, "positive cell increases at p={p}");
            assert!(dneg >= 0.0, "negative cell decreases at p={p}");
        }
    }

    fn ce_oracle(feats: &Tensor, cls: &Tensor, ids: &[usize]) -> f64 {
        let mut total = 0.0;
        for (i, &id) in ids.iter().enumerate() {
            let logits: Vec<f64> = (0..cls.cols())
                .map(|c| (0..cls.rows()).map(|k| feats.row(i)[k] * cls.row(k)[c]).sum())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            total += lse - logits[id];
        }
        total / ids.len() as f64
    }

    #[test]
    fn id_loss_examples() {
        let mut tape = Tape::new();
        let f = tape.constant(unit_rows(3, 4, 1));
        let w = tape.constant(Tensor::zeros(&[4, 5]));
        let l = id_loss(&mut tape, f, &[0, 3, 4], w).unwrap();
        assert!((tape.value(l).item().unwrap() - 5f64.ln()).abs() < 1e-12);

        let eye = tape.constant(Tensor::identity(3));
        let mut prev = f64::INFINITY;
        for scale in [1.0, 10.0, 100.0] {
            let w = tape.constant(Tensor::identity(3));
            let w = tape.scale(w, scale);
            let l = { let v = id_loss(&mut tape, eye, &[0, 1, 2], w).unwrap(); tape.value(v).item().unwrap() };
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-40);

        let feats = unit_rows(4, 6, 8);
        let cls = unit_rows(6, 3, 9);
        let (fv, cv) = (tape.constant(feats.clone()), tape.constant(cls.clone()));
        let l = { let v = id_loss(&mut tape, fv, &[2, 0, 1, 2], cv).unwrap(); tape.value(v).item().unwrap() };
        assert!((l - ce_oracle(&feats, &cls, &[2, 0, 1, 2])).abs() < 1e-10);

        assert!(matches!(id_loss(&mut tape, fv, &[0, 1, 3, 0], cv), Err(Error::Label(_))));
    }

    #[test]
    fn losses_pass_grad_check() {
        let ids = [0usize, 1, 0, 2, 1, 3];
        for seed in 0..3 {
            let txt = unit_rows(6, 4, seed + 10);
            let raw = unit_rows(6, 4, seed);
            let check = |which: u8| {
                grad_check(
                    |t, x| {
                        let img = t.l2_normalize_rows(x)?;
                        let tv = t.constant(txt.clone());
                        let b = PairBatch::new(img, tv, ids.to_vec(), 0.5, DEFAULT_EPSILON);
                        match which {
                            0 => sdm_loss(t, &b),
                            1 => bsdm_loss(t, &b),
                            _ => waf_loss(t, &b, &WafParams::default()),
                        }
                    },
                    &raw,
                    1e-5,
                )
                .unwrap()
            };
            for which in 0..3 {
                let err = check(which);
                assert!(err < 1e-4, "loss {which} seed {seed}: {err}");
            }
        }
    }
}

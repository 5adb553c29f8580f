//! Retrieval metrics: Rank-K, mAP and mINP.
//!
//! Galleries are ranked by descending similarity with ties broken by ascending gallery
//! index. `INP_i = |G_i| / R_i`, where `R_i` is the rank of the last relevant item.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RetrievalSummary {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub minp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    /// Per query, gallery indices from best to worst.
    pub rankings: Vec<Vec<usize>>,
    /// Per query, relevance of each gallery item in original order.
    pub relevance: Vec<Vec<bool>>,
    pub average_precision: Vec<f64>,
    pub inverse_negative_penalty: Vec<f64>,
    pub summary: RetrievalSummary,
}

fn check_relevance(relevance: &[Vec<bool>], queries: usize, gallery: usize) -> Result<()> {
    if relevance.len() != queries {
        return Err(Error::Shape {
            op: "rank_and_score",
            lhs: vec![queries, gallery],
            rhs: vec![relevance.len(), relevance.first().map_or(0, Vec::len)],
        });
    }
    for (q, row) in relevance.iter().enumerate() {
        if row.len() != gallery {
            return Err(Error::Shape {
                op: "rank_and_score",
                lhs: vec![queries, gallery],
                rhs: vec![q, row.len()],
            });
        }
        if !row.iter().any(|&r| r) {
            return Err(Error::Protocol(format!("query {q} has no relevant gallery item")));
        }
    }
    Ok(())
}

/// Ranks `gallery` rows for each `queries` row by dot product and scores the rankings.
///
/// Features are expected to be L2-normalised so the dot product is the cosine.
pub fn rank_and_score(queries: &Tensor, gallery: &Tensor, relevance: &[Vec<bool>]) -> Result<RetrievalResult> {
    let sims = queries.matmul(&gallery.transpose()?)?;
    let (q, g) = (sims.rows(), sims.cols());
    check_relevance(relevance, q, g)?;

    let mut rankings = Vec::with_capacity(q);
    let mut aps = Vec::with_capacity(q);
    let mut inps = Vec::with_capacity(q);
    let mut hits = [0usize; 3];
    for (i, rel) in relevance.iter().enumerate() {
        let row = sims.row(i);
        let mut order: Vec<usize> = (0..g).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));

        let positives = rel.iter().filter(|&&r| r).count();
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = usize::MAX;
        let mut last_hit = 0usize;
        for (pos, &item) in order.iter().enumerate() {
            if rel[item] {
                found += 1;
                precision_sum += found as f64 / (pos + 1) as f64;
                first_hit = first_hit.min(pos + 1);
                last_hit = pos + 1;
            }
        }
        for (h, k) in hits.iter_mut().zip([1, 5, 10]) {
            if first_hit <= k {
                *h += 1;
            }
        }
        aps.push(precision_sum / positives as f64);
        inps.push(positives as f64 / last_hit as f64);
        rankings.push(order);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let summary = RetrievalSummary {
        rank1: hits[0] as f64 / q as f64,
        rank5: hits[1] as f64 / q as f64,
        rank10: hits[2] as f64 / q as f64,
        map: mean(&aps),
        minp: mean(&inps),
    };
    Ok(RetrievalResult {
        rankings,
        relevance: relevance.to_vec(),
        average_precision: aps,
        inverse_negative_penalty: inps,
        summary,
    })
}

/// Reference scorer over a precomputed similarity matrix.
///
/// Each relevant item's rank is obtained by counting the gallery items that beat it,
/// so no sorting is shared with [`rank_and_score`].
pub fn oracle_score(sims: &[Vec<f64>], relevance: &[Vec<bool>]) -> Result<RetrievalSummary> {
    let q = sims.len();
    let g = sims.first().map_or(0, Vec::len);
    check_relevance(relevance, q, g)?;
    let mut total = RetrievalSummary::default();
    for (s, rel) in sims.iter().zip(relevance) {
        let beats = |a: usize, b: usize| s[a] > s[b] || (s[a] == s[b] && a < b);
        let rank_of = |j: usize| 1 + (0..g).filter(|&k| k != j && beats(k, j)).count();
        let mut ranks: Vec<usize> = (0..g).filter(|&j| rel[j]).map(rank_of).collect();
        ranks.sort_unstable();
        let best = ranks[0];
        let worst = *ranks.last().expect("nonempty");
        total.rank1 += f64::from(u8::from(best <= 1));
        total.rank5 += f64::from(u8::from(best <= 5));
        total.rank10 += f64::from(u8::from(best <= 10));
        let ap: f64 = ranks
            .iter()
            .enumerate()
            .map(|(k, &r)| (k + 1) as f64 / r as f64)
            .sum::<f64>()
            / ranks.len() as f64;
        total.map += ap;
        total.minp += ranks.len() as f64 / worst as f64;
    }
    let n = q as f64;
    Ok(RetrievalSummary {
        rank1: total.rank1 / n,
        rank5: total.rank5 / n,
        rank10: total.rank10 / n,
        map: total.map / n,
        minp: total.minp / n,
    })
}

/// Identification of a summary row in the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub run_id: String,
    pub split: String,
    pub summary: RetrievalSummary,
    pub seed: u64,
    pub noise_rate: f64,
    pub mask_ratio: f64,
}

pub const SUMMARY_HEADER: &str = "run_id,split,rank1,rank5,rank10,mAP,mINP,seed,noise_rate,mask_ratio";

impl SummaryRow {
    pub fn to_csv_line(&self) -> String {
        let s = &self.summary;
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.run_id,
            self.split,
            s.rank1,
            s.rank5,
            s.rank10,
            s.map,
            s.minp,
            self.seed,
            self.noise_rate,
            self.mask_ratio
        )
    }
}

/// Writes a header line followed by one line per row.
pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(f, "{}", r.to_csv_line())?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn column(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    fn close(a: &RetrievalSummary, b: &RetrievalSummary, tol: f64) -> bool {
        [
            (a.rank1, b.rank1),
            (a.rank5, b.rank5),
            (a.rank10, b.rank10),
            (a.map, b.map),
            (a.minp, b.minp),
        ]
        .iter()
        .all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn perfect_retrieval() {
        let q = column(&[1.0]);
        let g = column(&[1.0, 0.5, -1.0]);
        let r = rank_and_score(&q, &g, &[vec![true, false, false]]).unwrap();
        assert_eq!(r.summary.rank1, 1.0);
        assert_eq!(r.average_precision, vec![1.0]);
        assert_eq!(r.inverse_negative_penalty, vec![1.0]);
        let o = oracle_score(&[vec![1.0, 0.5, -1.0]], &[vec![true, false, false]]).unwrap();
        assert_eq!(o, r.summary);
    }

    #[test]
    fn two_positives_at_ranks_one_and_four() {
        let q = column(&[1.0]);
        let g = column(&[0.9, 0.8, 0.7, 0.6, 0.5]);
        let rel = vec![vec![true, false, false, true, false]];
        let r = rank_and_score(&q, &g, &rel).unwrap();
        assert!((r.average_precision[0] - 0.75).abs() < 1e-15);
        assert!((r.inverse_negative_penalty[0] - 0.5).abs() < 1e-15);
        assert_eq!(r.summary.rank1, 1.0);
        assert_eq!(r.rankings[0], vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn ties_rank_by_gallery_index() {
        let q = column(&[1.0]);
        let g = column(&[0.3; 6]);
        let rel = vec![vec![false, false, true, false, false, true]];
        let r = rank_and_score(&q, &g, &rel).unwrap();
        assert_eq!(r.rankings[0], (0..6).collect::<Vec<_>>());
        assert_eq!(r.summary.rank1, 0.0);
        assert_eq!(r.summary.rank5, 1.0);
        assert!((r.average_precision[0] - (1.0 / 3.0 + 2.0 / 6.0) / 2.0).abs() < 1e-15);
        assert!((r.inverse_negative_penalty[0] - 2.0 / 6.0).abs() < 1e-15);
        let o = oracle_score(&[vec![0.3; 6]], &rel).unwrap();
        assert!(close(&o, &r.summary, 0.0));
    }

    #[test]
    fn query_without_positives_is_a_protocol_error() {
        let q = column(&[1.0, 2.0]);
        let g = column(&[1.0, 0.5]);
        let rel = vec![vec![true, false], vec![false, false]];
        assert!(matches!(rank_and_score(&q, &g, &rel), Err(Error::Protocol(_))));
        assert!(matches!(
            oracle_score(&[vec![0.0, 1.0], vec![0.0, 1.0]], &rel),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(rank_and_score(&q, &g, &rel[..1]), Err(Error::Shape { .. })));
    }

    #[test]
    fn oracle_agrees_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..200 {
            let nq = rng.gen_range(1..=20);
            let ng = rng.gen_range(1..=20);
            let d = rng.gen_range(1..=4);
            // coarse grid values make ties common
            let mut draw = |n: usize| {
                Tensor::new(vec![n, d], (0..n * d).map(|_| f64::from(rng.gen_range(-3i32..=3)) / 3.0).collect()).unwrap()
            };
            let q = draw(nq);
            let g = draw(ng);
            let rel: Vec<Vec<bool>> = (0..nq)
                .map(|_| {
                    let mut row: Vec<bool> = (0..ng).map(|_| rng.gen_bool(0.3)).collect();
                    let forced = rng.gen_range(0..ng);
                    row[forced] = true;
                    row
                })
                .collect();
            let r = rank_and_score(&q, &g, &rel).unwrap();
            let sims = q.matmul(&g.transpose().unwrap()).unwrap();
            let sims: Vec<Vec<f64>> = (0..nq).map(|i| sims.row(i).to_vec()).collect();
            let o = oracle_score(&sims, &rel).unwrap();
            assert!(close(&r.summary, &o, 1e-12), "{:?} vs {:?}", r.summary, o);
            for (&ap, &inp) in r.average_precision.iter().zip(&r.inverse_negative_penalty) {
                assert!(ap > 0.0 && ap <= 1.0);
                assert!(inp > 0.0 && inp <= 1.0);
            }
            for order in &r.rankings {
                let mut sorted = order.clone();
                sorted.sort_unstable();
                assert_eq!(sorted, (0..ng).collect::<Vec<_>>());
            }
        }
    }

    proptest! {
        #[test]
        fn metrics_depend_only_on_rank(
            values in prop::collection::vec(-1.0f64..1.0, 2..15),
            flags in prop::collection::vec(any::<bool>(), 15),
        ) {
            let g = values.len();
            let mut rel: Vec<bool> = flags[..g].to_vec();
            rel[0] = true;
            let base = rank_and_score(&column(&[1.0]), &column(&values), &[rel.clone()]).unwrap();
            // a positive monotone transform applied to the gallery scores
            let warped: Vec<f64> = values.iter().map(|v| (3.0 * v).exp() + 0.5).collect();
            let other = rank_and_score(&column(&[1.0]), &column(&warped), &[rel]).unwrap();
            prop_assert_eq!(base.rankings, other.rankings);
            prop_assert_eq!(base.summary, other.summary);
        }
    }

    #[test]
    fn summary_csv_layout() {
        let row = SummaryRow {
            run_id: "r0".into(),
            split: "test".into(),
            summary: RetrievalSummary {
                rank1: 1.0,
                rank5: 1.0,
                rank10: 1.0,
                map: 0.75,
                minp: 0.5,
            },
            seed: 3,
            noise_rate: 0.2,
            mask_ratio: 0.5,
        };
        assert_eq!(
            row.to_csv_line(),
            "r0,test,1.000000,1.000000,1.000000,0.750000,0.500000,3,0.2,0.5"
        );
        let path = std::env::temp_dir().join(format!("amns-metrics-{}.csv", std::process::id()));
        write_summary_csv(&path, &[row]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(SUMMARY_HEADER));
        assert_eq!(text.lines().count(), 2);
        std::fs::remove_file(path).ok();
    }
}

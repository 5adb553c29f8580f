use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{MaskStrategy, RunConfig};
use super::train::train;
use crate::awm::{byol_loss, itc_loss, simclr_loss};
use crate::error::{Error, Result};
use crate::losses::{bsdm_loss, id_loss, sdm_loss, waf_loss, PairBatch, WafParams};
use crate::metrics::{write_summary_csv, RetrievalSummary, SummaryRow};
use crate::synthdata::SyntheticDataset;
use crate::tensor::{grad_check, Tape, Tensor, Var};

/// Mask ratio singled out in sweep output as the reference operating point.
pub const OPERATING_POINT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub ratio: f64,
    pub strategy: MaskStrategy,
    pub seed: u64,
    pub test: RetrievalSummary,
    pub best_epoch: usize,
    pub signal_fraction: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Trains one run per `(ratio, strategy, seed)` and writes `sweep_runs.csv` and
/// `sweep_summary.csv` (mean and sample standard deviation of test Rank-1) into `out_dir`.
pub fn sweep_mask_ratio(
    config: &RunConfig,
    ds: &SyntheticDataset,
    ratios: &[f64],
    strategies: &[MaskStrategy],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    if ratios.is_empty() || strategies.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one ratio, strategy and seed".into()));
    }
    let mut rows = Vec::new();
    for &ratio in ratios {
        for &strategy in strategies {
            for &seed in seeds {
                let mut cfg = config.clone();
                cfg.mask_ratio = ratio;
                cfg.mask_strategy = strategy;
                cfg.seed = seed;
                cfg.losses.awm = true;
                let out = train(&cfg, ds)?;
                rows.push(SweepRow {
                    ratio,
                    strategy,
                    seed,
                    test: out.log.test,
                    best_epoch: out.log.best_epoch,
                    signal_fraction: out.log.test_signal_fraction,
                });
            }
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let mut runs = String::from("ratio,strategy,seed,rank1,rank5,rank10,mAP,mINP,best_epoch,signal_fraction\n");
    for r in &rows {
        let _ = writeln!(
            runs,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6}",
            r.ratio,
            r.strategy.as_str(),
            r.seed,
            r.test.rank1,
            r.test.rank5,
            r.test.rank10,
            r.test.map,
            r.test.minp,
            r.best_epoch,
            r.signal_fraction
        );
    }
    std::fs::write(out_dir.join("sweep_runs.csv"), runs)?;
    std::fs::write(out_dir.join("sweep_summary.csv"), sweep_summary(&rows))?;
    Ok(rows)
}

fn sweep_summary(rows: &[SweepRow]) -> String {
    let mut groups: Vec<((f64, MaskStrategy), Vec<f64>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|(k, _)| *k == (r.ratio, r.strategy)) {
            Some((_, v)) => v.push(r.test.rank1),
            None => groups.push(((r.ratio, r.strategy), vec![r.test.rank1])),
        }
    }
    let mut s = String::from("ratio,strategy,seeds,mean_rank1,std_rank1,operating_point\n");
    for ((ratio, strategy), vals) in groups {
        let (m, sd) = mean_std(&vals);
        let flag = u8::from((ratio - OPERATING_POINT).abs() < 1e-12);
        let _ = writeln!(s, "{ratio},{},{},{m:.6},{sd:.6},{flag}", strategy.as_str(), vals.len());
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub loss: String,
    pub noise_rate: f64,
    pub seed: u64,
    pub test: RetrievalSummary,
    pub best_epoch: usize,
}

/// Trains one run per `(loss, noise rate, seed)`, swapping the distribution-matching
/// term while keeping every other toggle, and writes `compare_losses.csv`.
pub fn compare_losses(
    config: &RunConfig,
    ds: &SyntheticDataset,
    losses: &[&str],
    noise_rates: &[f64],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<CompareRow>> {
    let mut rows = Vec::new();
    for &loss in losses {
        for &rho in noise_rates {
            for &seed in seeds {
                let mut cfg = config.clone();
                match loss {
                    "bsdm" => (cfg.losses.bsdm, cfg.losses.sdm) = (true, false),
                    "sdm" => (cfg.losses.bsdm, cfg.losses.sdm) = (false, true),
                    other => return Err(Error::Config(format!("cannot compare unknown loss `{other}`"))),
                }
                cfg.noise_rate = rho;
                cfg.seed = seed;
                let out = train(&cfg, ds)?;
                rows.push(CompareRow {
                    loss: loss.to_string(),
                    noise_rate: rho,
                    seed,
                    test: out.log.test,
                    best_epoch: out.log.best_epoch,
                });
            }
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let summary: Vec<SummaryRow> = rows
        .iter()
        .map(|r| SummaryRow {
            run_id: format!("{}-rho{}-seed{}", r.loss, r.noise_rate, r.seed),
            split: "test".into(),
            summary: r.test,
            seed: r.seed,
            noise_rate: r.noise_rate,
            mask_ratio: config.mask_ratio,
        })
        .collect();
    write_summary_csv(&out_dir.join("compare_losses.csv"), &summary)?;
    Ok(rows)
}

/// Maximum relative gradient error per loss over the checked batches.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<(String, f64)>,
    pub tolerance: f64,
    pub batches: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|(_, e)| *e < self.tolerance)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (name, err) in &self.entries {
            let verdict = if *err < self.tolerance { "ok" } else { "FAILED" };
            let _ = writeln!(s, "{name:<8} max relative error {err:.3e} over {} batches  {verdict}", self.batches);
        }
        s
    }
}

pub const GRADCHECK_LOSSES: [&str; 7] = ["sdm", "bsdm", "waf", "id", "itc", "simclr", "byol"];

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Runs finite-difference checks of every named loss on `batches` random batches of at
/// most 8 pairs. Image and text rows are perturbed together.
pub fn gradcheck_cmd(losses: &[&str], batches: usize, seed: u64) -> Result<GradcheckReport> {
    const D: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for &name in losses {
        if !GRADCHECK_LOSSES.contains(&name) {
            return Err(Error::Config(format!("no gradient check for loss `{name}`")));
        }
        let mut worst: f64 = 0.0;
        for _ in 0..batches {
            let n = rng.gen_range(2..=8);
            let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let x = random_tensor(&mut rng, 2 * n, D);
            let classifier = random_tensor(&mut rng, D, 3);
            let targets = random_tensor(&mut rng, 2 * n, D);
            let top: Vec<usize> = (0..n).collect();
            let bottom: Vec<usize> = (n..2 * n).collect();
            let err = grad_check(
                |t: &mut Tape, x: Var| {
                    let a = t.gather_rows(x, &top)?;
                    let b = t.gather_rows(x, &bottom)?;
                    let an = t.l2_normalize_rows(a)?;
                    let bn = t.l2_normalize_rows(b)?;
                    let pair = PairBatch::new(an, bn, ids.clone(), crate::losses::DEFAULT_TAU, crate::losses::DEFAULT_EPSILON);
                    match name {
                        "sdm" => sdm_loss(t, &pair),
                        "bsdm" => bsdm_loss(t, &pair),
                        "waf" => waf_loss(t, &pair, &WafParams::default()),
                        "id" => {
                            let w = t.constant(classifier.clone());
                            let li = id_loss(t, a, &ids, w)?;
                            let lt = id_loss(t, b, &ids, w)?;
                            t.add(li, lt)
                        }
                        "itc" => itc_loss(t, an, bn, crate::awm::DEFAULT_ITC_TAU),
                        "simclr" => simclr_loss(t, an, bn, crate::awm::DEFAULT_SIMCLR_TAU),
                        _ => {
                            let tg = t.constant(targets.clone());
                            let ta = t.gather_rows(tg, &top)?;
                            let tb = t.gather_rows(tg, &bottom)?;
                            byol_loss(t, a, tb, b, ta)
                        }
                    }
                },
                &x,
                1e-6,
            )?;
            worst = worst.max(err);
        }
        entries.push((name.to_string(), worst));
    }
    Ok(GradcheckReport {
        entries,
        tolerance: 1e-4,
        batches,
    })
}

struct Series {
    label: String,
    points: Vec<(f64, f64, f64)>,
}

fn read_sweep_summary(path: &Path) -> Result<Vec<Series>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("{} lacks column `{name}`", path.display())))
    };
    let (ci, cs, cm, cd) = (col("ratio")?, col("strategy")?, col("mean_rank1")?, col("std_rank1")?);
    let mut by: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for row in r.records() {
        let row = row?;
        let num = |k: usize| -> Result<f64> {
            row.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad number in {}", path.display())))
        };
        let label = row.get(cs).unwrap_or("").to_string();
        by.entry(label).or_default().push((num(ci)?, num(cm)?, num(cd)?));
    }
    Ok(by
        .into_iter()
        .map(|(label, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label, points }
        })
        .collect())
}

fn svg_chart(title: &str, series: &[Series]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 48.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let (x0, x1) = if x1 > x0 { (x0, x1) } else { (x0 - 0.5, x0 + 0.5) };
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - y.clamp(0.0, 1.0) * (H - 2.0 * M);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n\
         <line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n",
        W / 2.0,
        H - M,
        W - M,
        H - M,
        H - M
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"10\">{tick:.2}</text>",
            M - 4.0,
            py(tick) + 3.0
        );
    }
    let mut xticks: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    xticks.sort_by(f64::total_cmp);
    xticks.dedup();
    for x in xticks {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{x}</text>",
            px(x),
            H - M + 14.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">mask ratio</text>",
        W / 2.0,
        H - 8.0
    );
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = ser.points.iter().map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1))).collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        );
        for p in &ser.points {
            let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>", px(p.0), py(p.1));
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{}</text>",
            W - M - 60.0,
            M + 14.0 * k as f64,
            ser.label
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Turns sweep summaries into whitespace-separated `.dat` files and SVG line charts
/// of mean test Rank-1 against mask ratio. Returns the written paths.
pub fn emit_plots(csv_paths: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for path in csv_paths {
        let series = read_sweep_summary(path)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("sweep")
            .to_string();
        let mut dat = String::from("# strategy ratio mean_rank1 std_rank1\n");
        for ser in &series {
            for (x, m, sd) in &ser.points {
                let _ = writeln!(dat, "{} {x} {m:.6} {sd:.6}", ser.label);
            }
            dat.push_str("\n\n");
        }
        let dat_path = out_dir.join(format!("{stem}.dat"));
        std::fs::write(&dat_path, dat)?;
        let svg_path = out_dir.join(format!("{stem}.svg"));
        std::fs::write(&svg_path, svg_chart("Rank-1 vs mask ratio", &series))?;
        written.push(dat_path);
        written.push(svg_path);
    }
    Ok(written)
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{MaskStrategy, RunConfig};
use super::model::Model;
use super::optim::Adam;
use crate::awm::{attention_weights, awm_total, byol_loss, itc_loss, random_mask, select_mask, simclr_loss, MaskPlan};
use crate::encoders::{momentum_schedule, ImageEncoder, ImageInput, ParamSet};
use crate::error::{Error, Result};
use crate::losses::{bsdm_loss, id_loss, sdm_loss, waf_loss, PairBatch};
use crate::metrics::RetrievalSummary;
use crate::seed::derive_seed;
use crate::synthdata::{augment_views, text_augment, Split, SyntheticDataset, SyntheticImage, EOS_TOKEN};
use crate::tensor::{Tape, Tensor, Var};

/// Loss terms in the order they are summed.
pub const COMPONENTS: [&str; 7] = ["bsdm", "sdm", "waf", "id", "itc", "simclr", "byol"];

/// Values of the enabled loss terms; disabled terms are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Components(pub [Option<f64>; 7]);

impl Components {
    pub fn get(&self, name: &str) -> Option<f64> {
        COMPONENTS.iter().position(|&c| c == name).and_then(|k| self.0[k])
    }

    /// Sum of the enabled terms, accumulated in [`COMPONENTS`] order.
    pub fn sum(&self) -> f64 {
        self.0.iter().flatten().fold(None, |acc: Option<f64>, &v| Some(acc.map_or(v, |a| a + v))).unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub components: Components,
    pub total: f64,
    /// Momentum used for the EMA update after this step.
    pub momentum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// Epoch 0 holds the untrained model's validation metrics and no losses.
    pub epoch: usize,
    pub mean_components: Components,
    pub mean_total: Option<f64>,
    pub last_momentum: Option<f64>,
    pub val: RetrievalSummary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Test metrics of the best-validation checkpoint.
    pub test: RetrievalSummary,
    /// Mean fraction of signal patches inside the teacher's keep-sets on the test split.
    pub test_signal_fraction: f64,
}

impl RunLog {
    pub fn momenta(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.momentum).collect()
    }

    /// Per-step rows: `epoch,step,<components>,total,momentum`; disabled terms are blank.
    pub fn steps_csv(&self) -> String {
        let mut s = format!("epoch,step,{},total,momentum\n", COMPONENTS.join(","));
        for st in &self.steps {
            let _ = write!(s, "{},{}", st.epoch, st.step);
            for v in st.components.0 {
                let _ = write!(s, ",{}", v.map(|x| format!("{x:.17e}")).unwrap_or_default());
            }
            let _ = writeln!(s, ",{:.17e},{:.17e}", st.total, st.momentum);
        }
        s
    }

    /// Per-epoch rows with mean losses and validation metrics.
    pub fn epochs_csv(&self) -> String {
        let mut s = format!(
            "epoch,{},total,momentum,val_rank1,val_rank5,val_rank10,val_mAP,val_mINP\n",
            COMPONENTS.join(",")
        );
        for e in &self.epochs {
            let _ = write!(s, "{}", e.epoch);
            for v in e.mean_components.0 {
                let _ = write!(s, ",{}", v.map(|x| format!("{x:.8}")).unwrap_or_default());
            }
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
            let _ = writeln!(
                s,
                ",{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                opt(e.mean_total),
                opt(e.last_momentum),
                e.val.rank1,
                e.val.rank5,
                e.val.rank10,
                e.val.map,
                e.val.minp
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("steps.csv"), self.steps_csv())?;
        std::fs::write(dir.join("epochs.csv"), self.epochs_csv())?;
        let t = &self.test;
        std::fs::write(
            dir.join("summary.txt"),
            format!(
                "best_epoch = {}\ntest_rank1 = {}\ntest_rank5 = {}\ntest_rank10 = {}\ntest_mAP = {}\ntest_mINP = {}\ntest_signal_fraction = {}\n",
                self.best_epoch, t.rank1, t.rank5, t.rank10, t.map, t.minp, self.test_signal_fraction
            ),
        )?;
        Ok(())
    }
}

/// Outcome of [`train`]: the log plus the best-validation model.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub log: RunLog,
    pub best: Model,
}

/// Mean fraction of signal patches among the patches that `encoder_params` would keep
/// at `ratio` under attention-weighted selection, over the samples of `split`.
pub fn keep_set_signal_fraction(
    encoder: &ImageEncoder,
    encoder_params: &ParamSet,
    ds: &SyntheticDataset,
    split: Split,
    ratio: f64,
) -> Result<f64> {
    let indices = ds.split_indices(split);
    if indices.is_empty() {
        return Err(Error::Protocol(format!("split `{}` is empty", split.as_str())));
    }
    let mut total = 0.0;
    for chunk in indices.chunks(64) {
        let mut tape = Tape::new();
        let vars = encoder_params.bind_frozen(&mut tape);
        let inputs: Vec<ImageInput<'_>> = chunk
            .iter()
            .map(|&i| ImageInput {
                patches: &ds.samples[i].image.patches,
                keep: None,
            })
            .collect();
        let out = encoder.encode_batch(&mut tape, &vars, &inputs, true)?;
        for (&i, trace) in chunk.iter().zip(&out.traces) {
            let plan = select_mask(&attention_weights(trace)?, ratio)?;
            let mask = &ds.samples[i].image.signal_mask;
            let hits = plan.keep.iter().filter(|k| mask.binary_search(k).is_ok()).count();
            total += hits as f64 / plan.keep.len() as f64;
        }
    }
    Ok(total / indices.len() as f64)
}

/// Splits a shuffled index list into batches holding at least two identities each.
///
/// A chunk that is too small or single-identity is merged into its predecessor.
pub fn make_batches(order: &[usize], ds: &SyntheticDataset, batch_size: usize) -> Result<Vec<Vec<usize>>> {
    let distinct = |b: &[usize]| {
        let first = ds.samples[b[0]].image.identity;
        b.iter().any(|&i| ds.samples[i].image.identity != first)
    };
    let mut batches: Vec<Vec<usize>> = Vec::new();
    for chunk in order.chunks(batch_size) {
        if chunk.len() >= 2 && distinct(chunk) {
            batches.push(chunk.to_vec());
        } else if let Some(last) = batches.last_mut() {
            last.extend_from_slice(chunk);
        } else {
            batches.push(chunk.to_vec());
        }
    }
    match batches.first() {
        Some(b) if b.len() >= 2 && distinct(b) => Ok(batches),
        _ => Err(Error::Batch("training split needs at least two identities".into())),
    }
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    ds: &'a SyntheticDataset,
    model: Model,
    adam: Adam,
    class_of: BTreeMap<usize, usize>,
}

impl Trainer<'_> {
    fn teacher_pass(
        &self,
        views: &[(SyntheticImage, SyntheticImage)],
        batch: &[usize],
        epoch: usize,
    ) -> Result<(Vec<MaskPlan>, Tensor, Tensor)> {
        let b = views.len();
        let mut tape = Tape::new();
        let ev = self.model.ema.image.bind_frozen(&mut tape);
        let inputs: Vec<ImageInput<'_>> = views
            .iter()
            .map(|(a, _)| ImageInput { patches: &a.patches, keep: None })
            .chain(views.iter().map(|(_, v)| ImageInput { patches: &v.patches, keep: None }))
            .collect();
        let out = self.model.image.encode_batch(&mut tape, &ev, &inputs, true)?;
        let pv = self.model.ema.projector.bind_frozen(&mut tape);
        let targets = self.model.projector.forward(&mut tape, &pv, out.features)?;
        let t = tape.value(targets);
        let d = t.cols();
        let target_a = Tensor::new(vec![b, d], t.data()[..b * d].to_vec())?;
        let target_b = Tensor::new(vec![b, d], t.data()[b * d..].to_vec())?;

        let p = self.cfg.data.num_patches;
        let plans = batch
            .iter()
            .zip(&out.traces[b..])
            .map(|(&i, trace)| match self.cfg.mask_strategy {
                MaskStrategy::Awm => select_mask(&attention_weights(trace)?, self.cfg.mask_ratio),
                MaskStrategy::Random => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, "mask", &[epoch as u64, i as u64]));
                    random_mask(p, self.cfg.mask_ratio, &mut rng)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((plans, target_a, target_b))
    }

    fn step(&mut self, batch: &[usize], epoch: usize, global_step: usize, total_steps: usize) -> Result<StepLog> {
        let cfg = self.cfg;
        let ds = self.ds;
        let toggles = cfg.losses;
        let views = batch
            .iter()
            .map(|&i| {
                augment_views(
                    &ds.samples[i].image,
                    derive_seed(cfg.seed, "views", &[epoch as u64, i as u64]),
                    cfg.sigma_aug,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let captions = batch
            .iter()
            .map(|&i| {
                let seed = derive_seed(cfg.seed, "text", &[epoch as u64, i as u64]);
                let mut c = text_augment(&ds.samples[i].caption, seed, &cfg.text_aug, &ds.config)?;
                c.push(EOS_TOKEN);
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        let identities: Vec<usize> = batch.iter().map(|&i| ds.samples[i].image.identity).collect();

        let teacher = if toggles.awm {
            Some(self.teacher_pass(&views, batch, epoch)?)
        } else {
            None
        };

        let b = batch.len();
        let mut tape = Tape::new();
        let iv = self.model.image.params().bind(&mut tape);
        let tv = self.model.text.params().bind(&mut tape);
        let pv = self.model.projector.params().bind(&mut tape);
        let qv = self.model.predictor.params().bind(&mut tape);
        let cv = self.model.classifier.bind(&mut tape);

        let mut inputs: Vec<ImageInput<'_>> = views
            .iter()
            .map(|(a, _)| ImageInput { patches: &a.patches, keep: None })
            .collect();
        if let Some((plans, _, _)) = &teacher {
            inputs.extend(views.iter().zip(plans).map(|((_, v), plan)| ImageInput {
                patches: &v.patches,
                keep: Some(plan.keep.as_slice()),
            }));
        }
        let out = self.model.image.encode_batch(&mut tape, &iv, &inputs, false)?;
        let first: Vec<usize> = (0..b).collect();
        let img_a = tape.gather_rows(out.features, &first)?;
        let refs: Vec<&[usize]> = captions.iter().map(Vec::as_slice).collect();
        let txt = self.model.text.encode_batch(&mut tape, &tv, &refs)?;
        let img_n = tape.l2_normalize_rows(img_a)?;
        let txt_n = tape.l2_normalize_rows(txt)?;
        let pair = PairBatch::new(img_n, txt_n, identities.clone(), cfg.tau, cfg.epsilon);

        let mut terms: [Option<Var>; 7] = [None; 7];
        if toggles.bsdm {
            terms[0] = Some(bsdm_loss(&mut tape, &pair)?);
        }
        if toggles.sdm {
            terms[1] = Some(sdm_loss(&mut tape, &pair)?);
        }
        if toggles.waf {
            terms[2] = Some(waf_loss(&mut tape, &pair, &cfg.waf)?);
        }
        if toggles.id {
            let classes = identities
                .iter()
                .map(|id| {
                    self.class_of
                        .get(id)
                        .copied()
                        .ok_or_else(|| Error::Label(format!("identity {id} is not a training identity")))
                })
                .collect::<Result<Vec<_>>>()?;
            let li = id_loss(&mut tape, img_a, &classes, cv[0])?;
            let lt = id_loss(&mut tape, txt, &classes, cv[0])?;
            terms[3] = Some(tape.add(li, lt)?);
        }
        if let Some((_, target_a, target_b)) = teacher {
            let masked: Vec<usize> = (b..2 * b).collect();
            let img_m = tape.gather_rows(out.features, &masked)?;
            let img_mn = tape.l2_normalize_rows(img_m)?;
            let itc = itc_loss(&mut tape, img_mn, txt_n, cfg.itc_tau)?;
            let za = self.model.projector.forward(&mut tape, &pv, img_a)?;
            let zm = self.model.projector.forward(&mut tape, &pv, img_m)?;
            let za_n = tape.l2_normalize_rows(za)?;
            let zm_n = tape.l2_normalize_rows(zm)?;
            let simclr = simclr_loss(&mut tape, za_n, zm_n, cfg.simclr_tau)?;
            let pa = self.model.predictor.forward(&mut tape, &qv, za)?;
            let pm = self.model.predictor.forward(&mut tape, &qv, zm)?;
            let ta = tape.constant(target_a);
            let tb = tape.constant(target_b);
            // the original view predicts the teacher's unmasked second view and vice versa
            let byol = byol_loss(&mut tape, pa, tb, pm, ta)?;
            terms[4] = Some(itc);
            terms[5] = Some(simclr);
            terms[6] = Some(byol);
        }

        let mut values = [None; 7];
        for (k, term) in terms.iter().enumerate() {
            if let Some(v) = term {
                let x = tape.value(*v).item()?;
                if !x.is_finite() {
                    return Err(Error::Divergence {
                        component: COMPONENTS[k].to_string(),
                        value: x,
                        epoch,
                        step: global_step,
                    });
                }
                values[k] = Some(x);
            }
        }
        let block = match (terms[4], terms[5], terms[6]) {
            (Some(i), Some(c), Some(y)) => Some(awm_total(&mut tape, i, c, y)?),
            _ => None,
        };
        let mut total: Option<Var> = None;
        for v in terms[..4].iter().chain([&block]).flatten() {
            total = Some(match total {
                None => *v,
                Some(acc) => tape.add(acc, *v)?,
            });
        }
        let total = total.expect("validated config enables a loss");
        self.finish(tape, total, values, epoch, global_step, total_steps, [&iv, &tv, &pv, &qv, &cv])
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &mut self,
        mut tape: Tape,
        total: Var,
        values: [Option<f64>; 7],
        epoch: usize,
        global_step: usize,
        total_steps: usize,
        vars: [&Vec<Var>; 5],
    ) -> Result<StepLog> {
        let total_value = tape.value(total).item()?;
        if !total_value.is_finite() {
            return Err(Error::Divergence {
                component: "total".into(),
                value: total_value,
                epoch,
                step: global_step,
            });
        }
        tape.backward(total)?;
        let grads: Vec<Vec<Vec<f64>>> = vars
            .iter()
            .map(|group| {
                group
                    .iter()
                    .map(|&v| {
                        tape.grad(v)
                            .map(<[f64]>::to_vec)
                            .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
                    })
                    .collect()
            })
            .collect();
        drop(tape);
        let m = &mut self.model;
        self.adam.step(
            &mut [
                m.image.params_mut(),
                m.text.params_mut(),
                m.projector.params_mut(),
                m.predictor.params_mut(),
                &mut m.classifier,
            ],
            &grads,
        )?;
        let last = total_steps.saturating_sub(1).max(1);
        let momentum = momentum_schedule(global_step.min(last), last)?;
        m.ema.update(m.image.params(), m.projector.params(), momentum)?;
        Ok(StepLog {
            epoch,
            step: global_step,
            components: Components(values),
            total: total_value,
            momentum,
        })
    }
}

/// Trains on the training split, selecting the epoch with the best validation Rank-1.
///
/// Epoch 0 evaluates the untrained model, so zero epochs yields a log with that single
/// entry. The config's noise rate is applied to the training captions before training.
pub fn train(config: &RunConfig, ds: &SyntheticDataset) -> Result<TrainOutput> {
    config.validate()?;
    if ds.config.num_patches != config.data.num_patches
        || ds.config.patch_dim != config.data.patch_dim
        || ds.config.vocab != config.data.vocab
    {
        return Err(Error::Config("dataset geometry differs from the run configuration".into()));
    }
    let noisy;
    let ds = if config.noise_rate > 0.0 && ds.corruption.is_none() {
        noisy = crate::synthdata::inject_noise(ds, config.noise_rate, derive_seed(config.seed, "noise", &[]))?.0;
        &noisy
    } else {
        ds
    };
    let train_ids = ds.split_identities(Split::Train);
    let class_of: BTreeMap<usize, usize> = train_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let model = Model::new(config, train_ids.len())?;
    let groups = [
        model.image.params(),
        model.text.params(),
        model.projector.params(),
        model.predictor.params(),
        &model.classifier,
    ];
    let adam = Adam::new(config.lr, &groups);
    let mut trainer = Trainer {
        cfg: config,
        ds,
        model,
        adam,
        class_of,
    };

    let train_indices = ds.split_indices(Split::Train);
    let steps_per_epoch = if config.epochs > 0 {
        make_batches(&train_indices, ds, config.batch_size)?.len()
    } else {
        0
    };
    let total_steps = steps_per_epoch * config.epochs;

    let initial = trainer.model.evaluate(ds, Split::Val)?.summary;
    let mut epochs = vec![EpochLog {
        epoch: 0,
        mean_components: Components::default(),
        mean_total: None,
        last_momentum: None,
        val: initial,
    }];
    let mut best = trainer.model.clone();
    let mut best_epoch = 0;
    let mut best_rank1 = initial.rank1;
    let mut steps = Vec::with_capacity(total_steps);
    let mut global = 0;
    for epoch in 1..=config.epochs {
        let mut order = train_indices.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "batches", &[epoch as u64])));
        let batches = make_batches(&order, ds, config.batch_size)?;
        let first_step = steps.len();
        for batch in &batches {
            let log = trainer.step(batch, epoch, global, total_steps).map_err(|e| match e {
                Error::DegenerateFeature { norm, .. } if !norm.is_finite() => Error::Divergence {
                    component: "features".into(),
                    value: norm,
                    epoch,
                    step: global,
                },
                e => e,
            })?;
            steps.push(log);
            global += 1;
        }
        let these = &steps[first_step..];
        let n = these.len() as f64;
        let mut means = [None; 7];
        for (k, slot) in means.iter_mut().enumerate() {
            if these.iter().all(|s| s.components.0[k].is_some()) && !these.is_empty() {
                *slot = Some(these.iter().map(|s| s.components.0[k].unwrap_or(0.0)).sum::<f64>() / n);
            }
        }
        let val = trainer.model.evaluate(ds, Split::Val)?.summary;
        epochs.push(EpochLog {
            epoch,
            mean_components: Components(means),
            mean_total: Some(these.iter().map(|s| s.total).sum::<f64>() / n),
            last_momentum: these.last().map(|s| s.momentum),
            val,
        });
        if val.rank1 > best_rank1 {
            best_rank1 = val.rank1;
            best_epoch = epoch;
            best = trainer.model.clone();
        }
    }
    let test = best.evaluate(ds, Split::Test)?.summary;
    let test_signal_fraction = keep_set_signal_fraction(&best.image, &best.ema.image, ds, Split::Test, config.mask_ratio)?;
    Ok(TrainOutput {
        log: RunLog {
            steps,
            epochs,
            best_epoch,
            test,
            test_signal_fraction,
        },
        best,
    })
}

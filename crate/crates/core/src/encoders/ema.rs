use super::ParamSet;
use crate::error::{Error, Result};

/// Teacher momentum at the first step.
pub const BASE_MOMENTUM: f64 = 0.996;

/// Cosine ramp of the EMA momentum from [`BASE_MOMENTUM`] at step 0 to 1.0 at `total_steps`.
pub fn momentum_schedule(step: usize, total_steps: usize) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Range("momentum schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(Error::Range(format!("step {step} beyond schedule end {total_steps}")));
    }
    if step == total_steps {
        return Ok(1.0);
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(BASE_MOMENTUM + (1.0 - BASE_MOMENTUM) * (1.0 - phase.cos()) / 2.0)
}

/// `shadow ← m·shadow + (1−m)·live`, parameter by parameter.
pub fn ema_blend(shadow: &mut ParamSet, live: &ParamSet, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Parameter(format!("EMA momentum {m} outside [0, 1]")));
    }
    if !shadow.same_layout(live) {
        return Err(Error::Shape {
            op: "ema_update",
            lhs: vec![shadow.len()],
            rhs: vec![live.len()],
        });
    }
    if m == 1.0 {
        return Ok(());
    }
    for (s, l) in shadow.tensors_mut().iter_mut().zip(live.tensors()) {
        for (a, &b) in s.data_mut().iter_mut().zip(l.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

/// Shadow copy of the image encoder and the BYOL projector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub image: ParamSet,
    pub projector: ParamSet,
    pub step: u64,
}

impl EmaState {
    /// Starts the shadow as an exact copy of the live parameters.
    pub fn new(image: &ParamSet, projector: &ParamSet) -> Self {
        Self {
            image: image.clone(),
            projector: projector.clone(),
            step: 0,
        }
    }

    pub fn update(&mut self, image: &ParamSet, projector: &ParamSet, m: f64) -> Result<()> {
        ema_blend(&mut self.image, image, m)?;
        ema_blend(&mut self.projector, projector, m)?;
        self.step += 1;
        Ok(())
    }
}

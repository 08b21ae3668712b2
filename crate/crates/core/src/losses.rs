//! Training objectives and scalar schedules.

use crate::error::{Error, Result};
use crate::nets::{ParamSet, UnetDesc};
use crate::tensor::{one_hot, Real, Tape, Tensor, Var};

/// Trade-off weights applied to the transformation and consistency terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_trans: f64,
    pub lambda_con: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_trans.is_finite()
            || !self.lambda_con.is_finite()
            || self.lambda_trans < 0.0
            || self.lambda_con < 0.0
        {
            return Err(Error::Config(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Ramp-up and learning-rate schedule settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub ramp_max: f64,
    pub ramp_sharpness: f64,
    /// Ramp horizon in epochs.
    pub horizon: f64,
    pub warmup_epochs: u32,
    pub peak_lr: f64,
    /// Inner-loop learning rate.
    pub inner_lr: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            ramp_max: 10.0,
            ramp_sharpness: 5.0,
            horizon: 150.0,
            warmup_epochs: 30,
            peak_lr: 0.005,
            inner_lr: 0.001,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon <= 0.0 {
            return Err(Error::Config("schedule horizon must be positive".into()));
        }
        if (self.warmup_epochs as f64) > self.horizon {
            return Err(Error::Config(
                "warmup must not exceed the schedule horizon".into(),
            ));
        }
        Ok(())
    }
}

/// `ramp_max * exp(-sharpness * (1 - t/T)^2)`; `t` past the horizon clamps
/// to the horizon. Applied identically to both lambda weights.
pub fn ramp_weight(t: f64, cfg: &ScheduleConfig) -> f64 {
    let t = t.clamp(0.0, cfg.horizon);
    let u = 1.0 - t / cfg.horizon;
    cfg.ramp_max * (-cfg.ramp_sharpness * u * u).exp()
}

/// Linear warmup from 0 to `peak_lr` over `warmup_epochs`, then constant.
pub fn lr_schedule(epoch: u32, cfg: &ScheduleConfig) -> f64 {
    if epoch >= cfg.warmup_epochs {
        cfg.peak_lr
    } else {
        cfg.peak_lr * epoch as f64 / cfg.warmup_epochs as f64
    }
}

/// Segmentation loss: pixel-mean cross entropy plus `1 - soft Dice`
/// averaged over foreground classes.
pub fn seg_loss<F: Real>(tape: &mut Tape<F>, logits: Var, labels: &[u8]) -> Result<Var> {
    let (b, c, h, w) = match tape.shape(logits) {
        &[b, c, h, w] => (b, c, h, w),
        s => return Err(Error::shape("seg_loss", "[B,C,H,W]", format!("{s:?}"))),
    };
    let oh = one_hot::<F>(labels, b, h, w, c)?;
    let ohv = tape.constant(&oh);
    let ce = tape.cross_entropy_one_hot(logits, ohv)?;
    let probs = tape.softmax(logits)?;
    let dice = tape.soft_dice(probs, ohv, 1e-5)?;
    let one = tape.scalar_const(1.0);
    let dice_loss = tape.sub(one, dice)?;
    tape.add(ce, dice_loss)
}

/// Transformation (registration) loss: plain MSE between the moved and the
/// fixed image.
pub fn trans_loss<F: Real>(tape: &mut Tape<F>, moved: Var, fixed: Var) -> Result<Var> {
    tape.mse(moved, fixed)
}

/// Additive input perturbations for the two consistency branches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseCfg {
    pub sigma: f64,
}

impl Default for NoiseCfg {
    fn default() -> Self {
        NoiseCfg { sigma: 0.05 }
    }
}

/// Hallucination-consistent loss between a gradient-detached teacher and
/// the student:
///
/// `mse( warp(teacher(x + xi_tea), grid), student(warp(x, grid) + xi_stu) )`
///
/// over softmax probability maps, with warped-out (zero-padded) regions
/// masked from the mean. The teacher branch runs on a throwaway tape, so no
/// gradient can reach teacher parameters; the grid stays differentiable in
/// both branches.
pub fn consistency_loss<F: Real>(
    tape: &mut Tape<F>,
    unet: &UnetDesc,
    student_params: &[Var],
    teacher: &ParamSet<F>,
    x: &Tensor<F>,
    grid: Var,
    xi_student: Option<&Tensor<F>>,
    xi_teacher: Option<&Tensor<F>>,
) -> Result<Var> {
    let (n, _k, h, w) = match x.shape() {
        &[n, k, h, w] if k == unet.in_channels => (n, k, h, w),
        s => {
            return Err(Error::shape(
                "consistency_loss",
                format!("[N,{},H,W]", unet.in_channels),
                format!("{s:?}"),
            ))
        }
    };
    if tape.shape(grid) != [n, h, w, 2] {
        return Err(Error::shape(
            "consistency_loss grid",
            format!("[{n},{h},{w},2]"),
            format!("{:?}", tape.shape(grid)),
        ));
    }

    // teacher branch, fully detached
    let teacher_probs = {
        let mut tt: Tape<F> = Tape::new();
        let tvars = teacher.constants(&mut tt);
        let mut xt = tt.constant(x);
        if let Some(xi) = xi_teacher {
            let xiv = tt.constant(xi);
            xt = tt.add(xt, xiv)?;
        }
        let logits = unet.forward(&mut tt, &tvars, xt)?;
        let probs = tt.softmax(logits)?;
        Tensor::from_vec(tt.shape(probs).to_vec(), tt.value(probs).to_vec())?
    };
    let tp = tape.constant(&teacher_probs);
    let warped_teacher = tape.grid_sample(tp, grid)?;

    // student branch on the warped input
    let xv = tape.constant(x);
    let mut warped_x = tape.grid_sample(xv, grid)?;
    if let Some(xi) = xi_student {
        let xiv = tape.constant(xi);
        warped_x = tape.add(warped_x, xiv)?;
    }
    let logits = unet.forward(tape, student_params, warped_x)?;
    let student_probs = tape.softmax(logits)?;

    // mask out zero-padded regions: coverage of a warp of all-ones
    let ones = Tensor::full(vec![n, 1, h, w], F::one());
    let ones_v = tape.constant(&ones);
    let coverage = tape.grid_sample(ones_v, grid)?;
    let thresh = F::of(0.999);
    let mask_plane: Vec<F> = tape
        .value(coverage)
        .iter()
        .map(|&v| if v >= thresh { F::one() } else { F::zero() })
        .collect();
    let active_per_plane: f64 = mask_plane.iter().map(|v| v.f64()).sum();
    let classes = unet.classes;
    let mask1 = tape.leaf_from(vec![n, 1, h, w], mask_plane, false);
    let mask = tape.broadcast_chan(mask1, classes)?;
    tape.masked_mse(
        warped_teacher,
        student_probs,
        mask,
        active_per_plane * classes as f64,
    )
}

#[cfg(test)]
mod tests;

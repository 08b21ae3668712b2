//! Differentiable operations composed from tape primitives. Because each
//! building block carries its own VJP, everything here is automatically
//! valid under double backward as well.

use super::tape::{Tape, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

impl<F: Real> Tape<F> {
    /// Instance normalization over `[B,C,H,W]` with per-channel affine
    /// parameters `gamma`, `beta` of shape `[C]`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (b, _c, h, w) = match self.shape(x) {
            &[b, c, h, w] => (b, c, h, w),
            s => return Err(Error::shape("instance_norm", "[B,C,H,W]", format!("{s:?}"))),
        };
        let mu = self.spatial_mean(x)?;
        let mu_b = self.broadcast_spatial(mu, h, w)?;
        let xc = self.sub(x, mu_b)?;
        let sq = self.mul(xc, xc)?;
        let var = self.spatial_mean(sq)?;
        let var_eps = self.add_scalar(var, eps);
        let std = self.sqrt(var_eps);
        let std_b = self.broadcast_spatial(std, h, w)?;
        let xn = self.div(xc, std_b)?;
        let gamma_b = self.broadcast_class(gamma, b, h, w)?;
        let beta_b = self.broadcast_class(beta, b, h, w)?;
        let scaled = self.mul(xn, gamma_b)?;
        self.add(scaled, beta_b)
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// Mean squared error restricted to a constant 0/1 mask; the mean runs
    /// over the `active` masked elements.
    pub fn masked_mse(&mut self, a: Var, b: Var, mask: Var, active: f64) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        let masked = self.mul(sq, mask)?;
        let m = self.mean_all(masked);
        let n = self.numel(a) as f64;
        Ok(self.scale(m, n / active.max(1.0)))
    }

    /// Pixel-mean cross entropy of logits `[B,C,H,W]` against an integer
    /// label map `[B,H,W]` provided as a one-hot constant of the same shape
    /// as the logits.
    pub fn cross_entropy_one_hot(&mut self, logits: Var, one_hot: Var) -> Result<Var> {
        if self.shape(logits) != self.shape(one_hot) {
            return Err(Error::shape(
                "cross_entropy",
                format!("{:?}", self.shape(logits)),
                format!("{:?}", self.shape(one_hot)),
            ));
        }
        let ls = self.log_softmax(logits)?;
        let picked = self.mul(ls, one_hot)?;
        let per_pixel = self.chan_sum_keep(picked)?;
        let m = self.mean_all(per_pixel);
        Ok(self.neg(m))
    }

    /// Soft Dice over softmax probabilities and a one-hot target, averaged
    /// over foreground classes (class 0 is background). Returns the Dice
    /// score, not the loss. `eps` smooths numerator and denominator so
    /// absent classes do not produce 0/0.
    pub fn soft_dice(&mut self, probs: Var, one_hot: Var, eps: f64) -> Result<Var> {
        if self.shape(probs) != self.shape(one_hot) {
            return Err(Error::shape(
                "soft_dice",
                format!("{:?}", self.shape(probs)),
                format!("{:?}", self.shape(one_hot)),
            ));
        }
        let classes = self.shape(probs)[1];
        if classes < 2 {
            return Err(Error::Config(
                "soft_dice needs at least one foreground class".into(),
            ));
        }
        let pt = self.mul(probs, one_hot)?;
        let inter = self.class_sum(pt)?;
        let ps = self.class_sum(probs)?;
        let ts = self.class_sum(one_hot)?;
        let num0 = self.scale(inter, 2.0);
        let num = self.add_scalar(num0, eps);
        let den0 = self.add(ps, ts)?;
        let den = self.add_scalar(den0, eps);
        let dice = self.div(num, den)?;
        // average over classes 1..C via a constant foreground mask
        let mut mask = vec![F::one(); classes];
        mask[0] = F::zero();
        let mask = self.leaf_from(vec![classes], mask, false);
        let fg = self.mul(dice, mask)?;
        let mean = self.mean_all(fg);
        Ok(self.scale(mean, classes as f64 / (classes - 1) as f64))
    }

    /// Mean squared forward difference of a `[B,2,H,W]` displacement field:
    /// the smoothness penalty for dense transforms.
    pub fn smoothness(&mut self, field: Var) -> Result<Var> {
        let dh = self.diff_h(field)?;
        let dw = self.diff_w(field)?;
        let dh2 = self.mul(dh, dh)?;
        let dw2 = self.mul(dw, dw)?;
        let mh = self.mean_all(dh2);
        let mw = self.mean_all(dw2);
        self.add(mh, mw)
    }
}

/// One-hot encodes an integer label map `[B,H,W]` into `[B,C,H,W]`.
pub fn one_hot<F: Real>(labels: &[u8], b: usize, h: usize, w: usize, classes: usize) -> Result<Tensor<F>> {
    if labels.len() != b * h * w {
        return Err(Error::shape(
            "one_hot",
            format!("{} labels", b * h * w),
            format!("{}", labels.len()),
        ));
    }
    let plane = h * w;
    let mut data = vec![F::zero(); b * classes * plane];
    for bi in 0..b {
        for p in 0..plane {
            let l = labels[bi * plane + p] as usize;
            if l >= classes {
                return Err(Error::Data(format!(
                    "label {l} out of range for {classes} classes"
                )));
            }
            data[(bi * classes + l) * plane + p] = F::one();
        }
    }
    Tensor::from_vec(vec![b, classes, h, w], data)
}

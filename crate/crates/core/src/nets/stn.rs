//! The hallucinator: a localization CNN over a (moving, fixed) image pair
//! that emits a spatial transform, plus the transform type itself.
//!
//! The head is initialized to the exact identity (zero weights, identity
//! bias), so a freshly initialized hallucinator reproduces its input.

use rand::Rng;

use super::{identity_grid, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    /// 2x3 affine matrix in normalized coordinates.
    Affine,
    /// Dense displacement field `[B,2,H,W]` in normalized units.
    Dense,
}

/// A spatial transform held as tape vars, produced by the hallucinator.
#[derive(Debug, Clone, Copy)]
pub enum SpatialTransform {
    Affine { theta: Var },
    Dense { field: Var },
}

impl SpatialTransform {
    /// Sampling grid `[B,H,W,2]` realizing the transform.
    pub fn to_grid<F: Real>(&self, tape: &mut Tape<F>, h: usize, w: usize) -> Result<Var> {
        match *self {
            SpatialTransform::Affine { theta } => tape.affine_grid(theta, h, w),
            SpatialTransform::Dense { field } => {
                let b = tape.shape(field)[0];
                let id = identity_grid(tape, b, h, w);
                let disp = tape.to_grid_layout(field)?;
                tape.add(id, disp)
            }
        }
    }

    /// The displacement field for the smoothness penalty (dense only).
    pub fn dense_field(&self) -> Option<Var> {
        match *self {
            SpatialTransform::Dense { field } => Some(field),
            SpatialTransform::Affine { .. } => None,
        }
    }
}

/// Architecture of the hallucinator localization network.
#[derive(Debug, Clone, PartialEq)]
pub struct HallucinatorDesc {
    /// Input extent; the head layout depends on it.
    pub in_h: usize,
    pub in_w: usize,
    /// Channels of the stride-2 localization convs.
    pub loc_channels: Vec<usize>,
    /// Width of the fully connected layer before the affine head.
    pub fc_dim: usize,
    pub kind: TransformKind,
}

impl HallucinatorDesc {
    pub fn new(in_h: usize, in_w: usize) -> Self {
        HallucinatorDesc {
            in_h,
            in_w,
            loc_channels: vec![8, 16, 32, 32],
            fc_dim: 64,
            kind: TransformKind::Affine,
        }
    }

    fn feat_hw(&self) -> (usize, usize) {
        let div = 1usize << self.loc_channels.len();
        (self.in_h / div, self.in_w / div)
    }

    fn validate(&self) -> Result<()> {
        let div = 1usize << self.loc_channels.len();
        if self.in_h % div != 0 || self.in_w % div != 0 || self.in_h < div || self.in_w < div {
            return Err(Error::Config(format!(
                "hallucinator input {}x{} must be divisible by 2^{} = {div}",
                self.in_h,
                self.in_w,
                self.loc_channels.len()
            )));
        }
        Ok(())
    }

    pub fn init<F: Real>(&self, rng: &mut impl Rng) -> ParamSet<F> {
        self.validate().expect("invalid hallucinator config");
        let mut p = ParamSet::new();
        let mut c_prev = 2; // (moving, fixed) channel pair
        for (i, &c) in self.loc_channels.iter().enumerate() {
            let fan_in = (c_prev * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            p.push(
                format!("loc{i}.conv.w"),
                Tensor::randn(vec![c, c_prev, 3, 3], std, rng),
            );
            p.push(format!("loc{i}.conv.b"), Tensor::zeros(vec![c]));
            p.push(format!("loc{i}.norm.gamma"), Tensor::full(vec![c], F::one()));
            p.push(format!("loc{i}.norm.beta"), Tensor::zeros(vec![c]));
            c_prev = c;
        }
        match self.kind {
            TransformKind::Affine => {
                let (fh, fw) = self.feat_hw();
                let flat = c_prev * fh * fw;
                let std = (2.0 / flat as f64).sqrt();
                p.push(
                    "fc1.w".to_string(),
                    Tensor::randn(vec![self.fc_dim, flat], std, rng),
                );
                p.push("fc1.b".to_string(), Tensor::zeros(vec![self.fc_dim]));
                // identity-initialized head: zero weights, identity bias
                p.push(
                    "head.w".to_string(),
                    Tensor::zeros(vec![6, self.fc_dim]),
                );
                let ident = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0].map(F::of).to_vec();
                p.push(
                    "head.b".to_string(),
                    Tensor::from_vec(vec![6], ident).unwrap(),
                );
            }
            TransformKind::Dense => {
                // decoder back to full resolution, zero-initialized flow head
                let mut c_up = c_prev;
                for (i, &c) in self.loc_channels.iter().rev().enumerate() {
                    let fan_in = (c_up * 9) as f64;
                    let std = (2.0 / fan_in).sqrt();
                    p.push(
                        format!("dec{i}.conv.w"),
                        Tensor::randn(vec![c, c_up, 3, 3], std, rng),
                    );
                    p.push(format!("dec{i}.conv.b"), Tensor::zeros(vec![c]));
                    c_up = c;
                }
                p.push("flow.w".to_string(), Tensor::zeros(vec![2, c_up, 3, 3]));
                p.push("flow.b".to_string(), Tensor::zeros(vec![2]));
            }
        }
        p
    }

    /// Produces the transform and the moved (warped) image for a
    /// (moving, fixed) pair of `[B,1,H,W]` vars.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        params: &[Var],
        moving: Var,
        fixed: Var,
    ) -> Result<(SpatialTransform, Var)> {
        if tape.shape(moving) != tape.shape(fixed) {
            return Err(Error::shape(
                "hallucinate",
                format!("{:?}", tape.shape(moving)),
                format!("{:?}", tape.shape(fixed)),
            ));
        }
        let (b, h, w) = match tape.shape(moving) {
            &[b, 1, h, w] => (b, h, w),
            s => return Err(Error::shape("hallucinate", "[B,1,H,W]", format!("{s:?}"))),
        };
        if (h, w) != (self.in_h, self.in_w) {
            return Err(Error::shape(
                "hallucinate",
                format!("{}x{}", self.in_h, self.in_w),
                format!("{h}x{w}"),
            ));
        }
        let mut pos = 0;
        let mut next = || {
            let v = params[pos];
            pos += 1;
            v
        };
        let mut y = tape.concat_c(moving, fixed)?;
        for _ in 0..self.loc_channels.len() {
            let (cw, cb) = (next(), next());
            let (gamma, beta) = (next(), next());
            y = tape.conv2d(y, cw, Some(cb), 2, 1)?;
            y = tape.instance_norm(y, gamma, beta, 1e-5)?;
            y = tape.leaky_relu(y, 0.1);
        }
        let transform = match self.kind {
            TransformKind::Affine => {
                let flat = tape.numel(y) / b;
                let yf = tape.reshape(y, vec![b, flat])?;
                let (w1, b1) = (next(), next());
                let z = tape.matmul(yf, w1, false, true)?;
                let b1r = tape.row_broadcast(b1, b)?;
                let z = tape.add(z, b1r)?;
                let z = tape.leaky_relu(z, 0.1);
                let (w2, b2) = (next(), next());
                let theta = tape.matmul(z, w2, false, true)?;
                let b2r = tape.row_broadcast(b2, b)?;
                let theta = tape.add(theta, b2r)?;
                SpatialTransform::Affine { theta }
            }
            TransformKind::Dense => {
                for _ in 0..self.loc_channels.len() {
                    let (cw, cb) = (next(), next());
                    y = tape.upsample2x(y)?;
                    y = tape.conv2d(y, cw, Some(cb), 1, 1)?;
                    y = tape.leaky_relu(y, 0.1);
                }
                let (fw, fb) = (next(), next());
                let field = tape.conv2d(y, fw, Some(fb), 1, 1)?;
                SpatialTransform::Dense { field }
            }
        };
        debug_assert_eq!(pos, params.len(), "hallucinator param count mismatch");
        let grid = transform.to_grid(tape, h, w)?;
        let moved = tape.grid_sample(moving, grid)?;
        Ok((transform, moved))
    }
}

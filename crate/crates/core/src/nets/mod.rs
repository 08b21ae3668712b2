//! Networks: the U-Net segmenter, the spatial-transformer hallucinator and
//! warping utilities.

mod stn;
mod unet;

pub use stn::{HallucinatorDesc, SpatialTransform, TransformKind};
pub use unet::UnetDesc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// A named, ordered collection of parameter tensors. Order is fixed by the
/// architecture descriptor, which keeps checkpoints, optimizer state and
/// tape leaves aligned by index.
#[derive(Debug, Clone)]
pub struct ParamSet<F: Real> {
    entries: Vec<(String, Tensor<F>)>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        self.entries.push((name.into(), tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor<F> {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<F> {
        &mut self.entries[i].1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn leaves(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf_from(t.shape().to_vec(), t.data().to_vec(), true))
            .collect()
    }

    /// Registers every parameter as a non-differentiable constant.
    pub fn constants(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| tape.constant(t))
            .collect()
    }

    /// Pulls gradients off the tape into the tensors' grad buffers
    /// (additive). `vars` must be the leaves registered from this set.
    pub fn absorb_grads(&mut self, tape: &Tape<F>, vars: &[Var], grads: &crate::tensor::GradMap) {
        for (i, &v) in vars.iter().enumerate() {
            if let Some(gv) = grads.grad(v) {
                let g = tape.value(gv).to_vec();
                self.entries[i].1.accumulate_grad(&g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }

    /// In-place SGD step `p -= lr * grad` using the tensors' grad buffers;
    /// parameters with no gradient are left untouched.
    pub fn sgd_step(&mut self, lr: f64) {
        let lr = F::of(lr);
        for (_, t) in &mut self.entries {
            if let Some(g) = t.grad() {
                let g = g.to_vec();
                for (p, gv) in t.data_mut().iter_mut().zip(g) {
                    *p = *p - lr * gv;
                }
            }
        }
    }

    /// Checks that two sets share the same layout (names and shapes).
    pub fn layout_matches(&self, other: &ParamSet<F>) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((an, at), (bn, bt))| an == bn && at.shape() == bt.shape())
    }
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Interpolation mode for warping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

/// Warps `[B,K,H,W]` image vars through a transform. The bilinear path is
/// differentiable; the nearest path picks the closest source pixel with
/// border clamping (so warped label maps never invent values) and returns a
/// constant.
pub fn warp<F: Real>(
    tape: &mut Tape<F>,
    image: Var,
    transform: &SpatialTransform,
    interp: Interp,
) -> Result<Var> {
    let (h, w) = match tape.shape(image) {
        &[_, _, h, w] => (h, w),
        s => return Err(Error::shape("warp", "[B,K,H,W]", format!("{s:?}"))),
    };
    let grid = transform.to_grid(tape, h, w)?;
    match interp {
        Interp::Bilinear => tape.grid_sample(image, grid),
        Interp::Nearest => {
            let values = nearest_gather(
                tape.value(image),
                tape.value(grid),
                tape.shape(image)[0],
                tape.shape(image)[1],
                h,
                w,
            );
            let shape = tape.shape(image).to_vec();
            Ok(tape.leaf_from(shape, values, false))
        }
    }
}

fn nearest_gather<F: Real>(
    image: &[F],
    grid: &[F],
    b: usize,
    k: usize,
    h: usize,
    w: usize,
) -> Vec<F> {
    let plane = h * w;
    let mut out = vec![F::zero(); b * k * plane];
    for bi in 0..b {
        for p in 0..plane {
            let gx = grid[(bi * plane + p) * 2].f64();
            let gy = grid[(bi * plane + p) * 2 + 1].f64();
            let px = (gx + 1.0) * 0.5 * w as f64 - 0.5;
            let py = (gy + 1.0) * 0.5 * h as f64 - 0.5;
            let ix = ((px + 0.5).floor() as isize).clamp(0, w as isize - 1) as usize;
            let iy = ((py + 0.5).floor() as isize).clamp(0, h as isize - 1) as usize;
            for c in 0..k {
                out[(bi * k + c) * plane + p] = image[(bi * k + c) * plane + iy * w + ix];
            }
        }
    }
    out
}

/// Nearest-warp of an integer label map through grid values (border
/// clamped). Used to co-warp labels with hallucinated images.
pub fn warp_labels_nearest<F: Real>(
    labels: &[u8],
    grid: &[F],
    b: usize,
    h: usize,
    w: usize,
) -> Vec<u8> {
    let plane = h * w;
    let mut out = vec![0u8; b * plane];
    for bi in 0..b {
        for p in 0..plane {
            let gx = grid[(bi * plane + p) * 2].f64();
            let gy = grid[(bi * plane + p) * 2 + 1].f64();
            let px = (gx + 1.0) * 0.5 * w as f64 - 0.5;
            let py = (gy + 1.0) * 0.5 * h as f64 - 0.5;
            let ix = ((px + 0.5).floor() as isize).clamp(0, w as isize - 1) as usize;
            let iy = ((py + 0.5).floor() as isize).clamp(0, h as isize - 1) as usize;
            out[bi * plane + p] = labels[bi * plane + iy * w + ix];
        }
    }
    out
}

/// Identity sampling grid `[B,H,W,2]` as a constant.
pub fn identity_grid<F: Real>(tape: &mut Tape<F>, b: usize, h: usize, w: usize) -> Var {
    let mut data = vec![F::zero(); b * h * w * 2];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let i = ((bi * h + y) * w + x) * 2;
                data[i] = F::of(crate::tensor::norm_coord(x, w));
                data[i + 1] = F::of(crate::tensor::norm_coord(y, h));
            }
        }
    }
    tape.leaf_from(vec![b, h, w, 2], data, false)
}

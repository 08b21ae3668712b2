//! A small 2D U-Net: double-conv encoder blocks with max pooling, a
//! bottleneck, and bilinear-upsample decoder blocks with skip connections.

use rand::Rng;

use super::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Architecture of the segmenter. Parameter count is a pure function of
/// these fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnetDesc {
    pub in_channels: usize,
    pub base: usize,
    pub depth: usize,
    pub classes: usize,
}

impl Default for UnetDesc {
    fn default() -> Self {
        // base 8 keeps the default benchmark within a small CPU budget;
        // scale up via config for larger machines.
        UnetDesc {
            in_channels: 1,
            base: 8,
            depth: 3,
            classes: 5,
        }
    }
}

struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }
}

fn conv_init<F: Real>(
    params: &mut ParamSet<F>,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut impl Rng,
) {
    let fan_in = (c_in * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    params.push(
        format!("{name}.w"),
        Tensor::randn(vec![c_out, c_in, k, k], std, rng),
    );
    params.push(format!("{name}.b"), Tensor::zeros(vec![c_out]));
}

fn norm_init<F: Real>(params: &mut ParamSet<F>, name: &str, c: usize) {
    params.push(format!("{name}.gamma"), Tensor::full(vec![c], F::one()));
    params.push(format!("{name}.beta"), Tensor::zeros(vec![c]));
}

impl UnetDesc {
    fn level_channels(&self, level: usize) -> usize {
        self.base << level
    }

    /// conv3x3 + instance norm + relu, twice.
    fn block_init<F: Real>(
        &self,
        params: &mut ParamSet<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) {
        conv_init(params, &format!("{name}.conv1"), c_in, c_out, 3, rng);
        norm_init(params, &format!("{name}.norm1"), c_out);
        conv_init(params, &format!("{name}.conv2"), c_out, c_out, 3, rng);
        norm_init(params, &format!("{name}.norm2"), c_out);
    }

    pub fn init<F: Real>(&self, rng: &mut impl Rng) -> ParamSet<F> {
        let mut p = ParamSet::new();
        let mut c_prev = self.in_channels;
        for d in 0..self.depth {
            let c = self.level_channels(d);
            self.block_init(&mut p, &format!("enc{d}"), c_prev, c, rng);
            c_prev = c;
        }
        let c_bott = self.level_channels(self.depth);
        self.block_init(&mut p, "bott", c_prev, c_bott, rng);
        let mut c_up = c_bott;
        for d in (0..self.depth).rev() {
            let c = self.level_channels(d);
            conv_init(&mut p, &format!("dec{d}.reduce"), c_up, c, 1, rng);
            self.block_init(&mut p, &format!("dec{d}"), 2 * c, c, rng);
            c_up = c;
        }
        conv_init(&mut p, "head", self.base, self.classes, 1, rng);
        p
    }

    fn block_forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        cur: &mut Cursor,
        x: Var,
    ) -> Result<Var> {
        let (w1, b1) = (cur.next(), cur.next());
        let (g1, be1) = (cur.next(), cur.next());
        let (w2, b2) = (cur.next(), cur.next());
        let (g2, be2) = (cur.next(), cur.next());
        let y = tape.conv2d(x, w1, Some(b1), 1, 1)?;
        let y = tape.instance_norm(y, g1, be1, 1e-5)?;
        let y = tape.relu(y);
        let y = tape.conv2d(y, w2, Some(b2), 1, 1)?;
        let y = tape.instance_norm(y, g2, be2, 1e-5)?;
        Ok(tape.relu(y))
    }

    /// Segmentation logits `[B,C,H,W]` for images `[B,in,H,W]`. H and W
    /// must be divisible by `2^depth`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, params: &[Var], x: Var) -> Result<Var> {
        let (h, w) = match tape.shape(x) {
            &[_, c, h, w] if c == self.in_channels => (h, w),
            s => {
                return Err(Error::shape(
                    "segment",
                    format!("[B,{},H,W]", self.in_channels),
                    format!("{s:?}"),
                ))
            }
        };
        let div = 1usize << self.depth;
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(
                "segment",
                format!("H and W divisible by 2^depth = {div}"),
                format!("{h}x{w}"),
            ));
        }
        let mut cur = Cursor {
            vars: params,
            pos: 0,
        };
        let mut skips = Vec::with_capacity(self.depth);
        let mut y = x;
        for _ in 0..self.depth {
            y = self.block_forward(tape, &mut cur, y)?;
            skips.push(y);
            y = tape.max_pool2d(y)?;
        }
        y = self.block_forward(tape, &mut cur, y)?;
        for d in (0..self.depth).rev() {
            let (rw, rb) = (cur.next(), cur.next());
            y = tape.upsample2x(y)?;
            y = tape.conv2d(y, rw, Some(rb), 1, 0)?;
            y = tape.concat_c(skips[d], y)?;
            y = self.block_forward(tape, &mut cur, y)?;
        }
        let (hw, hb) = (cur.next(), cur.next());
        let logits = tape.conv2d(y, hw, Some(hb), 1, 0)?;
        debug_assert_eq!(cur.pos, params.len(), "unet param count mismatch");
        Ok(logits)
    }

    /// Convenience: forward on a one-off tape from plain tensors, returning
    /// the logits as a tensor. Used by evaluation.
    pub fn segment<F: Real>(&self, params: &ParamSet<F>, images: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let vars = params.constants(&mut tape);
        let x = tape.constant(images);
        let logits = self.forward(&mut tape, &vars, x)?;
        Tensor::from_vec(tape.shape(logits).to_vec(), tape.value(logits).to_vec())
    }
}

//! Reverse-mode differentiation tape.
//!
//! Ops execute eagerly and append a node per result. `backward` walks the
//! recorded nodes in reverse; every VJP is itself a composition of tape ops,
//! so calling `backward` with `create_graph = true` leaves the gradients on
//! the tape as differentiable values — that is what powers optional
//! second-order meta-gradients.

use std::sync::Arc;

use super::kernels::{self, ConvDims, GridDims};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value on the tape. Nodes are append-only, so a var created
/// later always has a larger id — the tape is topologically ordered by
/// construction.
pub type Var = usize;

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Sqrt(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    /// 1 where x > 0 else 0; derivative of relu. Not differentiable further
    /// (zero gradient almost everywhere).
    GtZeroMask(Var),
    /// 1 where x > 0 else `slope`; derivative of leaky relu.
    LeakyMask(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    MaxPool2x2 {
        x: Var,
        indices: Arc<Vec<u32>>,
    },
    PoolGather {
        x: Var,
        indices: Arc<Vec<u32>>,
    },
    PoolScatter {
        s: Var,
        indices: Arc<Vec<u32>>,
        h: usize,
        w: usize,
    },
    Upsample2x(Var),
    Upsample2xT(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    ConvInputVjp {
        g: Var,
        w: Var,
        dims: ConvDims,
    },
    ConvWeightVjp {
        x: Var,
        g: Var,
        dims: ConvDims,
    },
    GridSample {
        x: Var,
        grid: Var,
        dims: GridDims,
    },
    GsScatter {
        s: Var,
        grid: Var,
        dims: GridDims,
    },
    GsGridVjp {
        s: Var,
        x: Var,
        grid: Var,
        dims: GridDims,
    },
    GsDirGather {
        x: Var,
        grid: Var,
        u: Var,
        dims: GridDims,
    },
    GsDirScatter {
        s: Var,
        grid: Var,
        u: Var,
        dims: GridDims,
    },
    GsGridVjpGradGrid {
        s: Var,
        x: Var,
        grid: Var,
        u: Var,
        dims: GridDims,
    },
    MeanAll(Var),
    BroadcastFill(Var),
    SpatialMean(Var),
    BroadcastSpatial(Var),
    ChanSumKeep(Var),
    BroadcastChan(Var),
    ClassSum(Var),
    BroadcastClass(Var),
    ColSum(Var),
    RowBroadcast(Var),
    ConcatC(Var, Var),
    SliceC {
        x: Var,
        from: usize,
        to: usize,
    },
    ConcatB(Var, Var),
    SliceB {
        x: Var,
        from: usize,
        to: usize,
    },
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Reshape(Var),
    AffineGrid {
        theta: Var,
        h: usize,
        w: usize,
    },
    AffineGridT(Var),
    /// `[B,2,H,W]` -> `[B,H,W,2]` layout permutation.
    ToGridLayout(Var),
    /// `[B,H,W,2]` -> `[B,2,H,W]` layout permutation.
    FromGridLayout(Var),
    DiffH(Var),
    DiffHT(Var),
    DiffW(Var),
    DiffWT(Var),
}

struct Node<F: Real> {
    op: Op,
    shape: Vec<usize>,
    value: Vec<F>,
    requires_grad: bool,
}

/// Gradients produced by one `backward` call, indexed by the vars that
/// existed when it was invoked.
pub struct GradMap {
    grads: Vec<Option<Var>>,
}

impl GradMap {
    pub fn grad(&self, v: Var) -> Option<Var> {
        self.grads.get(v).copied().flatten()
    }
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    finalized: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            finalized: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v].value.len()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v].requires_grad
    }

    /// Scalar helper for loss values.
    pub fn scalar_value(&self, v: Var) -> F {
        debug_assert_eq!(self.numel(v), 1);
        self.nodes[v].value[0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<F>, requires_grad: bool) -> Var {
        debug_assert!(
            matches!(op, Op::Leaf) || value.iter().all(|v| v.is_finite()),
            "non-finite output of {op:?}"
        );
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        id
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v].requires_grad
    }

    // ---- leaves ------------------------------------------------------

    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        )
    }

    /// A leaf that never receives gradient, regardless of the tensor flag.
    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(Op::Leaf, shape, data, requires_grad)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.push(Op::Leaf, vec![1], vec![F::of(v)], false)
    }

    fn ones_const(&mut self, shape: Vec<usize>) -> Var {
        let n = shape.iter().product();
        self.push(Op::Leaf, shape, vec![F::one(); n], false)
    }

    fn zeros_const(&mut self, shape: Vec<usize>) -> Var {
        let n = shape.iter().product();
        self.push(Op::Leaf, shape, vec![F::zero(); n], false)
    }

    // ---- shape helpers ------------------------------------------------

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::shape(
                op,
                format!("{:?}", self.nodes[a].shape),
                format!("{:?}", self.nodes[b].shape),
            ));
        }
        Ok(())
    }

    fn dims4(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize, usize)> {
        match self.nodes[v].shape.as_slice() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            s => Err(Error::shape(op, "[B,C,H,W]", format!("{s:?}"))),
        }
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let v: Vec<F> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), self.nodes[a].shape.clone(), v, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let v: Vec<F> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), self.nodes[a].shape.clone(), v, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let v: Vec<F> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), self.nodes[a].shape.clone(), v, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("div", a, b)?;
        let v: Vec<F> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x / y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Div(a, b), self.nodes[a].shape.clone(), v, rg))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v: Vec<F> = self.nodes[a].value.iter().map(|&x| -x).collect();
        let rg = self.rg(a);
        self.push(Op::Neg(a), self.nodes[a].shape.clone(), v, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cf = F::of(c);
        let v: Vec<F> = self.nodes[a].value.iter().map(|&x| x * cf).collect();
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), self.nodes[a].shape.clone(), v, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cf = F::of(c);
        let v: Vec<F> = self.nodes[a].value.iter().map(|&x| x + cf).collect();
        let rg = self.rg(a);
        self.push(Op::AddScalar(a, c), self.nodes[a].shape.clone(), v, rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v: Vec<F> = self.nodes[a].value.iter().map(|&x| x.sqrt()).collect();
        let rg = self.rg(a);
        self.push(Op::Sqrt(a), self.nodes[a].shape.clone(), v, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v: Vec<F> = self.nodes[a]
            .value
            .iter()
            .map(|&x| if x > F::zero() { x } else { F::zero() })
            .collect();
        let rg = self.rg(a);
        self.push(Op::Relu(a), self.nodes[a].shape.clone(), v, rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = F::of(slope);
        let v: Vec<F> = self.nodes[a]
            .value
            .iter()
            .map(|&x| if x > F::zero() { x } else { x * s })
            .collect();
        let rg = self.rg(a);
        self.push(Op::LeakyRelu(a, slope), self.nodes[a].shape.clone(), v, rg)
    }

    fn gt_zero_mask(&mut self, a: Var) -> Var {
        let v: Vec<F> = self.nodes[a]
            .value
            .iter()
            .map(|&x| if x > F::zero() { F::one() } else { F::zero() })
            .collect();
        self.push(Op::GtZeroMask(a), self.nodes[a].shape.clone(), v, false)
    }

    fn leaky_mask(&mut self, a: Var, slope: f64) -> Var {
        let s = F::of(slope);
        let v: Vec<F> = self.nodes[a]
            .value
            .iter()
            .map(|&x| if x > F::zero() { F::one() } else { s })
            .collect();
        self.push(Op::LeakyMask(a, slope), self.nodes[a].shape.clone(), v, false)
    }

    // ---- softmax over the channel axis of [B,C,H,W] --------------------

    fn softmax_values(&self, a: Var, log: bool) -> Result<(Vec<F>, Vec<usize>)> {
        let (b, c, h, w) = self.dims4(if log { "log_softmax" } else { "softmax" }, a)?;
        let x = &self.nodes[a].value;
        let plane = h * w;
        let mut out = vec![F::zero(); x.len()];
        for bi in 0..b {
            for p in 0..plane {
                let at = |ci: usize| (bi * c + ci) * plane + p;
                let mut mx = x[at(0)];
                for ci in 1..c {
                    if x[at(ci)] > mx {
                        mx = x[at(ci)];
                    }
                }
                let mut denom = F::zero();
                for ci in 0..c {
                    denom = denom + (x[at(ci)] - mx).exp();
                }
                if log {
                    let ln = denom.ln();
                    for ci in 0..c {
                        out[at(ci)] = x[at(ci)] - mx - ln;
                    }
                } else {
                    for ci in 0..c {
                        out[at(ci)] = (x[at(ci)] - mx).exp() / denom;
                    }
                }
            }
        }
        Ok((out, self.nodes[a].shape.clone()))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (v, shape) = self.softmax_values(a, false)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Softmax(a), shape, v, rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (v, shape) = self.softmax_values(a, true)?;
        let rg = self.rg(a);
        Ok(self.push(Op::LogSoftmax(a), shape, v, rg))
    }

    // ---- pooling / resampling ------------------------------------------

    pub fn max_pool2d(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = self.dims4("max_pool2d", a)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "max_pool2d",
                "even H and W",
                format!("[{b},{c},{h},{w}]"),
            ));
        }
        let (v, idx) = kernels::maxpool2x2_fwd(&self.nodes[a].value, b * c, h, w);
        let rg = self.rg(a);
        Ok(self.push(
            Op::MaxPool2x2 {
                x: a,
                indices: Arc::new(idx),
            },
            vec![b, c, h / 2, w / 2],
            v,
            rg,
        ))
    }

    pub fn pool_gather(&mut self, a: Var, indices: Arc<Vec<u32>>, oh: usize, ow: usize) -> Result<Var> {
        let (b, c, h, w) = self.dims4("pool_gather", a)?;
        let v = kernels::pool_gather(&self.nodes[a].value, &indices, b * c, h, w);
        let rg = self.rg(a);
        Ok(self.push(
            Op::PoolGather { x: a, indices },
            vec![b, c, oh, ow],
            v,
            rg,
        ))
    }

    pub fn pool_scatter(&mut self, s: Var, indices: Arc<Vec<u32>>, h: usize, w: usize) -> Result<Var> {
        let (b, c, _, _) = self.dims4("pool_scatter", s)?;
        let v = kernels::pool_scatter(&self.nodes[s].value, &indices, b * c, h, w);
        let rg = self.rg(s);
        Ok(self.push(
            Op::PoolScatter {
                s,
                indices,
                h,
                w,
            },
            vec![b, c, h, w],
            v,
            rg,
        ))
    }

    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = self.dims4("upsample_bilinear2x", a)?;
        let v = kernels::upsample2x_fwd(&self.nodes[a].value, b * c, h, w);
        let rg = self.rg(a);
        Ok(self.push(Op::Upsample2x(a), vec![b, c, 2 * h, 2 * w], v, rg))
    }

    fn upsample2x_t(&mut self, s: Var) -> Result<Var> {
        let (b, c, h2, w2) = self.dims4("upsample2x_t", s)?;
        let (h, w) = (h2 / 2, w2 / 2);
        let v = kernels::upsample2x_t(&self.nodes[s].value, b * c, h, w);
        let rg = self.rg(s);
        Ok(self.push(Op::Upsample2xT(s), vec![b, c, h, w], v, rg))
    }

    // ---- convolution -----------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (batch, c_in, h, ww) = self.dims4("conv2d input", x)?;
        let (c_out, wc_in, kh, kw) = self.dims4("conv2d weight", w)?;
        if wc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("weight in-channels {c_in}"),
                format!("{wc_in}"),
            ));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || ww + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} fitting padded input"),
                format!("input {h}x{ww} pad {pad}"),
            ));
        }
        if let Some(b) = b {
            if self.nodes[b].shape != [c_out] {
                return Err(Error::shape(
                    "conv2d bias",
                    format!("[{c_out}]"),
                    format!("{:?}", self.nodes[b].shape),
                ));
            }
        }
        let dims = ConvDims {
            batch,
            c_in,
            h,
            w: ww,
            c_out,
            kh,
            kw,
            stride,
            pad,
        };
        let v = kernels::conv2d_fwd(
            &self.nodes[x].value,
            &self.nodes[w].value,
            b.map(|bv| self.nodes[bv].value.as_slice()),
            &dims,
        );
        let rg = self.rg(x) || self.rg(w) || b.map(|bv| self.rg(bv)).unwrap_or(false);
        Ok(self.push(
            Op::Conv2d { x, w, b, dims },
            vec![batch, c_out, dims.out_h(), dims.out_w()],
            v,
            rg,
        ))
    }

    pub fn conv_input_vjp(&mut self, g: Var, w: Var, dims: ConvDims) -> Result<Var> {
        let v = kernels::conv2d_input_vjp(&self.nodes[g].value, &self.nodes[w].value, &dims);
        let rg = self.rg(g) || self.rg(w);
        Ok(self.push(
            Op::ConvInputVjp { g, w, dims },
            vec![dims.batch, dims.c_in, dims.h, dims.w],
            v,
            rg,
        ))
    }

    pub fn conv_weight_vjp(&mut self, x: Var, g: Var, dims: ConvDims) -> Result<Var> {
        let v = kernels::conv2d_weight_vjp(&self.nodes[x].value, &self.nodes[g].value, &dims);
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(
            Op::ConvWeightVjp { x, g, dims },
            vec![dims.c_out, dims.c_in, dims.kh, dims.kw],
            v,
            rg,
        ))
    }

    // ---- grid sampling ---------------------------------------------------

    pub fn grid_sample(&mut self, x: Var, grid: Var) -> Result<Var> {
        let (batch, channels, h, w) = self.dims4("grid_sample input", x)?;
        let dims = match self.nodes[grid].shape.as_slice() {
            &[gb, gh, gw, 2] if gb == batch => GridDims {
                batch,
                channels,
                h,
                w,
                gh,
                gw,
            },
            s => {
                return Err(Error::shape(
                    "grid_sample grid",
                    format!("[{batch},H,W,2]"),
                    format!("{s:?}"),
                ))
            }
        };
        let v = kernels::grid_sample_fwd(&self.nodes[x].value, &self.nodes[grid].value, &dims);
        let rg = self.rg(x) || self.rg(grid);
        Ok(self.push(
            Op::GridSample { x, grid, dims },
            vec![batch, channels, dims.gh, dims.gw],
            v,
            rg,
        ))
    }

    pub fn gs_scatter(&mut self, s: Var, grid: Var, dims: GridDims) -> Result<Var> {
        let v = kernels::gs_scatter(&self.nodes[s].value, &self.nodes[grid].value, &dims);
        let rg = self.rg(s) || self.rg(grid);
        Ok(self.push(
            Op::GsScatter { s, grid, dims },
            vec![dims.batch, dims.channels, dims.h, dims.w],
            v,
            rg,
        ))
    }

    pub fn gs_grid_vjp(&mut self, s: Var, x: Var, grid: Var, dims: GridDims) -> Result<Var> {
        let v = kernels::gs_grid_vjp(
            &self.nodes[s].value,
            &self.nodes[x].value,
            &self.nodes[grid].value,
            &dims,
        );
        let rg = self.rg(s) || self.rg(x) || self.rg(grid);
        Ok(self.push(
            Op::GsGridVjp { s, x, grid, dims },
            vec![dims.batch, dims.gh, dims.gw, 2],
            v,
            rg,
        ))
    }

    fn gs_dir_gather(&mut self, x: Var, grid: Var, u: Var, dims: GridDims) -> Result<Var> {
        let v = kernels::gs_dir_gather(
            &self.nodes[x].value,
            &self.nodes[grid].value,
            &self.nodes[u].value,
            &dims,
        );
        let rg = self.rg(x) || self.rg(grid) || self.rg(u);
        Ok(self.push(
            Op::GsDirGather { x, grid, u, dims },
            vec![dims.batch, dims.channels, dims.gh, dims.gw],
            v,
            rg,
        ))
    }

    fn gs_dir_scatter(&mut self, s: Var, grid: Var, u: Var, dims: GridDims) -> Result<Var> {
        let v = kernels::gs_dir_scatter(
            &self.nodes[s].value,
            &self.nodes[grid].value,
            &self.nodes[u].value,
            &dims,
        );
        let rg = self.rg(s) || self.rg(grid) || self.rg(u);
        Ok(self.push(
            Op::GsDirScatter { s, grid, u, dims },
            vec![dims.batch, dims.channels, dims.h, dims.w],
            v,
            rg,
        ))
    }

    fn gs_grid_vjp_grad_grid(
        &mut self,
        s: Var,
        x: Var,
        grid: Var,
        u: Var,
        dims: GridDims,
    ) -> Result<Var> {
        let v = kernels::gs_grid_vjp_grad_grid(
            &self.nodes[s].value,
            &self.nodes[x].value,
            &self.nodes[grid].value,
            &self.nodes[u].value,
            &dims,
        );
        let rg = self.rg(s) || self.rg(x) || self.rg(grid) || self.rg(u);
        Ok(self.push(
            Op::GsGridVjpGradGrid { s, x, grid, u, dims },
            vec![dims.batch, dims.gh, dims.gw, 2],
            v,
            rg,
        ))
    }

    // ---- reductions and broadcasts ---------------------------------------

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a].value.len();
        let mut acc = F::zero();
        for &v in &self.nodes[a].value {
            acc = acc + v;
        }
        let v = acc / F::of(n as f64);
        let rg = self.rg(a);
        self.push(Op::MeanAll(a), vec![1], vec![v], rg)
    }

    pub fn broadcast_fill(&mut self, s: Var, shape: Vec<usize>) -> Result<Var> {
        if self.numel(s) != 1 {
            return Err(Error::NotScalar {
                context: "broadcast_fill",
                numel: self.numel(s),
            });
        }
        let n: usize = shape.iter().product();
        let v = vec![self.nodes[s].value[0]; n];
        let rg = self.rg(s);
        Ok(self.push(Op::BroadcastFill(s), shape, v, rg))
    }

    /// `[B,C,H,W]` -> `[B,C]`: mean over the spatial plane.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = self.dims4("spatial_mean", a)?;
        let plane = h * w;
        let inv = F::of(1.0 / plane as f64);
        let x = &self.nodes[a].value;
        let mut out = vec![F::zero(); b * c];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = F::zero();
            for p in 0..plane {
                acc = acc + x[i * plane + p];
            }
            *o = acc * inv;
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SpatialMean(a), vec![b, c], out, rg))
    }

    /// `[B,C]` -> `[B,C,H,W]`: replicate over the spatial plane.
    pub fn broadcast_spatial(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let shape = self.nodes[a].shape.clone();
        let (b, c) = match shape.as_slice() {
            &[b, c] => (b, c),
            s => return Err(Error::shape("broadcast_spatial", "[B,C]", format!("{s:?}"))),
        };
        let plane = h * w;
        let mut out = vec![F::zero(); b * c * plane];
        for i in 0..b * c {
            let v = self.nodes[a].value[i];
            out[i * plane..(i + 1) * plane].fill(v);
        }
        let rg = self.rg(a);
        Ok(self.push(Op::BroadcastSpatial(a), vec![b, c, h, w], out, rg))
    }

    /// `[B,C,H,W]` -> `[B,1,H,W]`: sum over channels.
    pub fn chan_sum_keep(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = self.dims4("chan_sum_keep", a)?;
        let plane = h * w;
        let x = &self.nodes[a].value;
        let mut out = vec![F::zero(); b * plane];
        for bi in 0..b {
            for ci in 0..c {
                let src = &x[(bi * c + ci) * plane..][..plane];
                let dst = &mut out[bi * plane..][..plane];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = *o + v;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::ChanSumKeep(a), vec![b, 1, h, w], out, rg))
    }

    /// `[B,1,H,W]` -> `[B,C,H,W]`: replicate over channels.
    pub fn broadcast_chan(&mut self, a: Var, c: usize) -> Result<Var> {
        let (b, c1, h, w) = self.dims4("broadcast_chan", a)?;
        if c1 != 1 {
            return Err(Error::shape(
                "broadcast_chan",
                "[B,1,H,W]",
                format!("{:?}", self.nodes[a].shape),
            ));
        }
        let plane = h * w;
        let x = &self.nodes[a].value;
        let mut out = vec![F::zero(); b * c * plane];
        for bi in 0..b {
            let src = &x[bi * plane..][..plane];
            for ci in 0..c {
                out[(bi * c + ci) * plane..][..plane].copy_from_slice(src);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::BroadcastChan(a), vec![b, c, h, w], out, rg))
    }

    /// `[B,C,H,W]` -> `[C]`: sum over batch and space.
    pub fn class_sum(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = self.dims4("class_sum", a)?;
        let plane = h * w;
        let x = &self.nodes[a].value;
        let mut out = vec![F::zero(); c];
        for bi in 0..b {
            for (ci, o) in out.iter_mut().enumerate() {
                let src = &x[(bi * c + ci) * plane..][..plane];
                let mut acc = F::zero();
                for &v in src {
                    acc = acc + v;
                }
                *o = *o + acc;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::ClassSum(a), vec![c], out, rg))
    }

    /// `[C]` -> `[B,C,H,W]`: replicate per class.
    pub fn broadcast_class(&mut self, a: Var, b: usize, h: usize, w: usize) -> Result<Var> {
        let c = match self.nodes[a].shape.as_slice() {
            &[c] => c,
            s => return Err(Error::shape("broadcast_class", "[C]", format!("{s:?}"))),
        };
        let plane = h * w;
        let mut out = vec![F::zero(); b * c * plane];
        for bi in 0..b {
            for ci in 0..c {
                out[(bi * c + ci) * plane..][..plane].fill(self.nodes[a].value[ci]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::BroadcastClass(a), vec![b, c, h, w], out, rg))
    }

    /// `[N,K]` -> `[K]`: sum over rows.
    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        let (n, k) = match self.nodes[a].shape.as_slice() {
            &[n, k] => (n, k),
            s => return Err(Error::shape("col_sum", "[N,K]", format!("{s:?}"))),
        };
        let x = &self.nodes[a].value;
        let mut out = vec![F::zero(); k];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(&x[i * k..(i + 1) * k]) {
                *o = *o + v;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::ColSum(a), vec![k], out, rg))
    }

    /// `[K]` -> `[N,K]`: replicate the row.
    pub fn row_broadcast(&mut self, a: Var, n: usize) -> Result<Var> {
        let k = match self.nodes[a].shape.as_slice() {
            &[k] => k,
            s => return Err(Error::shape("row_broadcast", "[K]", format!("{s:?}"))),
        };
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(&self.nodes[a].value);
        }
        let rg = self.rg(a);
        Ok(self.push(Op::RowBroadcast(a), vec![n, k], out, rg))
    }

    // ---- layout ----------------------------------------------------------

    pub fn concat_c(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.dims4("concat", a)?;
        let (bb, cb, hb, wb) = self.dims4("concat", b)?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::shape(
                "concat",
                format!("[{ba},*,{ha},{wa}]"),
                format!("[{bb},*,{hb},{wb}]"),
            ));
        }
        let plane = ha * wa;
        let mut out = Vec::with_capacity((ca + cb) * ba * plane);
        for bi in 0..ba {
            out.extend_from_slice(&self.nodes[a].value[bi * ca * plane..(bi + 1) * ca * plane]);
            out.extend_from_slice(&self.nodes[b].value[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::ConcatC(a, b), vec![ba, ca + cb, ha, wa], out, rg))
    }

    pub fn slice_c(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let (b, c, h, w) = self.dims4("slice_c", a)?;
        if from >= to || to > c {
            return Err(Error::shape(
                "slice_c",
                format!("0 <= from < to <= {c}"),
                format!("{from}..{to}"),
            ));
        }
        let plane = h * w;
        let cc = to - from;
        let mut out = Vec::with_capacity(b * cc * plane);
        for bi in 0..b {
            out.extend_from_slice(
                &self.nodes[a].value[(bi * c + from) * plane..(bi * c + to) * plane],
            );
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SliceC { x: a, from, to }, vec![b, cc, h, w], out, rg))
    }

    /// Concatenates along the leading (batch) axis; trailing dims must match.
    pub fn concat_b(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a].shape.clone();
        let sb = self.nodes[b].shape.clone();
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return Err(Error::shape("concat_b", format!("{sa:?}"), format!("{sb:?}")));
        }
        let mut out = Vec::with_capacity(self.numel(a) + self.numel(b));
        out.extend_from_slice(&self.nodes[a].value);
        out.extend_from_slice(&self.nodes[b].value);
        let mut shape = sa.clone();
        shape[0] = sa[0] + sb[0];
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::ConcatB(a, b), shape, out, rg))
    }

    /// Concatenates several vars along the leading axis.
    pub fn concat_vec(&mut self, parts: &[Var]) -> Result<Var> {
        let mut it = parts.iter();
        let mut acc = *it
            .next()
            .ok_or_else(|| Error::Config("concat_vec needs at least one input".into()))?;
        for &v in it {
            acc = self.concat_b(acc, v)?;
        }
        Ok(acc)
    }

    /// Slice of the leading (batch) axis, `from..to`.
    pub fn slice_b(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let shape = self.nodes[a].shape.clone();
        let n = shape[0];
        if from >= to || to > n {
            return Err(Error::shape(
                "slice_b",
                format!("0 <= from < to <= {n}"),
                format!("{from}..{to}"),
            ));
        }
        let item: usize = shape[1..].iter().product();
        let out = self.nodes[a].value[from * item..to * item].to_vec();
        let mut oshape = shape;
        oshape[0] = to - from;
        let rg = self.rg(a);
        Ok(self.push(Op::SliceB { x: a, from, to }, oshape, out, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.numel(a) {
            return Err(Error::shape(
                "reshape",
                format!("numel {}", self.numel(a)),
                format!("{shape:?}"),
            ));
        }
        let v = self.nodes[a].value.clone();
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), shape, v, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ra, ca) = match self.nodes[a].shape.as_slice() {
            &[r, c] => (r, c),
            s => return Err(Error::shape("matmul lhs", "[M,K]", format!("{s:?}"))),
        };
        let (rb, cb) = match self.nodes[b].shape.as_slice() {
            &[r, c] => (r, c),
            s => return Err(Error::shape("matmul rhs", "[K,N]", format!("{s:?}"))),
        };
        let (m, k1) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k1 != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner {k1}"),
                format!("{k2}"),
            ));
        }
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        let mut out = vec![F::zero(); m * n];
        let a_at = |i: usize, l: usize| if ta { av[l * ca + i] } else { av[i * ca + l] };
        for i in 0..m {
            for l in 0..k1 {
                let x = a_at(i, l);
                if x == F::zero() {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                if tb {
                    for (j, o) in out_row.iter_mut().enumerate() {
                        *o = *o + x * bv[j * cb + l];
                    }
                } else {
                    for (o, &bvv) in out_row.iter_mut().zip(&bv[l * cb..(l + 1) * cb]) {
                        *o = *o + x * bvv;
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Matmul { a, b, ta, tb }, vec![m, n], out, rg))
    }

    pub fn affine_grid(&mut self, theta: Var, h: usize, w: usize) -> Result<Var> {
        let b = match self.nodes[theta].shape.as_slice() {
            &[b, 6] => b,
            s => return Err(Error::shape("affine_grid", "[B,6]", format!("{s:?}"))),
        };
        let v = kernels::affine_grid(&self.nodes[theta].value, b, h, w);
        let rg = self.rg(theta);
        Ok(self.push(Op::AffineGrid { theta, h, w }, vec![b, h, w, 2], v, rg))
    }

    fn affine_grid_t(&mut self, g: Var) -> Result<Var> {
        let (b, h, w) = match self.nodes[g].shape.as_slice() {
            &[b, h, w, 2] => (b, h, w),
            s => return Err(Error::shape("affine_grid_t", "[B,H,W,2]", format!("{s:?}"))),
        };
        let v = kernels::affine_grid_t(&self.nodes[g].value, b, h, w);
        let rg = self.rg(g);
        Ok(self.push(Op::AffineGridT(g), vec![b, 6], v, rg))
    }

    /// `[B,2,H,W]` -> `[B,H,W,2]`.
    pub fn to_grid_layout(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = self.dims4("to_grid_layout", a)?;
        if c != 2 {
            return Err(Error::shape(
                "to_grid_layout",
                "[B,2,H,W]",
                format!("{:?}", self.nodes[a].shape),
            ));
        }
        let plane = h * w;
        let x = &self.nodes[a].value;
        let mut out = vec![F::zero(); b * plane * 2];
        for bi in 0..b {
            for p in 0..plane {
                out[(bi * plane + p) * 2] = x[(bi * 2) * plane + p];
                out[(bi * plane + p) * 2 + 1] = x[(bi * 2 + 1) * plane + p];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::ToGridLayout(a), vec![b, h, w, 2], out, rg))
    }

    /// `[B,H,W,2]` -> `[B,2,H,W]`.
    pub fn from_grid_layout(&mut self, a: Var) -> Result<Var> {
        let (b, h, w) = match self.nodes[a].shape.as_slice() {
            &[b, h, w, 2] => (b, h, w),
            s => return Err(Error::shape("from_grid_layout", "[B,H,W,2]", format!("{s:?}"))),
        };
        let plane = h * w;
        let x = &self.nodes[a].value;
        let mut out = vec![F::zero(); b * 2 * plane];
        for bi in 0..b {
            for p in 0..plane {
                out[(bi * 2) * plane + p] = x[(bi * plane + p) * 2];
                out[(bi * 2 + 1) * plane + p] = x[(bi * plane + p) * 2 + 1];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::FromGridLayout(a), vec![b, 2, h, w], out, rg))
    }

    /// Forward difference along H: `out[h] = x[h+1] - x[h]`, `H-1` rows.
    pub fn diff_h(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = self.dims4("diff_h", a)?;
        let x = &self.nodes[a].value;
        let mut out = vec![F::zero(); b * c * (h - 1) * w];
        for pl in 0..b * c {
            let src = &x[pl * h * w..][..h * w];
            let dst = &mut out[pl * (h - 1) * w..][..(h - 1) * w];
            for y in 0..h - 1 {
                for xx in 0..w {
                    dst[y * w + xx] = src[(y + 1) * w + xx] - src[y * w + xx];
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::DiffH(a), vec![b, c, h - 1, w], out, rg))
    }

    fn diff_h_t(&mut self, s: Var) -> Result<Var> {
        let (b, c, hm1, w) = self.dims4("diff_h_t", s)?;
        let h = hm1 + 1;
        let x = &self.nodes[s].value;
        let mut out = vec![F::zero(); b * c * h * w];
        for pl in 0..b * c {
            let src = &x[pl * hm1 * w..][..hm1 * w];
            let dst = &mut out[pl * h * w..][..h * w];
            for y in 0..hm1 {
                for xx in 0..w {
                    let v = src[y * w + xx];
                    dst[(y + 1) * w + xx] = dst[(y + 1) * w + xx] + v;
                    dst[y * w + xx] = dst[y * w + xx] - v;
                }
            }
        }
        let rg = self.rg(s);
        Ok(self.push(Op::DiffHT(s), vec![b, c, h, w], out, rg))
    }

    /// Forward difference along W: `out[w] = x[w+1] - x[w]`, `W-1` cols.
    pub fn diff_w(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = self.dims4("diff_w", a)?;
        let x = &self.nodes[a].value;
        let mut out = vec![F::zero(); b * c * h * (w - 1)];
        for pl in 0..b * c {
            let src = &x[pl * h * w..][..h * w];
            let dst = &mut out[pl * h * (w - 1)..][..h * (w - 1)];
            for y in 0..h {
                for xx in 0..w - 1 {
                    dst[y * (w - 1) + xx] = src[y * w + xx + 1] - src[y * w + xx];
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::DiffW(a), vec![b, c, h, w - 1], out, rg))
    }

    fn diff_w_t(&mut self, s: Var) -> Result<Var> {
        let (b, c, h, wm1) = self.dims4("diff_w_t", s)?;
        let w = wm1 + 1;
        let x = &self.nodes[s].value;
        let mut out = vec![F::zero(); b * c * h * w];
        for pl in 0..b * c {
            let src = &x[pl * h * wm1..][..h * wm1];
            let dst = &mut out[pl * h * w..][..h * w];
            for y in 0..h {
                for xx in 0..wm1 {
                    let v = src[y * wm1 + xx];
                    dst[y * w + xx + 1] = dst[y * w + xx + 1] + v;
                    dst[y * w + xx] = dst[y * w + xx] - v;
                }
            }
        }
        let rg = self.rg(s);
        Ok(self.push(Op::DiffWT(s), vec![b, c, h, w], out, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates `delta` into the gradient slot of `idx`, summing on
    /// collision so gradients remain additive across uses.
    fn accum(&mut self, grads: &mut [Option<Var>], idx: Var, delta: Var) -> Result<()> {
        grads[idx] = Some(match grads[idx] {
            None => delta,
            Some(prev) => self.add(prev, delta)?,
        });
        Ok(())
    }

    /// Reverse pass from a scalar loss. Returns a gradient var per input var
    /// (`None` where no gradient flows). With `create_graph` the returned
    /// gradients stay differentiable; without it the tape is finalized and a
    /// second backward is an error.
    pub fn backward(&mut self, loss: Var, create_graph: bool) -> Result<GradMap> {
        if self.finalized {
            return Err(Error::BackwardTwice);
        }
        if self.numel(loss) != 1 {
            return Err(Error::NotScalar {
                context: "backward",
                numel: self.numel(loss),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Var>> = vec![None; n];
        grads[loss] = Some(self.ones_const(vec![1]));

        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            self.vjp(i, &op, g, &mut grads)?;
        }
        if !create_graph {
            self.finalized = true;
        }
        Ok(GradMap { grads })
    }

    /// Emits the VJP of node `out` (with op `op`) given upstream `g`,
    /// accumulating into `grads` for each differentiable input. Every VJP is
    /// built from tape ops, which is what makes double backward work.
    fn vjp(&mut self, out: Var, op: &Op, g: Var, grads: &mut [Option<Var>]) -> Result<()> {
        match *op {
            Op::Leaf | Op::GtZeroMask(_) | Op::LeakyMask(_, _) => {}
            Op::Add(a, b) => {
                if self.rg(a) {
                    self.accum(grads, a, g)?;
                }
                if self.rg(b) {
                    self.accum(grads, b, g)?;
                }
            }
            Op::Sub(a, b) => {
                if self.rg(a) {
                    self.accum(grads, a, g)?;
                }
                if self.rg(b) {
                    let d = self.neg(g);
                    self.accum(grads, b, d)?;
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let d = self.mul(g, b)?;
                    self.accum(grads, a, d)?;
                }
                if self.rg(b) {
                    let d = self.mul(g, a)?;
                    self.accum(grads, b, d)?;
                }
            }
            Op::Div(a, b) => {
                if self.rg(a) {
                    let d = self.div(g, b)?;
                    self.accum(grads, a, d)?;
                }
                if self.rg(b) {
                    // d/db (a/b) = -a/b^2 = -out/b
                    let gy = self.mul(g, out)?;
                    let d0 = self.div(gy, b)?;
                    let d = self.neg(d0);
                    self.accum(grads, b, d)?;
                }
            }
            Op::Neg(a) => {
                if self.rg(a) {
                    let d = self.neg(g);
                    self.accum(grads, a, d)?;
                }
            }
            Op::Scale(a, c) => {
                if self.rg(a) {
                    let d = self.scale(g, c);
                    self.accum(grads, a, d)?;
                }
            }
            Op::AddScalar(a, _) => {
                if self.rg(a) {
                    self.accum(grads, a, g)?;
                }
            }
            Op::Sqrt(a) => {
                if self.rg(a) {
                    let two = self.scale(out, 2.0);
                    let d = self.div(g, two)?;
                    self.accum(grads, a, d)?;
                }
            }
            Op::Relu(a) => {
                if self.rg(a) {
                    let m = self.gt_zero_mask(a);
                    let d = self.mul(g, m)?;
                    self.accum(grads, a, d)?;
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.rg(a) {
                    let m = self.leaky_mask(a, slope);
                    let d = self.mul(g, m)?;
                    self.accum(grads, a, d)?;
                }
            }
            Op::Softmax(a) => {
                if self.rg(a) {
                    // gin = y * (g - bcast(sum_c g*y))
                    let gy = self.mul(g, out)?;
                    let s = self.chan_sum_keep(gy)?;
                    let c = self.shape(out)[1];
                    let sb = self.broadcast_chan(s, c)?;
                    let gm = self.sub(g, sb)?;
                    let d = self.mul(out, gm)?;
                    self.accum(grads, a, d)?;
                }
            }
            Op::LogSoftmax(a) => {
                if self.rg(a) {
                    // gin = g - softmax(x) * bcast(sum_c g)
                    let p = self.softmax(a)?;
                    let s = self.chan_sum_keep(g)?;
                    let c = self.shape(out)[1];
                    let sb = self.broadcast_chan(s, c)?;
                    let t = self.mul(p, sb)?;
                    let d = self.sub(g, t)?;
                    self.accum(grads, a, d)?;
                }
            }
            Op::MaxPool2x2 { x, ref indices } => {
                if self.rg(x) {
                    let (h, w) = (self.shape(x)[2], self.shape(x)[3]);
                    let d = self.pool_scatter(g, indices.clone(), h, w)?;
                    self.accum(grads, x, d)?;
                }
            }
            Op::PoolGather { x, ref indices } => {
                if self.rg(x) {
                    let (h, w) = (self.shape(x)[2], self.shape(x)[3]);
                    let d = self.pool_scatter(g, indices.clone(), h, w)?;
                    self.accum(grads, x, d)?;
                }
            }
            Op::PoolScatter { s, ref indices, .. } => {
                if self.rg(s) {
                    let (oh, ow) = (self.shape(s)[2], self.shape(s)[3]);
                    let d = self.pool_gather(g, indices.clone(), oh, ow)?;
                    self.accum(grads, s, d)?;
                }
            }
            Op::Upsample2x(a) => {
                if self.rg(a) {
                    let d = self.upsample2x_t(g)?;
                    self.accum(grads, a, d)?;
                }
            }
            Op::Upsample2xT(s) => {
                if self.rg(s) {
                    let d = self.upsample2x(g)?;
                    self.accum(grads, s, d)?;
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                if self.rg(x) {
                    let d = self.conv_input_vjp(g, w, dims)?;
                    self.accum(grads, x, d)?;
                }
                if self.rg(w) {
                    let d = self.conv_weight_vjp(x, g, dims)?;
                    self.accum(grads, w, d)?;
                }
                if let Some(b) = b {
                    if self.rg(b) {
                        let d = self.class_sum(g)?;
                        self.accum(grads, b, d)?;
                    }
                }
            }
            Op::ConvInputVjp { g: g0, w, dims } => {
                if self.rg(g0) {
                    let d = self.conv2d(g, w, None, dims.stride, dims.pad)?;
                    self.accum(grads, g0, d)?;
                }
                if self.rg(w) {
                    let d = self.conv_weight_vjp(g, g0, dims)?;
                    self.accum(grads, w, d)?;
                }
            }
            Op::ConvWeightVjp { x, g: g0, dims } => {
                if self.rg(x) {
                    let d = self.conv_input_vjp(g0, g, dims)?;
                    self.accum(grads, x, d)?;
                }
                if self.rg(g0) {
                    let d = self.conv2d(x, g, None, dims.stride, dims.pad)?;
                    self.accum(grads, g0, d)?;
                }
            }
            Op::GridSample { x, grid, dims } => {
                if self.rg(x) {
                    let d = self.gs_scatter(g, grid, dims)?;
                    self.accum(grads, x, d)?;
                }
                if self.rg(grid) {
                    let d = self.gs_grid_vjp(g, x, grid, dims)?;
                    self.accum(grads, grid, d)?;
                }
            }
            Op::GsScatter { s, grid, dims } => {
                if self.rg(s) {
                    let d = self.grid_sample(g, grid)?;
                    self.accum(grads, s, d)?;
                }
                if self.rg(grid) {
                    let d = self.gs_grid_vjp(s, g, grid, dims)?;
                    self.accum(grads, grid, d)?;
                }
            }
            Op::GsGridVjp { s, x, grid, dims } => {
                if self.rg(s) {
                    let d = self.gs_dir_gather(x, grid, g, dims)?;
                    self.accum(grads, s, d)?;
                }
                if self.rg(x) {
                    let d = self.gs_dir_scatter(s, grid, g, dims)?;
                    self.accum(grads, x, d)?;
                }
                if self.rg(grid) {
                    let d = self.gs_grid_vjp_grad_grid(s, x, grid, g, dims)?;
                    self.accum(grads, grid, d)?;
                }
            }
            Op::GsDirGather { .. } | Op::GsDirScatter { .. } | Op::GsGridVjpGradGrid { .. } => {
                return Err(Error::Config(
                    "third-order gradients through grid sampling are not supported".into(),
                ));
            }
            Op::MeanAll(a) => {
                if self.rg(a) {
                    let shape = self.shape(a).to_vec();
                    let n: usize = shape.iter().product();
                    let bf = self.broadcast_fill(g, shape)?;
                    let d = self.scale(bf, 1.0 / n as f64);
                    self.accum(grads, a, d)?;
                }
            }
            Op::BroadcastFill(s) => {
                if self.rg(s) {
                    let n = self.numel(out) as f64;
                    let m = self.mean_all(g);
                    let d = self.scale(m, n);
                    self.accum(grads, s, d)?;
                }
            }
            Op::SpatialMean(a) => {
                if self.rg(a) {
                    let (h, w) = (self.shape(a)[2], self.shape(a)[3]);
                    let bs = self.broadcast_spatial(g, h, w)?;
                    let d = self.scale(bs, 1.0 / (h * w) as f64);
                    self.accum(grads, a, d)?;
                }
            }
            Op::BroadcastSpatial(a) => {
                if self.rg(a) {
                    let (h, w) = (self.shape(out)[2], self.shape(out)[3]);
                    let sm = self.spatial_mean(g)?;
                    let d = self.scale(sm, (h * w) as f64);
                    self.accum(grads, a, d)?;
                }
            }
            Op::ChanSumKeep(a) => {
                if self.rg(a) {
                    let c = self.shape(a)[1];
                    let d = self.broadcast_chan(g, c)?;
                    self.accum(grads, a, d)?;
                }
            }
            Op::BroadcastChan(a) => {
                if self.rg(a) {
                    let d = self.chan_sum_keep(g)?;
                    self.accum(grads, a, d)?;
                }
            }
            Op::ClassSum(a) => {
                if self.rg(a) {
                    let (b, h, w) = (self.shape(a)[0], self.shape(a)[2], self.shape(a)[3]);
                    let d = self.broadcast_class(g, b, h, w)?;
                    self.accum(grads, a, d)?;
                }
            }
            Op::BroadcastClass(a) => {
                if self.rg(a) {
                    let d = self.class_sum(g)?;
                    self.accum(grads, a, d)?;
                }
            }
            Op::ColSum(a) => {
                if self.rg(a) {
                    let n = self.shape(a)[0];
                    let d = self.row_broadcast(g, n)?;
                    self.accum(grads, a, d)?;
                }
            }
            Op::RowBroadcast(a) => {
                if self.rg(a) {
                    let d = self.col_sum(g)?;
                    self.accum(grads, a, d)?;
                }
            }
            Op::ConcatC(a, b) => {
                let ca = self.shape(a)[1];
                let ct = self.shape(out)[1];
                if self.rg(a) {
                    let d = self.slice_c(g, 0, ca)?;
                    self.accum(grads, a, d)?;
                }
                if self.rg(b) {
                    let d = self.slice_c(g, ca, ct)?;
                    self.accum(grads, b, d)?;
                }
            }
            Op::SliceC { x, from, to } => {
                if self.rg(x) {
                    let (b, c, h, w) = self.dims4("slice_c vjp", x)?;
                    let mut d = g;
                    if from > 0 {
                        let z = self.zeros_const(vec![b, from, h, w]);
                        d = self.concat_c(z, d)?;
                    }
                    if to < c {
                        let z = self.zeros_const(vec![b, c - to, h, w]);
                        d = self.concat_c(d, z)?;
                    }
                    self.accum(grads, x, d)?;
                }
            }
            Op::ConcatB(a, b) => {
                let na = self.shape(a)[0];
                let nt = self.shape(out)[0];
                if self.rg(a) {
                    let d = self.slice_b(g, 0, na)?;
                    self.accum(grads, a, d)?;
                }
                if self.rg(b) {
                    let d = self.slice_b(g, na, nt)?;
                    self.accum(grads, b, d)?;
                }
            }
            Op::SliceB { x, from, to } => {
                if self.rg(x) {
                    let shape = self.shape(x).to_vec();
                    let n = shape[0];
                    let mut d = g;
                    if from > 0 {
                        let mut zs = shape.clone();
                        zs[0] = from;
                        let z = self.zeros_const(zs);
                        d = self.concat_b(z, d)?;
                    }
                    if to < n {
                        let mut zs = shape.clone();
                        zs[0] = n - to;
                        let z = self.zeros_const(zs);
                        d = self.concat_b(d, z)?;
                    }
                    self.accum(grads, x, d)?;
                }
            }
            Op::Matmul { a, b, ta, tb } => {
                if self.rg(a) {
                    let d = if !ta {
                        self.matmul(g, b, false, !tb)?
                    } else {
                        self.matmul(b, g, tb, true)?
                    };
                    self.accum(grads, a, d)?;
                }
                if self.rg(b) {
                    let d = if !tb {
                        self.matmul(a, g, !ta, false)?
                    } else {
                        self.matmul(g, a, true, ta)?
                    };
                    self.accum(grads, b, d)?;
                }
            }
            Op::Reshape(a) => {
                if self.rg(a) {
                    let shape = self.shape(a).to_vec();
                    let d = self.reshape(g, shape)?;
                    self.accum(grads, a, d)?;
                }
            }
            Op::AffineGrid { theta, .. } => {
                if self.rg(theta) {
                    let d = self.affine_grid_t(g)?;
                    self.accum(grads, theta, d)?;
                }
            }
            Op::AffineGridT(g0) => {
                if self.rg(g0) {
                    let (h, w) = (self.shape(g0)[1], self.shape(g0)[2]);
                    let d = self.affine_grid(g, h, w)?;
                    self.accum(grads, g0, d)?;
                }
            }
            Op::ToGridLayout(a) => {
                if self.rg(a) {
                    let d = self.from_grid_layout(g)?;
                    self.accum(grads, a, d)?;
                }
            }
            Op::FromGridLayout(a) => {
                if self.rg(a) {
                    let d = self.to_grid_layout(g)?;
                    self.accum(grads, a, d)?;
                }
            }
            Op::DiffH(a) => {
                if self.rg(a) {
                    let d = self.diff_h_t(g)?;
                    self.accum(grads, a, d)?;
                }
            }
            Op::DiffHT(s) => {
                if self.rg(s) {
                    let d = self.diff_h(g)?;
                    self.accum(grads, s, d)?;
                }
            }
            Op::DiffW(a) => {
                if self.rg(a) {
                    let d = self.diff_w_t(g)?;
                    self.accum(grads, a, d)?;
                }
            }
            Op::DiffWT(s) => {
                if self.rg(s) {
                    let d = self.diff_w(g)?;
                    self.accum(grads, s, d)?;
                }
            }
        }
        Ok(())
    }
}

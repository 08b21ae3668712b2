//! Numeric kernels behind the tape ops.
//!
//! All kernels are pure functions over row-major buffers. Shape checking
//! happens in the tape builders; kernels assume consistent dimensions.
//! Parallel loops split over independent output slices only, so results are
//! bit-identical regardless of thread count.

use rayon::prelude::*;

use super::Real;

/// Dimensions of a convolution: input `[B,CI,H,W]`, weight `[CO,CI,KH,KW]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Range of output columns whose sampled input column stays in bounds
    /// for a given kernel column.
    fn ow_range(&self, kw: usize, out_w: usize) -> (usize, usize) {
        let lo = if kw < self.pad {
            (self.pad - kw + self.stride - 1) / self.stride
        } else {
            0
        };
        // iw = ow*stride + kw - pad <= w-1
        let hi_num = self.w + self.pad;
        let hi = if hi_num > kw {
            ((hi_num - 1 - kw) / self.stride + 1).min(out_w)
        } else {
            0
        };
        (lo.min(out_w), hi)
    }
}

/// Cross-correlation forward pass.
pub fn conv2d_fwd<F: Real>(x: &[F], weight: &[F], bias: Option<&[F]>, d: &ConvDims) -> Vec<F> {
    let (oh_n, ow_n) = (d.out_h(), d.out_w());
    let out_plane = oh_n * ow_n;
    let mut out = vec![F::zero(); d.batch * d.c_out * out_plane];
    out.par_chunks_mut(d.c_out * out_plane)
        .enumerate()
        .for_each(|(b, out_b)| {
            for o in 0..d.c_out {
                let out_o = &mut out_b[o * out_plane..(o + 1) * out_plane];
                if let Some(bias) = bias {
                    out_o.fill(bias[o]);
                }
                for c in 0..d.c_in {
                    let x_bc = &x[(b * d.c_in + c) * d.h * d.w..][..d.h * d.w];
                    for kh in 0..d.kh {
                        for kw in 0..d.kw {
                            let wv = weight[((o * d.c_in + c) * d.kh + kh) * d.kw + kw];
                            if wv == F::zero() {
                                continue;
                            }
                            let (lo, hi) = d.ow_range(kw, ow_n);
                            if lo >= hi {
                                continue;
                            }
                            let off = kw as isize - d.pad as isize;
                            for oh in 0..oh_n {
                                let ih = (oh * d.stride + kh) as isize - d.pad as isize;
                                if ih < 0 || ih >= d.h as isize {
                                    continue;
                                }
                                let x_row = &x_bc[ih as usize * d.w..][..d.w];
                                let out_row = &mut out_o[oh * ow_n..][..ow_n];
                                if d.stride == 1 {
                                    let s = (lo as isize + off) as usize;
                                    let e = (hi as isize + off) as usize;
                                    for (o, &xv) in
                                        out_row[lo..hi].iter_mut().zip(&x_row[s..e])
                                    {
                                        *o = *o + wv * xv;
                                    }
                                } else {
                                    for ow in lo..hi {
                                        let iw = ow * d.stride + kw - d.pad;
                                        out_row[ow] = out_row[ow] + wv * x_row[iw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Gradient of the convolution output w.r.t. its input (transposed conv).
pub fn conv2d_input_vjp<F: Real>(g: &[F], weight: &[F], d: &ConvDims) -> Vec<F> {
    let (oh_n, ow_n) = (d.out_h(), d.out_w());
    let in_plane = d.h * d.w;
    let mut gx = vec![F::zero(); d.batch * d.c_in * in_plane];
    gx.par_chunks_mut(d.c_in * in_plane)
        .enumerate()
        .for_each(|(b, gx_b)| {
            for o in 0..d.c_out {
                let g_bo = &g[(b * d.c_out + o) * oh_n * ow_n..][..oh_n * ow_n];
                for c in 0..d.c_in {
                    let gx_bc = &mut gx_b[c * in_plane..(c + 1) * in_plane];
                    for kh in 0..d.kh {
                        for kw in 0..d.kw {
                            let wv = weight[((o * d.c_in + c) * d.kh + kh) * d.kw + kw];
                            if wv == F::zero() {
                                continue;
                            }
                            let (lo, hi) = d.ow_range(kw, ow_n);
                            if lo >= hi {
                                continue;
                            }
                            let off = kw as isize - d.pad as isize;
                            for oh in 0..oh_n {
                                let ih = (oh * d.stride + kh) as isize - d.pad as isize;
                                if ih < 0 || ih >= d.h as isize {
                                    continue;
                                }
                                let g_row = &g_bo[oh * ow_n..][..ow_n];
                                let gx_row = &mut gx_bc[ih as usize * d.w..][..d.w];
                                if d.stride == 1 {
                                    let s = (lo as isize + off) as usize;
                                    let e = (hi as isize + off) as usize;
                                    for (gx, &gv) in
                                        gx_row[s..e].iter_mut().zip(&g_row[lo..hi])
                                    {
                                        *gx = *gx + wv * gv;
                                    }
                                } else {
                                    for ow in lo..hi {
                                        let iw = ow * d.stride + kw - d.pad;
                                        gx_row[iw] = gx_row[iw] + wv * g_row[ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    gx
}

/// Dot product with eight fixed accumulator lanes: vectorizes without
/// reassociating the ordinary serial sum, and the lane order is fixed so
/// results stay bit-deterministic.
fn dot_lanes<F: Real>(a: &[F], b: &[F]) -> F {
    let mut lanes = [F::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for l in 0..8 {
            lanes[l] = lanes[l] + a[i * 8 + l] * b[i * 8 + l];
        }
    }
    let mut tail = F::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    let s01 = lanes[0] + lanes[1];
    let s23 = lanes[2] + lanes[3];
    let s45 = lanes[4] + lanes[5];
    let s67 = lanes[6] + lanes[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// Gradient of the convolution output w.r.t. the weight.
pub fn conv2d_weight_vjp<F: Real>(x: &[F], g: &[F], d: &ConvDims) -> Vec<F> {
    let (oh_n, ow_n) = (d.out_h(), d.out_w());
    let mut gw = vec![F::zero(); d.c_out * d.c_in * d.kh * d.kw];
    gw.par_chunks_mut(d.c_in * d.kh * d.kw)
        .enumerate()
        .for_each(|(o, gw_o)| {
            for c in 0..d.c_in {
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let (lo, hi) = d.ow_range(kw, ow_n);
                        let off = kw as isize - d.pad as isize;
                        let mut acc = F::zero();
                        if lo < hi {
                            for b in 0..d.batch {
                                let x_bc = &x[(b * d.c_in + c) * d.h * d.w..][..d.h * d.w];
                                let g_bo = &g[(b * d.c_out + o) * oh_n * ow_n..][..oh_n * ow_n];
                                for oh in 0..oh_n {
                                    let ih = (oh * d.stride + kh) as isize - d.pad as isize;
                                    if ih < 0 || ih >= d.h as isize {
                                        continue;
                                    }
                                    let x_row = &x_bc[ih as usize * d.w..][..d.w];
                                    let g_row = &g_bo[oh * ow_n..][..ow_n];
                                    if d.stride == 1 {
                                        let s = (lo as isize + off) as usize;
                                        let e = (hi as isize + off) as usize;
                                        acc = acc + dot_lanes(&x_row[s..e], &g_row[lo..hi]);
                                    } else {
                                        for ow in lo..hi {
                                            let iw = ow * d.stride + kw - d.pad;
                                            acc = acc + x_row[iw] * g_row[ow];
                                        }
                                    }
                                }
                            }
                        }
                        gw_o[(c * d.kh + kh) * d.kw + kw] = acc;
                    }
                }
            }
        });
    gw
}

/// Dimensions of a grid sampling: input `[B,C,H,W]`, grid `[B,GH,GW,2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridDims {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub gh: usize,
    pub gw: usize,
}

/// Bilinear sample geometry at one grid point: corner coordinates, the
/// fractional offsets and the unnormalization scales.
#[derive(Clone, Copy)]
struct SamplePoint {
    x0: isize,
    y0: isize,
    dx: f64,
    dy: f64,
    sx: f64,
    sy: f64,
}

impl SamplePoint {
    /// Normalized coordinates map to pixel centers via
    /// `px = (gx + 1) * 0.5 * W - 0.5` (half-pixel convention). The
    /// composition with the matching normalization is exact for
    /// power-of-two extents, which makes identity transforms bit-exact.
    fn at<F: Real>(gx: F, gy: F, w: usize, h: usize) -> Self {
        let px = (gx.f64() + 1.0) * 0.5 * w as f64 - 0.5;
        let py = (gy.f64() + 1.0) * 0.5 * h as f64 - 0.5;
        let x0 = px.floor();
        let y0 = py.floor();
        SamplePoint {
            x0: x0 as isize,
            y0: y0 as isize,
            dx: px - x0,
            dy: py - y0,
            sx: 0.5 * w as f64,
            sy: 0.5 * h as f64,
        }
    }

    /// The four corners as (flat index within the plane, wx, wy) where the
    /// bilinear weight is wx*wy; out-of-bounds corners are dropped
    /// (zero-padding policy).
    fn corners(&self, w: usize, h: usize) -> [(Option<usize>, f64, f64); 4] {
        let idx = |x: isize, y: isize| -> Option<usize> {
            if x >= 0 && x < w as isize && y >= 0 && y < h as isize {
                Some(y as usize * w + x as usize)
            } else {
                None
            }
        };
        [
            (idx(self.x0, self.y0), 1.0 - self.dx, 1.0 - self.dy),
            (idx(self.x0 + 1, self.y0), self.dx, 1.0 - self.dy),
            (idx(self.x0, self.y0 + 1), 1.0 - self.dx, self.dy),
            (idx(self.x0 + 1, self.y0 + 1), self.dx, self.dy),
        ]
    }

    /// Derivative sign of each corner weight w.r.t. dx and dy.
    /// weight = wx(dx) * wy(dy) with wx ∈ {1-dx, dx}: d(wx)/d(dx) = ∓1.
    const DSIGN: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)];
}

pub fn grid_sample_fwd<F: Real>(x: &[F], grid: &[F], d: &GridDims) -> Vec<F> {
    let in_plane = d.h * d.w;
    let out_plane = d.gh * d.gw;
    let mut out = vec![F::zero(); d.batch * d.channels * out_plane];
    out.par_chunks_mut(d.channels * out_plane)
        .enumerate()
        .for_each(|(b, out_b)| {
            let grid_b = &grid[b * out_plane * 2..][..out_plane * 2];
            for (p, gp) in grid_b.chunks_exact(2).enumerate() {
                let sp = SamplePoint::at(gp[0], gp[1], d.w, d.h);
                let corners = sp.corners(d.w, d.h);
                for c in 0..d.channels {
                    let x_bc = &x[(b * d.channels + c) * in_plane..][..in_plane];
                    let mut acc = 0.0f64;
                    for (idx, wx, wy) in corners {
                        if let Some(i) = idx {
                            acc += wx * wy * x_bc[i].f64();
                        }
                    }
                    out_b[c * out_plane + p] = F::of(acc);
                }
            }
        });
    out
}

/// Adjoint of `grid_sample_fwd` w.r.t. the input: scatters the upstream
/// gradient back through the bilinear weights.
pub fn gs_scatter<F: Real>(s: &[F], grid: &[F], d: &GridDims) -> Vec<F> {
    let in_plane = d.h * d.w;
    let out_plane = d.gh * d.gw;
    let mut gx = vec![F::zero(); d.batch * d.channels * in_plane];
    gx.par_chunks_mut(d.channels * in_plane)
        .enumerate()
        .for_each(|(b, gx_b)| {
            let grid_b = &grid[b * out_plane * 2..][..out_plane * 2];
            for (p, gp) in grid_b.chunks_exact(2).enumerate() {
                let sp = SamplePoint::at(gp[0], gp[1], d.w, d.h);
                let corners = sp.corners(d.w, d.h);
                for c in 0..d.channels {
                    let sv = s[(b * d.channels + c) * out_plane + p].f64();
                    if sv == 0.0 {
                        continue;
                    }
                    let gx_bc = &mut gx_b[c * in_plane..(c + 1) * in_plane];
                    for (idx, wx, wy) in corners {
                        if let Some(i) = idx {
                            gx_bc[i] = gx_bc[i] + F::of(wx * wy * sv);
                        }
                    }
                }
            }
        });
    gx
}

/// Adjoint of `grid_sample_fwd` w.r.t. the grid.
pub fn gs_grid_vjp<F: Real>(s: &[F], x: &[F], grid: &[F], d: &GridDims) -> Vec<F> {
    let in_plane = d.h * d.w;
    let out_plane = d.gh * d.gw;
    let mut gg = vec![F::zero(); d.batch * out_plane * 2];
    gg.par_chunks_mut(out_plane * 2)
        .enumerate()
        .for_each(|(b, gg_b)| {
            let grid_b = &grid[b * out_plane * 2..][..out_plane * 2];
            for (p, gp) in grid_b.chunks_exact(2).enumerate() {
                let sp = SamplePoint::at(gp[0], gp[1], d.w, d.h);
                let corners = sp.corners(d.w, d.h);
                let mut ax = 0.0f64;
                let mut ay = 0.0f64;
                for c in 0..d.channels {
                    let sv = s[(b * d.channels + c) * out_plane + p].f64();
                    if sv == 0.0 {
                        continue;
                    }
                    let x_bc = &x[(b * d.channels + c) * in_plane..][..in_plane];
                    for (k, (idx, wx, wy)) in corners.iter().enumerate() {
                        if let Some(i) = idx {
                            let v = x_bc[*i].f64();
                            let (dsx, dsy) = SamplePoint::DSIGN[k];
                            ax += sv * v * dsx * wy;
                            ay += sv * v * wx * dsy;
                        }
                    }
                }
                gg_b[p * 2] = F::of(ax * sp.sx);
                gg_b[p * 2 + 1] = F::of(ay * sp.sy);
            }
        });
    gg
}

/// Directional derivative of the sampling w.r.t. the grid: for upstream
/// `u[B,GH,GW,2]`, returns `sum_d u_d * d(grid_sample)/d(grid_d)` per
/// channel. This is the adjoint of `gs_grid_vjp` w.r.t. its upstream slot.
pub fn gs_dir_gather<F: Real>(x: &[F], grid: &[F], u: &[F], d: &GridDims) -> Vec<F> {
    let in_plane = d.h * d.w;
    let out_plane = d.gh * d.gw;
    let mut out = vec![F::zero(); d.batch * d.channels * out_plane];
    out.par_chunks_mut(d.channels * out_plane)
        .enumerate()
        .for_each(|(b, out_b)| {
            let grid_b = &grid[b * out_plane * 2..][..out_plane * 2];
            let u_b = &u[b * out_plane * 2..][..out_plane * 2];
            for (p, gp) in grid_b.chunks_exact(2).enumerate() {
                let sp = SamplePoint::at(gp[0], gp[1], d.w, d.h);
                let corners = sp.corners(d.w, d.h);
                let ux = u_b[p * 2].f64() * sp.sx;
                let uy = u_b[p * 2 + 1].f64() * sp.sy;
                for c in 0..d.channels {
                    let x_bc = &x[(b * d.channels + c) * in_plane..][..in_plane];
                    let mut acc = 0.0f64;
                    for (k, (idx, wx, wy)) in corners.iter().enumerate() {
                        if let Some(i) = idx {
                            let v = x_bc[*i].f64();
                            let (dsx, dsy) = SamplePoint::DSIGN[k];
                            acc += v * (ux * dsx * wy + uy * wx * dsy);
                        }
                    }
                    out_b[c * out_plane + p] = F::of(acc);
                }
            }
        });
    out
}

/// Adjoint of `gs_grid_vjp` w.r.t. its sampled-image slot: scatters
/// `u_d * s * d(weight_k)/d(grid_d)` onto the corners.
pub fn gs_dir_scatter<F: Real>(s: &[F], grid: &[F], u: &[F], d: &GridDims) -> Vec<F> {
    let in_plane = d.h * d.w;
    let out_plane = d.gh * d.gw;
    let mut gx = vec![F::zero(); d.batch * d.channels * in_plane];
    gx.par_chunks_mut(d.channels * in_plane)
        .enumerate()
        .for_each(|(b, gx_b)| {
            let grid_b = &grid[b * out_plane * 2..][..out_plane * 2];
            let u_b = &u[b * out_plane * 2..][..out_plane * 2];
            for (p, gp) in grid_b.chunks_exact(2).enumerate() {
                let sp = SamplePoint::at(gp[0], gp[1], d.w, d.h);
                let corners = sp.corners(d.w, d.h);
                let ux = u_b[p * 2].f64() * sp.sx;
                let uy = u_b[p * 2 + 1].f64() * sp.sy;
                for c in 0..d.channels {
                    let sv = s[(b * d.channels + c) * out_plane + p].f64();
                    if sv == 0.0 {
                        continue;
                    }
                    let gx_bc = &mut gx_b[c * in_plane..(c + 1) * in_plane];
                    for (k, (idx, wx, wy)) in corners.iter().enumerate() {
                        if let Some(i) = *idx {
                            let (dsx, dsy) = SamplePoint::DSIGN[k];
                            gx_bc[i] = gx_bc[i] + F::of(sv * (ux * dsx * wy + uy * wx * dsy));
                        }
                    }
                }
            }
        });
    gx
}

/// Adjoint of `gs_grid_vjp` w.r.t. the grid itself (second derivative of
/// the sampling w.r.t. the grid). For bilinear weights only the mixed
/// dx·dy term survives.
pub fn gs_grid_vjp_grad_grid<F: Real>(s: &[F], x: &[F], grid: &[F], u: &[F], d: &GridDims) -> Vec<F> {
    let in_plane = d.h * d.w;
    let out_plane = d.gh * d.gw;
    let mut gg = vec![F::zero(); d.batch * out_plane * 2];
    gg.par_chunks_mut(out_plane * 2)
        .enumerate()
        .for_each(|(b, gg_b)| {
            let grid_b = &grid[b * out_plane * 2..][..out_plane * 2];
            let u_b = &u[b * out_plane * 2..][..out_plane * 2];
            for (p, gp) in grid_b.chunks_exact(2).enumerate() {
                let sp = SamplePoint::at(gp[0], gp[1], d.w, d.h);
                let corners = sp.corners(d.w, d.h);
                // mixed = sum_c s_c * (v00 - v10 - v01 + v11), scaled by sx*sy
                let mut mixed = 0.0f64;
                for c in 0..d.channels {
                    let sv = s[(b * d.channels + c) * out_plane + p].f64();
                    if sv == 0.0 {
                        continue;
                    }
                    let x_bc = &x[(b * d.channels + c) * in_plane..][..in_plane];
                    let mut m = 0.0f64;
                    for (k, (idx, _, _)) in corners.iter().enumerate() {
                        if let Some(i) = idx {
                            let (dsx, dsy) = SamplePoint::DSIGN[k];
                            m += dsx * dsy * x_bc[*i].f64();
                        }
                    }
                    mixed += sv * m;
                }
                let scale = sp.sx * sp.sy * mixed;
                gg_b[p * 2] = F::of(u_b[p * 2 + 1].f64() * scale);
                gg_b[p * 2 + 1] = F::of(u_b[p * 2].f64() * scale);
            }
        });
    gg
}

/// 2x2 max pooling with stride 2; returns the pooled values and the flat
/// within-plane index of each argmax (ties broken by scan order).
pub fn maxpool2x2_fwd<F: Real>(x: &[F], planes: usize, h: usize, w: usize) -> (Vec<F>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![F::zero(); planes * oh * ow];
    let mut idx = vec![0u32; planes * oh * ow];
    for pl in 0..planes {
        let x_p = &x[pl * h * w..][..h * w];
        let out_p = &mut out[pl * oh * ow..][..oh * ow];
        let idx_p = &mut idx[pl * oh * ow..][..oh * ow];
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = F::neg_infinity();
                let mut best_i = 0u32;
                for ddy in 0..2 {
                    for ddx in 0..2 {
                        let iy = 2 * y + ddy;
                        let ix = 2 * xo + ddx;
                        let v = x_p[iy * w + ix];
                        if v > best {
                            best = v;
                            best_i = (iy * w + ix) as u32;
                        }
                    }
                }
                out_p[y * ow + xo] = best;
                idx_p[y * ow + xo] = best_i;
            }
        }
    }
    (out, idx)
}

/// Gathers values at previously recorded pool indices.
pub fn pool_gather<F: Real>(x: &[F], indices: &[u32], planes: usize, h: usize, w: usize) -> Vec<F> {
    let per_plane = indices.len() / planes;
    let mut out = vec![F::zero(); indices.len()];
    for pl in 0..planes {
        let x_p = &x[pl * h * w..][..h * w];
        for i in 0..per_plane {
            out[pl * per_plane + i] = x_p[indices[pl * per_plane + i] as usize];
        }
    }
    out
}

/// Scatters values back to the recorded pool indices (adjoint of gather).
pub fn pool_scatter<F: Real>(s: &[F], indices: &[u32], planes: usize, h: usize, w: usize) -> Vec<F> {
    let per_plane = indices.len() / planes;
    let mut out = vec![F::zero(); planes * h * w];
    for pl in 0..planes {
        let out_p = &mut out[pl * h * w..][..h * w];
        for i in 0..per_plane {
            let t = indices[pl * per_plane + i] as usize;
            out_p[t] = out_p[t] + s[pl * per_plane + i];
        }
    }
    out
}

/// Weights of the x2 bilinear upsample along one axis (half-pixel
/// convention, edges clamped): destination `o` samples source
/// `o/2 - 0.25`.
fn up2_taps(o: usize, n: usize) -> [(usize, f64); 2] {
    let src = o as f64 * 0.5 - 0.25;
    let i0 = src.floor();
    let frac = src - i0;
    let clamp = |v: isize| -> usize { v.clamp(0, n as isize - 1) as usize };
    [
        (clamp(i0 as isize), 1.0 - frac),
        (clamp(i0 as isize + 1), frac),
    ]
}

/// Bilinear x2 upsampling of each `[h,w]` plane.
pub fn upsample2x_fwd<F: Real>(x: &[F], planes: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![F::zero(); planes * oh * ow];
    for pl in 0..planes {
        let x_p = &x[pl * h * w..][..h * w];
        let out_p = &mut out[pl * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let ty = up2_taps(oy, h);
            for ox in 0..ow {
                let tx = up2_taps(ox, w);
                let mut acc = 0.0f64;
                for (iy, wy) in ty {
                    for (ix, wx) in tx {
                        acc += wy * wx * x_p[iy * w + ix].f64();
                    }
                }
                out_p[oy * ow + ox] = F::of(acc);
            }
        }
    }
    out
}

/// Exact adjoint of `upsample2x_fwd`: scatters with the same tap weights.
pub fn upsample2x_t<F: Real>(s: &[F], planes: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![F::zero(); planes * h * w];
    for pl in 0..planes {
        let s_p = &s[pl * oh * ow..][..oh * ow];
        let out_p = &mut out[pl * h * w..][..h * w];
        for oy in 0..oh {
            let ty = up2_taps(oy, h);
            for ox in 0..ow {
                let sv = s_p[oy * ow + ox].f64();
                if sv == 0.0 {
                    continue;
                }
                let tx = up2_taps(ox, w);
                for (iy, wy) in ty {
                    for (ix, wx) in tx {
                        out_p[iy * w + ix] = out_p[iy * w + ix] + F::of(wy * wx * sv);
                    }
                }
            }
        }
    }
    out
}

/// Normalized coordinate of a pixel center (half-pixel convention); exact
/// for power-of-two extents.
pub fn norm_coord(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

/// Builds sampling grids `[B,H,W,2]` from affine rows `[B,6]`
/// `(a, b, tx, c, d, ty)`: `gx = a*xn + b*yn + tx`, `gy = c*xn + d*yn + ty`.
pub fn affine_grid<F: Real>(theta: &[F], batch: usize, h: usize, w: usize) -> Vec<F> {
    let plane = h * w;
    let mut out = vec![F::zero(); batch * plane * 2];
    for b in 0..batch {
        let t = &theta[b * 6..][..6];
        let (a, bb, tx) = (t[0].f64(), t[1].f64(), t[2].f64());
        let (c, dd, ty) = (t[3].f64(), t[4].f64(), t[5].f64());
        let out_b = &mut out[b * plane * 2..][..plane * 2];
        for y in 0..h {
            let yn = norm_coord(y, h);
            for x in 0..w {
                let xn = norm_coord(x, w);
                out_b[(y * w + x) * 2] = F::of(a * xn + bb * yn + tx);
                out_b[(y * w + x) * 2 + 1] = F::of(c * xn + dd * yn + ty);
            }
        }
    }
    out
}

/// Adjoint of `affine_grid`.
pub fn affine_grid_t<F: Real>(g: &[F], batch: usize, h: usize, w: usize) -> Vec<F> {
    let plane = h * w;
    let mut out = vec![F::zero(); batch * 6];
    for b in 0..batch {
        let g_b = &g[b * plane * 2..][..plane * 2];
        let mut acc = [0.0f64; 6];
        for y in 0..h {
            let yn = norm_coord(y, h);
            for x in 0..w {
                let xn = norm_coord(x, w);
                let gx = g_b[(y * w + x) * 2].f64();
                let gy = g_b[(y * w + x) * 2 + 1].f64();
                acc[0] += gx * xn;
                acc[1] += gx * yn;
                acc[2] += gx;
                acc[3] += gy * xn;
                acc[4] += gy * yn;
                acc[5] += gy;
            }
        }
        for (o, a) in out[b * 6..][..6].iter_mut().zip(acc) {
            *o = F::of(a);
        }
    }
    out
}

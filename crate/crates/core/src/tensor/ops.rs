//! Convolution, normalization and resampling operators.

use super::graph::{Graph, Op, Var};
use super::{lane_dot, lane_sq_dev, lane_sum, Real, Result, Tensor, TensorError};
use crate::par;

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the exponential update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Running per-channel statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

fn sum_in_order<T: Real>(parts: Vec<Vec<T>>) -> Vec<T> {
    let mut iter = parts.into_iter();
    let mut acc = iter.next().unwrap_or_default();
    for p in iter {
        acc.iter_mut().zip(&p).for_each(|(a, &b)| *a += b);
    }
    acc
}

fn bias_grad<T: Real>(grad: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for b in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            let off = (b * c + ch) * plane;
            *acc += lane_sum(&grad[off..off + plane]);
        }
    }
    db
}

fn check_bias<T: Real>(g: &Graph<T>, op: &'static str, b: Option<Var>, c: usize) -> Result<()> {
    if let Some(b) = b {
        if g.shape(b) != [c] {
            return Err(TensorError::shape(
                op,
                format!("bias shape {:?}, expected [{c}]", g.shape(b)),
            ));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: (usize, usize),
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
    col: &mut [T],
) {
    let (kh, kw) = k;
    let (ho, wo) = out_hw;
    let p = ho * wo;
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy as usize >= h {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    // valid ox: 0 <= ox*stride + kx - pad < w
                    let lo = (pad.saturating_sub(kx)).div_ceil(stride).min(wo);
                    let hi = if w + pad > kx {
                        ((w + pad - kx - 1) / stride + 1).min(wo)
                    } else {
                        0
                    }
                    .max(lo);
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if stride == 1 {
                        let s0 = lo + kx - pad;
                        drow[lo..hi].copy_from_slice(&srow[s0..s0 + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            drow[ox] = srow[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: (usize, usize),
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
    x: &mut [T],
) {
    let (kh, kw) = k;
    let (ho, wo) = out_hw;
    let p = ho * wo;
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &col[row * p..(row + 1) * p];
                let lo = (pad.saturating_sub(kx)).div_ceil(stride).min(wo);
                let hi = if w + pad > kx {
                    ((w + pad - kx - 1) / stride + 1).min(wo)
                } else {
                    0
                }
                .max(lo);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    let drow = &mut x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    if stride == 1 {
                        let d0 = lo + kx - pad;
                        for (d, &v) in drow[d0..d0 + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            drow[ox * stride + kx - pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(k).map(|d| d / stride + 1)
}

impl<T: Real> Graph<T> {
    /// Cross-correlation with weight `[out_ch, in_ch, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4("conv2d")?;
        let (cout, wcin, kh, kw) = self.value(w).dims4("conv2d")?;
        if wcin != cin {
            return Err(TensorError::shape(
                "conv2d",
                format!("input has {cin} channels but weight expects {wcin}"),
            ));
        }
        if stride == 0 {
            return Err(TensorError::shape("conv2d", "stride must be positive"));
        }
        check_bias(self, "conv2d", b, cout)?;
        let (Some(ho), Some(wo)) = (
            conv_out(h, kh, stride, padding),
            conv_out(wd, kw, stride, padding),
        ) else {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
            ));
        };
        let k = cin * kh * kw;
        let p = ho * wo;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); n * cout * p];
        par::for_each_chunk_mut(&mut out, cout * p, |s, y| {
            let mut col = vec![T::zero(); k * p];
            let xin = &xs[s * cin * h * wd..(s + 1) * cin * h * wd];
            im2col(xin, cin, h, wd, (kh, kw), stride, padding, (ho, wo), &mut col);
            T::gemm(cout, k, p, ws, (k as isize, 1), &col, (p as isize, 1), T::zero(), y);
            if let Some(bias) = bias {
                for (co, row) in y.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += bias[co]);
                }
            }
        });
        let out = Tensor::new(vec![n, cout, ho, wo], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            &inputs,
        ))
    }

    /// Per-channel 3x3 convolution, stride 1, padding 1. Weight `[c, 1, 3, 3]`.
    pub fn depthwise_conv3x3(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4("depthwise_conv")?;
        if self.shape(w) != [c, 1, 3, 3] {
            return Err(TensorError::shape(
                "depthwise_conv",
                format!(
                    "weight shape {:?} does not match {c} input channels (want [{c}, 1, 3, 3])",
                    self.shape(w)
                ),
            ));
        }
        check_bias(self, "depthwise_conv", b, c)?;
        let plane = h * wd;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); n * c * plane];
        par::for_each_chunk_mut(&mut out, plane, |idx, y| {
            let ch = idx % c;
            if let Some(bias) = bias {
                y.iter_mut().for_each(|v| *v = bias[ch]);
            }
            let xin = &xs[idx * plane..(idx + 1) * plane];
            depthwise_plane_forward(xin, &ws[ch * 9..ch * 9 + 9], h, wd, y);
        });
        let out = Tensor::new(vec![n, c, h, wd], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Depthwise { x, w, b }, &inputs))
    }

    /// 1x1 convolution mixing channels. Weight `[out_ch, in_ch, 1, 1]`.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4("pointwise_conv")?;
        let (cout, wcin, kh, kw) = self.value(w).dims4("pointwise_conv")?;
        if wcin != cin || kh != 1 || kw != 1 {
            return Err(TensorError::shape(
                "pointwise_conv",
                format!(
                    "weight shape {:?} incompatible with {cin} input channels",
                    self.shape(w)
                ),
            ));
        }
        check_bias(self, "pointwise_conv", b, cout)?;
        let p = h * wd;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); n * cout * p];
        par::for_each_chunk_mut(&mut out, cout * p, |s, y| {
            let xin = &xs[s * cin * p..(s + 1) * cin * p];
            T::gemm(cout, cin, p, ws, (cin as isize, 1), xin, (p as isize, 1), T::zero(), y);
            if let Some(bias) = bias {
                for (co, row) in y.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += bias[co]);
                }
            }
        });
        let out = Tensor::new(vec![n, cout, h, wd], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Pointwise { x, w, b }, &inputs))
    }

    /// Depthwise 3x3 followed by a pointwise 1x1, each with a bias.
    pub fn depthwise_separable_conv(
        &mut self,
        x: Var,
        depthwise: (Var, Var),
        pointwise: (Var, Var),
    ) -> Result<Var> {
        let d = self.depthwise_conv3x3(x, depthwise.0, Some(depthwise.1))?;
        self.pointwise_conv(d, pointwise.0, Some(pointwise.1))
    }

    /// Per-channel batch normalization. With `training` the batch statistics
    /// normalize the input and are folded into `stats`; otherwise `stats` is
    /// read only.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        training: bool,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4("batch_norm")?;
        let plane = h * wd;
        let m = n * plane;
        if m == 0 {
            return Err(TensorError::shape("batch_norm", "empty batch"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::shape(
                "batch_norm",
                format!(
                    "gamma {:?} / beta {:?} must both be [{c}]",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(TensorError::shape(
                "batch_norm",
                format!("running stats sized {} for {c} channels", stats.mean.len()),
            ));
        }
        let xs = self.value(x).data();
        let eps = T::lit(BN_EPS);
        let (mean, inv_std): (Vec<T>, Vec<T>) = if training {
            let mf = T::from_usize(m).expect("count");
            let mut means = Vec::with_capacity(c);
            let mut vars = Vec::with_capacity(c);
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    s += lane_sum(&xs[off..off + plane]);
                }
                let mu = s / mf;
                let mut v = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    v += lane_sq_dev(&xs[off..off + plane], mu);
                }
                means.push(mu);
                vars.push(v / mf);
            }
            let mom = T::lit(BN_MOMENTUM);
            let unbias = if m > 1 {
                mf / (mf - T::one())
            } else {
                T::one()
            };
            for ch in 0..c {
                stats.mean[ch] = mom * stats.mean[ch] + (T::one() - mom) * means[ch];
                stats.var[ch] = mom * stats.var[ch] + (T::one() - mom) * vars[ch] * unbias;
            }
            let inv = vars.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (means, inv)
        } else {
            let inv = stats
                .var
                .iter()
                .map(|&v| T::one() / (v + eps).sqrt())
                .collect();
            (stats.mean.clone(), inv)
        };
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        par::for_each_chunk_pair_mut(&mut out, &mut xhat, plane, |idx, dst, xh| {
            let ch = idx % c;
            let src = &xs[idx * plane..(idx + 1) * plane];
            let (mu, is, ga, be) = (mean[ch], inv_std[ch], gs[ch], bs[ch]);
            for ((d, xv), &v) in dst.iter_mut().zip(xh.iter_mut()).zip(src) {
                let z = (v - mu) * is;
                *xv = z;
                *d = ga * z + be;
            }
        });
        let out = Tensor::new(vec![n, c, h, wd], out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: training,
            },
            &[x, gamma, beta],
        ))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::shape(
                "avg_pool2",
                format!("spatial dims {h}x{w} must be even"),
            ));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xs = self.value(x).data();
        let quarter = T::lit(0.25);
        let mut out = vec![T::zero(); n * c * ho * wo];
        par::for_each_chunk_mut(&mut out, ho * wo, |idx, dst| {
            let src = &xs[idx * h * w..(idx + 1) * h * w];
            for oy in 0..ho {
                let r0 = &src[2 * oy * w..(2 * oy + 1) * w];
                let r1 = &src[(2 * oy + 1) * w..(2 * oy + 2) * w];
                for ox in 0..wo {
                    dst[oy * wo + ox] =
                        (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter;
                }
            }
        });
        let out = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(out, Op::AvgPool2(x), &[x]))
    }

    /// Transposed 2x2 convolution with stride 2 (output is twice the input
    /// size). Weight `[in_ch, out_ch, 2, 2]`.
    pub fn up_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4("up_conv")?;
        let (wcin, cout, kh, kw) = self.value(w).dims4("up_conv")?;
        if wcin != cin || kh != 2 || kw != 2 {
            return Err(TensorError::shape(
                "up_conv",
                format!(
                    "weight shape {:?} incompatible with {cin} input channels (want [{cin}, out, 2, 2])",
                    self.shape(w)
                ),
            ));
        }
        check_bias(self, "up_conv", b, cout)?;
        let p = h * wd;
        let rows = 4 * cout;
        let (ho, wo) = (2 * h, 2 * wd);
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); n * cout * ho * wo];
        par::for_each_chunk_mut(&mut out, cout * ho * wo, |s, y| {
            let xin = &xs[s * cin * p..(s + 1) * cin * p];
            let mut z = vec![T::zero(); rows * p];
            T::gemm(rows, cin, p, ws, (1, rows as isize), xin, (p as isize, 1), T::zero(), &mut z);
            for co in 0..cout {
                let bv = bias.map_or(T::zero(), |b| b[co]);
                for ab in 0..4 {
                    let (a, bb) = (ab / 2, ab % 2);
                    let zr = &z[(co * 4 + ab) * p..(co * 4 + ab + 1) * p];
                    for i in 0..h {
                        let row = &mut y[(co * ho + 2 * i + a) * wo..(co * ho + 2 * i + a + 1) * wo];
                        for j in 0..wd {
                            row[2 * j + bb] = zr[i * wd + j] + bv;
                        }
                    }
                }
            }
        });
        let out = Tensor::new(vec![n, cout, ho, wo], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::UpConv { x, w, b }, &inputs))
    }
}

/// Copies an `h x w` plane into the interior of a zeroed `(h+2) x (w+2)` one.
fn pad_plane<T: Real>(x: &[T], h: usize, w: usize, out: &mut Vec<T>) {
    let w2 = w + 2;
    out.clear();
    out.resize((h + 2) * w2, T::zero());
    for i in 0..h {
        out[(i + 1) * w2 + 1..(i + 1) * w2 + 1 + w].copy_from_slice(&x[i * w..(i + 1) * w]);
    }
}

// In the padded layout every 3x3 tap is a constant offset, so each tap is a
// single contiguous loop over `h * (w + 2) - 2` wide-row positions. The two
// extra columns per wide row are junk on output and zero on input.

fn depthwise_plane_forward<T: Real>(x: &[T], k: &[T], h: usize, w: usize, y: &mut [T]) {
    let w2 = w + 2;
    let len = h * w2 - 2;
    let mut xp = Vec::new();
    pad_plane(x, h, w, &mut xp);
    let mut wide = vec![T::zero(); len];
    for ky in 0..3 {
        for kx in 0..3 {
            let wt = k[ky * 3 + kx];
            let off = ky * w2 + kx;
            for (d, &s) in wide.iter_mut().zip(&xp[off..off + len]) {
                *d += wt * s;
            }
        }
    }
    for i in 0..h {
        for (d, &v) in y[i * w..(i + 1) * w].iter_mut().zip(&wide[i * w2..i * w2 + w]) {
            *d += v;
        }
    }
}

pub(crate) fn conv2d_backward<T: Real>(
    g: &Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    padding: usize,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let [n, cin, h, wd] = g.shape(x)[..] else {
        unreachable!()
    };
    let [cout, _, kh, kw] = g.shape(w)[..] else {
        unreachable!()
    };
    let ho = conv_out(h, kh, stride, padding).expect("validated in forward");
    let wo = conv_out(wd, kw, stride, padding).expect("validated in forward");
    let k = cin * kh * kw;
    let p = ho * wo;
    let xs = g.value(x).data();
    let ws = g.value(w).data();
    let (need_x, need_w) = (g.needs(x), g.needs(w));
    let parts = par::map_collect(n, |s| {
        let dy = &grad[s * cout * p..(s + 1) * cout * p];
        let mut dw = Vec::new();
        if need_w {
            let mut col = vec![T::zero(); k * p];
            let xin = &xs[s * cin * h * wd..(s + 1) * cin * h * wd];
            im2col(xin, cin, h, wd, (kh, kw), stride, padding, (ho, wo), &mut col);
            dw = vec![T::zero(); cout * k];
            T::gemm(cout, p, k, dy, (p as isize, 1), &col, (1, p as isize), T::zero(), &mut dw);
        }
        let mut dx = Vec::new();
        if need_x {
            let mut dcol = vec![T::zero(); k * p];
            T::gemm(k, cout, p, ws, (1, k as isize), dy, (p as isize, 1), T::zero(), &mut dcol);
            dx = vec![T::zero(); cin * h * wd];
            col2im(&dcol, cin, h, wd, (kh, kw), stride, padding, (ho, wo), &mut dx);
        }
        (dx, dw)
    });
    let (dxs, dws): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let mut out = Vec::new();
    if need_x {
        out.push((x, dxs.concat()));
    }
    if need_w {
        out.push((w, sum_in_order(dws)));
    }
    if let Some(b) = b.filter(|b| g.needs(*b)) {
        out.push((b, bias_grad(grad, n, cout, p)));
    }
    out
}

pub(crate) fn pointwise_backward<T: Real>(
    g: &Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let [n, cin, h, wd] = g.shape(x)[..] else {
        unreachable!()
    };
    let cout = g.shape(w)[0];
    let p = h * wd;
    let xs = g.value(x).data();
    let ws = g.value(w).data();
    let (need_x, need_w) = (g.needs(x), g.needs(w));
    let parts = par::map_collect(n, |s| {
        let dy = &grad[s * cout * p..(s + 1) * cout * p];
        let xin = &xs[s * cin * p..(s + 1) * cin * p];
        let mut dw = Vec::new();
        if need_w {
            dw = vec![T::zero(); cout * cin];
            T::gemm(cout, p, cin, dy, (p as isize, 1), xin, (1, p as isize), T::zero(), &mut dw);
        }
        let mut dx = Vec::new();
        if need_x {
            dx = vec![T::zero(); cin * p];
            T::gemm(cin, cout, p, ws, (1, cin as isize), dy, (p as isize, 1), T::zero(), &mut dx);
        }
        (dx, dw)
    });
    let (dxs, dws): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let mut out = Vec::new();
    if need_x {
        out.push((x, dxs.concat()));
    }
    if need_w {
        out.push((w, sum_in_order(dws)));
    }
    if let Some(b) = b.filter(|b| g.needs(*b)) {
        out.push((b, bias_grad(grad, n, cout, p)));
    }
    out
}

pub(crate) fn depthwise_backward<T: Real>(
    g: &Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let [n, c, h, wd] = g.shape(x)[..] else {
        unreachable!()
    };
    let plane = h * wd;
    let xs = g.value(x).data();
    let ws = g.value(w).data();
    let (need_x, need_w) = (g.needs(x), g.needs(w));
    let parts = par::map_collect(n * c, |idx| {
        let ch = idx % c;
        let dy = &grad[idx * plane..(idx + 1) * plane];
        let xin = &xs[idx * plane..(idx + 1) * plane];
        let k = &ws[ch * 9..ch * 9 + 9];
        let w2 = wd + 2;
        let len = h * w2 - 2;
        let mut dyw = vec![T::zero(); len];
        for i in 0..h {
            let n = if i + 1 == h { wd.min(len - i * w2) } else { wd };
            dyw[i * w2..i * w2 + n].copy_from_slice(&dy[i * wd..i * wd + n]);
        }
        let mut dw = [T::zero(); 9];
        if need_w {
            let mut xp = Vec::new();
            pad_plane(xin, h, wd, &mut xp);
            for ky in 0..3 {
                for kx in 0..3 {
                    let off = ky * w2 + kx;
                    dw[ky * 3 + kx] = lane_dot(&dyw, &xp[off..off + len]);
                }
            }
        }
        let mut dx = Vec::new();
        if need_x {
            let mut dxp = vec![T::zero(); (h + 2) * w2];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wt = k[ky * 3 + kx];
                    let off = ky * w2 + kx;
                    for (d, &gv) in dxp[off..off + len].iter_mut().zip(&dyw) {
                        *d += wt * gv;
                    }
                }
            }
            dx.reserve_exact(plane);
            for i in 0..h {
                dx.extend_from_slice(&dxp[(i + 1) * w2 + 1..(i + 1) * w2 + 1 + wd]);
            }
        }
        (dx, dw)
    });
    let mut out = Vec::new();
    let mut dw_total = vec![T::zero(); c * 9];
    let mut dx_total = Vec::with_capacity(if need_x { n * c * plane } else { 0 });
    for (idx, (dx, dw)) in parts.into_iter().enumerate() {
        let ch = idx % c;
        for t in 0..9 {
            dw_total[ch * 9 + t] += dw[t];
        }
        dx_total.extend(dx);
    }
    if need_x {
        out.push((x, dx_total));
    }
    if need_w {
        out.push((w, dw_total));
    }
    if let Some(b) = b.filter(|b| g.needs(*b)) {
        out.push((b, bias_grad(grad, n, c, plane)));
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward<T: Real>(
    g: &Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    batch_stats: bool,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let [n, c, h, wd] = g.shape(x)[..] else {
        unreachable!()
    };
    let plane = h * wd;
    let gs = g.value(gamma).data();
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let dy = &grad[off..off + plane];
            let xh = &xhat[off..off + plane];
            sum_dy[ch] += lane_sum(dy);
            sum_dy_xhat[ch] += lane_dot(dy, xh);
        }
    }
    let mut out = Vec::new();
    if g.needs(x) {
        let mf = T::from_usize(n * plane).expect("count");
        let mut dx = vec![T::zero(); grad.len()];
        par::for_each_chunk_mut(&mut dx, plane, |idx, dst| {
            let ch = idx % c;
            let dy = &grad[idx * plane..(idx + 1) * plane];
            let scale = gs[ch] * inv_std[ch];
            if batch_stats {
                let xh = &xhat[idx * plane..(idx + 1) * plane];
                let k = scale / mf;
                for ((d, &gy), &v) in dst.iter_mut().zip(dy).zip(xh) {
                    *d = k * (mf * gy - sum_dy[ch] - v * sum_dy_xhat[ch]);
                }
            } else {
                for (d, &gy) in dst.iter_mut().zip(dy) {
                    *d = scale * gy;
                }
            }
        });
        out.push((x, dx));
    }
    if g.needs(gamma) {
        out.push((gamma, sum_dy_xhat));
    }
    if g.needs(beta) {
        out.push((beta, sum_dy));
    }
    out
}

pub(crate) fn avg_pool2_backward<T: Real>(
    g: &Graph<T>,
    x: Var,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let [n, c, h, w] = g.shape(x)[..] else {
        unreachable!()
    };
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); n * c * h * w];
    par::for_each_chunk_mut(&mut dx, h * w, |idx, dst| {
        let dy = &grad[idx * ho * wo..(idx + 1) * ho * wo];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = dy[(y / 2) * wo + xx / 2] * quarter;
            }
        }
    });
    vec![(x, dx)]
}

pub(crate) fn up_conv_backward<T: Real>(
    g: &Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let [n, cin, h, wd] = g.shape(x)[..] else {
        unreachable!()
    };
    let cout = g.shape(w)[1];
    let p = h * wd;
    let rows = 4 * cout;
    let (ho, wo) = (2 * h, 2 * wd);
    let xs = g.value(x).data();
    let ws = g.value(w).data();
    let (need_x, need_w) = (g.needs(x), g.needs(w));
    let parts = par::map_collect(n, |s| {
        let dy = &grad[s * cout * ho * wo..(s + 1) * cout * ho * wo];
        let mut dz = vec![T::zero(); rows * p];
        for co in 0..cout {
            for ab in 0..4 {
                let (a, bb) = (ab / 2, ab % 2);
                let zr = &mut dz[(co * 4 + ab) * p..(co * 4 + ab + 1) * p];
                for i in 0..h {
                    let row = &dy[(co * ho + 2 * i + a) * wo..(co * ho + 2 * i + a + 1) * wo];
                    for j in 0..wd {
                        zr[i * wd + j] = row[2 * j + bb];
                    }
                }
            }
        }
        let xin = &xs[s * cin * p..(s + 1) * cin * p];
        let mut dx = Vec::new();
        if need_x {
            dx = vec![T::zero(); cin * p];
            T::gemm(cin, rows, p, ws, (rows as isize, 1), &dz, (p as isize, 1), T::zero(), &mut dx);
        }
        let mut dw = Vec::new();
        if need_w {
            dw = vec![T::zero(); cin * rows];
            T::gemm(cin, p, rows, xin, (p as isize, 1), &dz, (1, p as isize), T::zero(), &mut dw);
        }
        (dx, dw)
    });
    let (dxs, dws): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let mut out = Vec::new();
    if need_x {
        out.push((x, dxs.concat()));
    }
    if need_w {
        out.push((w, sum_in_order(dws)));
    }
    if let Some(b) = b.filter(|b| g.needs(*b)) {
        out.push((b, bias_grad(grad, n, cout, ho * wo)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([1, 1, 3, 3], |i| i as f64 * 0.3 - 1.0));
        let w = g.constant(t(&[1, 1, 1, 1], vec![1.0]));
        let b = g.constant(t(&[1], vec![0.0]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_box_sum_center() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert_eq!(g.value(y).data()[4], 9.0);
        assert_eq!(g.value(y).data()[0], 4.0);
    }

    #[test]
    fn conv_output_size_with_stride() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([2, 3, 7, 9]));
        let w = g.constant(Tensor::zeros([4, 3, 3, 3]));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 4, 5]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros([1, 3, 3, 3]));
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("2 channels"), "{err}");
    }

    #[test]
    fn depthwise_separable_identity() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn([2, 3, 4, 5], |i| (i as f32 * 0.37).sin()));
        let mut dk = vec![0.0; 27];
        for c in 0..3 {
            dk[c * 9 + 4] = 1.0;
        }
        let dw = g.constant(Tensor::new([3, 1, 3, 3], dk).unwrap());
        let db = g.constant(Tensor::zeros([3]));
        let eye: Vec<f32> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let pw = g.constant(Tensor::new([3, 3, 1, 1], eye).unwrap());
        let pb = g.constant(Tensor::zeros([3]));
        let y = g.depthwise_separable_conv(x, (dw, db), (pw, pb)).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn depthwise_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 3, 4, 4]));
        let dw = g.constant(Tensor::zeros([2, 1, 3, 3]));
        assert!(g.depthwise_conv3x3(x, dw, None).is_err());
    }

    #[test]
    fn batch_norm_fixed_point_and_collapse() {
        // Each channel already zero-mean with unit (biased) variance.
        let base = [1.0, -1.0, 1.0, -1.0];
        let x: Vec<f64> = (0..2).flat_map(|_| base).collect();
        let mut g = Graph::<f64>::new();
        let xv = g.constant(t(&[1, 2, 2, 2], x.clone()));
        let one = g.constant(t(&[2], vec![1.0, 1.0]));
        let zero = g.constant(t(&[2], vec![0.0, 0.0]));
        let mut stats = BatchNormStats::new(2);
        let y = g.batch_norm(xv, one, zero, &mut stats, true).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&x) {
            assert!((a - b).abs() <= 1e-4);
        }
        let gamma0 = g.constant(t(&[2], vec![0.0, 0.0]));
        let beta = g.constant(t(&[2], vec![0.25, -3.0]));
        let y = g.batch_norm(xv, gamma0, beta, &mut stats, true).unwrap();
        let d = g.value(y).data();
        assert!(d[..4].iter().all(|&v| v == 0.25));
        assert!(d[4..].iter().all(|&v| v == -3.0));
    }

    #[test]
    fn batch_norm_running_stats_momentum() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 1, 1, 1], vec![1.0, 3.0]));
        let one = g.constant(t(&[1], vec![1.0]));
        let zero = g.constant(t(&[1], vec![0.0]));
        let mut stats = BatchNormStats::new(1);
        g.batch_norm(x, one, zero, &mut stats, true).unwrap();
        assert!((stats.mean[0] - 0.2).abs() < 1e-12);
        // unbiased variance of {1, 3} is 2
        assert!((stats.var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
        let before = stats.clone();
        let y = g.batch_norm(x, one, zero, &mut stats, false).unwrap();
        assert_eq!(stats, before);
        let want = (1.0 - 0.2) / (1.1f64 + 1e-5).sqrt();
        assert!((g.value(y).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn pooling_values_and_odd_dims() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).cast());
        let y = g.avg_pool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);
        let c = g.constant(Tensor::full([1, 2, 4, 6], 0.7));
        let y = g.avg_pool2(c).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2, 3]);
        assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-7));
        let odd = g.constant(Tensor::zeros([1, 1, 3, 4]));
        assert!(g.avg_pool2(odd).is_err());
    }

    #[test]
    fn up_conv_broadcasts_single_pixel() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full([1, 1, 1, 1], 2.5));
        let w = g.constant(Tensor::full([1, 1, 2, 2], 1.0));
        let y = g.up_conv(x, w, None).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[2.5; 4]);
    }
}

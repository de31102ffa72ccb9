//! Backward (sampling) warp and brightness blending.

use super::graph::{Graph, Op, Var};
use super::{Real, Result, Tensor, TensorError};
use crate::par;

#[derive(Clone, Copy)]
struct Sample<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    // d(sample coordinate)/d(flow), zero where the coordinate was clamped
    gx: T,
    gy: T,
}

#[inline]
fn sample_point<T: Real>(x: usize, y: usize, u: T, v: T, w: usize, h: usize) -> Sample<T> {
    let max_x = T::from_usize(w - 1).expect("width");
    let max_y = T::from_usize(h - 1).expect("height");
    let rx = T::from_usize(x).expect("x") + u;
    let ry = T::from_usize(y).expect("y") + v;
    let inside = |r: T, max: T| if r >= T::zero() && r <= max { T::one() } else { T::zero() };
    let sx = rx.max(T::zero()).min(max_x);
    let sy = ry.max(T::zero()).min(max_y);
    let x0 = sx.floor().to_usize().unwrap_or(0).min(w - 1);
    let y0 = sy.floor().to_usize().unwrap_or(0).min(h - 1);
    Sample {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        fx: sx - T::from_usize(x0).expect("x0"),
        fy: sy - T::from_usize(y0).expect("y0"),
        gx: inside(rx, max_x),
        gy: inside(ry, max_y),
    }
}

impl<T: Real> Graph<T> {
    /// `out(x, y) = bilinear(image, x + u(x, y), y + v(x, y))` with the
    /// sample position clamped to the image. `flow` is `[n, 2, h, w]` in
    /// pixels, channel 0 horizontal.
    pub fn grid_warp(&mut self, image: Var, flow: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(image).dims4("grid_warp")?;
        let (fnb, fc, fh, fw) = self.value(flow).dims4("grid_warp")?;
        if (fnb, fc, fh, fw) != (n, 2, h, w) {
            return Err(TensorError::shape(
                "grid_warp",
                format!(
                    "flow shape {:?} must be [{n}, 2, {h}, {w}] for image {:?}",
                    self.shape(flow),
                    self.shape(image)
                ),
            ));
        }
        let img = self.value(image).data();
        let fl = self.value(flow).data();
        let plane = h * w;
        let mut out = vec![T::zero(); n * c * plane];
        par::for_each_chunk_mut(&mut out, c * plane, |s, dst| {
            let uf = &fl[s * 2 * plane..(s * 2 + 1) * plane];
            let vf = &fl[(s * 2 + 1) * plane..(s * 2 + 2) * plane];
            let src = &img[s * c * plane..(s + 1) * c * plane];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let sp = sample_point(x, y, uf[i], vf[i], w, h);
                    let (w00, w01) = ((T::one() - sp.fx) * (T::one() - sp.fy), sp.fx * (T::one() - sp.fy));
                    let (w10, w11) = ((T::one() - sp.fx) * sp.fy, sp.fx * sp.fy);
                    for ch in 0..c {
                        let p = &src[ch * plane..(ch + 1) * plane];
                        dst[ch * plane + i] = p[sp.y0 * w + sp.x0] * w00
                            + p[sp.y0 * w + sp.x1] * w01
                            + p[sp.y1 * w + sp.x0] * w10
                            + p[sp.y1 * w + sp.x1] * w11;
                    }
                }
            }
        });
        let out = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(out, Op::GridWarp { image, flow }, &[image, flow]))
    }

    /// `out = warped + s * mask * (1 - warped)`, i.e. blends toward white by
    /// `s * mask`. `mask` is `[n, 1, h, w]` and broadcasts over channels.
    pub fn blend_white(&mut self, warped: Var, mask: Var, strength: T) -> Result<Var> {
        let (n, c, h, w) = self.value(warped).dims4("blend_white")?;
        if self.shape(mask) != [n, 1, h, w] {
            return Err(TensorError::shape(
                "blend_white",
                format!(
                    "mask shape {:?} must be [{n}, 1, {h}, {w}]",
                    self.shape(mask)
                ),
            ));
        }
        let plane = h * w;
        let ws = self.value(warped).data();
        let ms = self.value(mask).data();
        let mut out = vec![T::zero(); ws.len()];
        par::for_each_chunk_mut(&mut out, plane, |idx, dst| {
            let s = idx / c;
            let m = &ms[s * plane..(s + 1) * plane];
            let src = &ws[idx * plane..(idx + 1) * plane];
            for ((d, &wv), &mv) in dst.iter_mut().zip(src).zip(m) {
                let a = strength * mv;
                *d = (T::one() - a) * wv + a;
            }
        });
        let out = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            out,
            Op::BlendWhite {
                warped,
                mask,
                strength,
            },
            &[warped, mask],
        ))
    }
}

pub(crate) fn grid_warp_backward<T: Real>(
    g: &Graph<T>,
    image: Var,
    flow: Var,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let [n, c, h, w] = g.shape(image)[..] else {
        unreachable!()
    };
    let plane = h * w;
    let img = g.value(image).data();
    let fl = g.value(flow).data();
    let (need_img, need_flow) = (g.needs(image), g.needs(flow));
    let parts = par::map_collect(n, |s| {
        let uf = &fl[s * 2 * plane..(s * 2 + 1) * plane];
        let vf = &fl[(s * 2 + 1) * plane..(s * 2 + 2) * plane];
        let src = &img[s * c * plane..(s + 1) * c * plane];
        let dy = &grad[s * c * plane..(s + 1) * c * plane];
        let mut dimg = if need_img {
            vec![T::zero(); c * plane]
        } else {
            Vec::new()
        };
        let mut dflow = if need_flow {
            vec![T::zero(); 2 * plane]
        } else {
            Vec::new()
        };
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let sp = sample_point(x, y, uf[i], vf[i], w, h);
                let (ofx, ofy) = (T::one() - sp.fx, T::one() - sp.fy);
                let (i00, i01) = (sp.y0 * w + sp.x0, sp.y0 * w + sp.x1);
                let (i10, i11) = (sp.y1 * w + sp.x0, sp.y1 * w + sp.x1);
                let mut du = T::zero();
                let mut dv = T::zero();
                for ch in 0..c {
                    let gy = dy[ch * plane + i];
                    if need_img {
                        let d = &mut dimg[ch * plane..(ch + 1) * plane];
                        d[i00] += gy * ofx * ofy;
                        d[i01] += gy * sp.fx * ofy;
                        d[i10] += gy * ofx * sp.fy;
                        d[i11] += gy * sp.fx * sp.fy;
                    }
                    if need_flow {
                        let p = &src[ch * plane..(ch + 1) * plane];
                        du += gy * (ofy * (p[i01] - p[i00]) + sp.fy * (p[i11] - p[i10]));
                        dv += gy * (ofx * (p[i10] - p[i00]) + sp.fx * (p[i11] - p[i01]));
                    }
                }
                if need_flow {
                    dflow[i] = du * sp.gx;
                    dflow[plane + i] = dv * sp.gy;
                }
            }
        }
        (dimg, dflow)
    });
    let (dimgs, dflows): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let mut out = Vec::new();
    if need_img {
        out.push((image, dimgs.concat()));
    }
    if need_flow {
        out.push((flow, dflows.concat()));
    }
    out
}

pub(crate) fn blend_white_backward<T: Real>(
    g: &Graph<T>,
    warped: Var,
    mask: Var,
    strength: T,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let [n, c, h, w] = g.shape(warped)[..] else {
        unreachable!()
    };
    let plane = h * w;
    let ws = g.value(warped).data();
    let ms = g.value(mask).data();
    let mut out = Vec::new();
    if g.needs(warped) {
        let mut dw = vec![T::zero(); ws.len()];
        par::for_each_chunk_mut(&mut dw, plane, |idx, dst| {
            let s = idx / c;
            let m = &ms[s * plane..(s + 1) * plane];
            let gy = &grad[idx * plane..(idx + 1) * plane];
            for ((d, &gv), &mv) in dst.iter_mut().zip(gy).zip(m) {
                *d = gv * (T::one() - strength * mv);
            }
        });
        out.push((warped, dw));
    }
    if g.needs(mask) {
        let mut dm = vec![T::zero(); n * plane];
        for s in 0..n {
            let dst = &mut dm[s * plane..(s + 1) * plane];
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                for ((d, &gv), &wv) in dst
                    .iter_mut()
                    .zip(&grad[off..off + plane])
                    .zip(&ws[off..off + plane])
                {
                    *d += gv * strength * (T::one() - wv);
                }
            }
        }
        out.push((mask, dm));
    }
    out
}

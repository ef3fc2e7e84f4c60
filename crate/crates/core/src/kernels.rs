//! Raw forward/backward kernels on flat `[N, C, H, W]` buffers.
//!
//! Batch items are processed in parallel; every reduction over the batch
//! is summed afterwards in item order so results never depend on the
//! thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Geometry of one 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

fn out_extent(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < k {
        return Err(Error::config(format!(
            "kernel {k} larger than padded extent {padded}"
        )));
    }
    // A partial last window is tolerated only if what it leaves uncovered is padding.
    let rem = (padded - k) % stride;
    if rem > pad {
        return Err(Error::config(format!(
            "extent {len} with kernel {k}, stride {stride}, padding {pad} gives a non-integer output extent"
        )));
    }
    Ok((padded - k) / stride + 1)
}

impl ConvGeom {
    pub fn new(x: [usize; 4], wshape: [usize; 4], stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, h, w] = x;
        let [cout, wcin, kh, kw] = wshape;
        if wcin != cin {
            return Err(Error::dim(
                "conv2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::config(format!("kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::config("stride must be positive"));
        }
        let oh = out_extent(h, kh, stride, pad)?;
        let ow = out_extent(w, kw, stride, pad)?;
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn in_item(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_item(&self) -> usize {
        self.cout * self.p()
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.oh, self.ow]
    }
}

/// Output positions `lo..hi` whose tap `o * stride + tap - pad` lands inside `0..len`.
fn valid_span(out: usize, tap: usize, stride: usize, pad: usize, len: usize) -> (usize, usize) {
    let hi = if len + pad > tap { ((len - 1 + pad - tap) / stride + 1).min(out) } else { 0 };
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one item into a `[cin*kh*kw, oh*ow]` patch matrix (zero padding).
fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.p();
    for kj in 0..g.kw {
        let (lo, hi) = valid_span(g.ow, kj, g.stride, g.pad, g.w);
        for c in 0..g.cin {
            for ki in 0..g.kh {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if ii < 0 || ii as usize >= g.h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..][..g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let first = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                                *v = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.p();
    let spans: Vec<(usize, usize)> = (0..g.kw).map(|kj| valid_span(g.ow, kj, g.stride, g.pad, g.w)).collect();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for (kj, &(lo, hi)) in spans.iter().enumerate() {
                if lo >= hi {
                    continue;
                }
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let first = lo * g.stride + kj - g.pad;
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + ii as usize) * g.w..][..g.w];
                    let line = &src[oi * g.ow + lo..oi * g.ow + hi];
                    if g.stride == 1 {
                        dst[first..first + hi - lo].iter_mut().zip(line).for_each(|(d, &v)| *d += v);
                    } else {
                        dst[first..].iter_mut().step_by(g.stride).zip(line).for_each(|(d, &v)| *d += v);
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
}

pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let mut out = vec![T::zero(); g.n * g.out_item()];
    out.par_chunks_mut(g.out_item())
        .zip(x.par_chunks(g.in_item()))
        .for_each(|(o, xi)| {
            if let Some(b) = bias {
                for (co, plane) in o.chunks_mut(p).enumerate() {
                    plane.fill(b[co]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            if is_pointwise(g) {
                T::gemm(g.cout, k, p, T::one(), weight, k as isize, 1, xi, p as isize, 1, beta, o, p as isize, 1);
            } else {
                T::with_scratch(k * p, |cols| {
                    im2col(g, xi, cols);
                    T::gemm(g.cout, k, p, T::one(), weight, k as isize, 1, cols, p as isize, 1, beta, o, p as isize, 1);
                });
            }
        });
    out
}

/// Gradients of a convolution. Any of the three outputs may be skipped.
pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dout: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (k, p) = (g.k(), g.p());
    let items: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let xi = &x[n * g.in_item()..(n + 1) * g.in_item()];
            let di = &dout[n * g.out_item()..(n + 1) * g.out_item()];
            let pointwise = is_pointwise(g);
            let dw = need_dw.then(|| {
                let mut dw = vec![T::zero(); g.cout * k];
                if pointwise {
                    T::gemm(g.cout, p, k, T::one(), di, p as isize, 1, xi, 1, p as isize, T::zero(), &mut dw, k as isize, 1);
                } else {
                    T::with_scratch(k * p, |cols| {
                        im2col(g, xi, cols);
                        T::gemm(g.cout, p, k, T::one(), di, p as isize, 1, cols, 1, p as isize, T::zero(), &mut dw, k as isize, 1);
                    });
                }
                dw
            });
            let dx = need_dx.then(|| {
                let mut dx = vec![T::zero(); g.in_item()];
                if pointwise {
                    T::gemm(k, g.cout, p, T::one(), weight, 1, k as isize, di, p as isize, 1, T::zero(), &mut dx, p as isize, 1);
                } else {
                    T::with_scratch(k * p, |dcols| {
                        T::gemm(k, g.cout, p, T::one(), weight, 1, k as isize, di, p as isize, 1, T::zero(), dcols, p as isize, 1);
                        col2im(g, dcols, &mut dx);
                    });
                }
                dx
            });
            (dx, dw)
        })
        .collect();

    let mut dx_all = need_dx.then(|| Vec::with_capacity(g.n * g.in_item()));
    let mut dw_all = need_dw.then(|| vec![T::zero(); g.cout * k]);
    for (dx, dw) in items {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
            all.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b);
        }
    }
    let db = need_db.then(|| {
        (0..g.cout)
            .map(|co| {
                let mut s = 0.0f64;
                for n in 0..g.n {
                    let plane = &dout[n * g.out_item() + co * p..][..p];
                    s += plane.iter().map(|v| v.as_f64()).sum::<f64>();
                }
                T::lit(s)
            })
            .collect()
    });
    ConvGrads {
        dx: dx_all,
        dw: dw_all,
        db,
    }
}

/// Mirror index without edge repetition (`-1 -> 1`, `len -> len-2`), periodic for large overshoot.
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Per-plane 5-point Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]` with reflect padding.
pub fn laplacian_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let four = T::lit(4.0);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            let up = reflect_index(i as isize - 1, h);
            let down = reflect_index(i as isize + 1, h);
            for j in 0..w {
                let left = reflect_index(j as isize - 1, w);
                let right = reflect_index(j as isize + 1, w);
                dst[i * w + j] = src[up * w + j] + src[down * w + j] + src[i * w + left]
                    + src[i * w + right]
                    - four * src[i * w + j];
            }
        }
    }
    out
}

pub fn laplacian_backward<T: Real>(dout: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); dout.len()];
    let four = T::lit(4.0);
    for p in 0..planes {
        let g = &dout[p * h * w..(p + 1) * h * w];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            let up = reflect_index(i as isize - 1, h);
            let down = reflect_index(i as isize + 1, h);
            for j in 0..w {
                let left = reflect_index(j as isize - 1, w);
                let right = reflect_index(j as isize + 1, w);
                let gij = g[i * w + j];
                d[up * w + j] += gij;
                d[down * w + j] += gij;
                d[i * w + left] += gij;
                d[i * w + right] += gij;
                d[i * w + j] -= four * gij;
            }
        }
    }
    dx
}

pub fn upsample_nearest2_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oi in 0..oh {
            for oj in 0..ow {
                dst[oi * ow + oj] = src[(oi / 2) * w + oj / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward<T: Real>(dout: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let g = &dout[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let (a, b) = (2 * i * ow + 2 * j, (2 * i + 1) * ow + 2 * j);
                d[i * w + j] = g[a] + g[a + 1] + g[b] + g[b + 1];
            }
        }
    }
    dx
}

/// Per-plane statistics saved by instance normalization.
#[derive(Clone, Debug)]
pub struct PlaneStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn instance_norm_forward<T: Real>(
    x: &[T],
    [n, c, h, w]: [usize; 4],
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, PlaneStats<T>) {
    let m = h * w;
    let mut out = vec![T::zero(); x.len()];
    let mut stats = PlaneStats {
        mean: Vec::with_capacity(n * c),
        inv_std: Vec::with_capacity(n * c),
    };
    for (p, (src, dst)) in x.chunks(m).zip(out.chunks_mut(m)).enumerate() {
        let ch = p % c;
        let mean = src.iter().map(|v| v.as_f64()).sum::<f64>() / m as f64;
        let var = src.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / m as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        let (mean_t, inv_t) = (T::lit(mean), T::lit(inv_std));
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean_t) * inv_t * gamma[ch] + beta[ch];
        }
        stats.mean.push(mean_t);
        stats.inv_std.push(inv_t);
    }
    (out, stats)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn instance_norm_backward<T: Real>(
    x: &[T],
    [_, c, h, w]: [usize; 4],
    gamma: &[T],
    stats: &PlaneStats<T>,
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = h * w;
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for (p, ((src, g), d)) in x.chunks(m).zip(dout.chunks(m)).zip(dx.chunks_mut(m)).enumerate() {
        let ch = p % c;
        let (mean, inv_std) = (stats.mean[p].as_f64(), stats.inv_std[p].as_f64());
        let gam = gamma[ch].as_f64();
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for (&s, &gv) in src.iter().zip(g) {
            let xhat = (s.as_f64() - mean) * inv_std;
            let gv = gv.as_f64();
            sum_g += gv;
            sum_gx += gv * xhat;
        }
        dgamma[ch] += sum_gx;
        dbeta[ch] += sum_g;
        let mf = m as f64;
        for ((&s, &gv), dv) in src.iter().zip(g).zip(d.iter_mut()) {
            let xhat = (s.as_f64() - mean) * inv_std;
            let v = gam * inv_std / mf * (mf * gv.as_f64() - sum_g - xhat * sum_gx);
            *dv = T::lit(v);
        }
    }
    (
        dx,
        dgamma.into_iter().map(T::lit).collect(),
        dbeta.into_iter().map(T::lit).collect(),
    )
}

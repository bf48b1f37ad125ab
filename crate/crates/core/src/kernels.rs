//! Forward and backward kernels behind the graph ops.

use crate::error::{Result, ScdError};
use crate::tensor::Tensor4;

pub fn conv_out_dim(len: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || padded < k {
        return Err(ScdError::Shape(format!(
            "conv window {k} stride {stride} does not fit length {len} with padding {padding}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(x: [usize; 4], k: [usize; 4], stride: usize, pad: usize) -> Result<Self> {
        if x[1] != k[1] {
            return Err(ScdError::Shape(format!(
                "conv input has {} channels, kernel expects {}",
                x[1], k[1]
            )));
        }
        let oh = conv_out_dim(x[2], k[2], stride, pad)?;
        let ow = conv_out_dim(x[3], k[3], stride, pad)?;
        Ok(Self { c: x[1], h: x[2], w: x[3], kh: k[2], kw: k[3], stride, pad, oh, ow })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.cols();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let p = self.cols();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut gx[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// c[m x n] = beta*c + a[m x k] * b[k x n], all row-major unless strides say otherwise.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index the strides address.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d(x: &Tensor4, k: &Tensor4, bias: Option<&Tensor4>, stride: usize, pad: usize) -> Result<Tensor4> {
    let g = ConvGeom::new(x.shape(), k.shape(), stride, pad)?;
    let co = k.n();
    if let Some(b) = bias {
        if b.len() != co {
            return Err(ScdError::Shape(format!("bias has {} entries for {co} output channels", b.len())));
        }
    }
    let (r, p) = (g.rows(), g.cols());
    let mut out = Tensor4::zeros([x.n(), co, g.oh, g.ow]);
    let in_len = g.c * g.h * g.w;
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; r * p] };
    for i in 0..x.n() {
        let xb = &x.data()[i * in_len..(i + 1) * in_len];
        let src: &[f64] = if g.is_pointwise() {
            xb
        } else {
            g.im2col(xb, &mut cols);
            &cols
        };
        let ob = &mut out.data_mut()[i * co * p..(i + 1) * co * p];
        gemm(co, r, p, k.data(), (r, 1), src, (p, 1), 0.0, ob);
        if let Some(b) = bias {
            for (o, chunk) in ob.chunks_mut(p).enumerate() {
                let bv = b.data()[o];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of conv2d w.r.t. (x, kernel, bias); each only when requested.
pub fn conv2d_backward(
    x: &Tensor4,
    k: &Tensor4,
    gout: &Tensor4,
    stride: usize,
    pad: usize,
    want: [bool; 3],
) -> (Option<Tensor4>, Option<Tensor4>, Option<Tensor4>) {
    let g = ConvGeom::new(x.shape(), k.shape(), stride, pad).expect("validated in forward");
    let co = k.n();
    let (r, p) = (g.rows(), g.cols());
    let in_len = g.c * g.h * g.w;
    let mut gx = want[0].then(|| Tensor4::zeros(x.shape()));
    let mut gk = want[1].then(|| Tensor4::zeros(k.shape()));
    let mut gb = want[2].then(|| Tensor4::zeros([1, co, 1, 1]));
    let mut cols = vec![0.0; r * p];
    let mut gcols = vec![0.0; r * p];
    for i in 0..x.n() {
        let go = &gout.data()[i * co * p..(i + 1) * co * p];
        if let Some(gk) = gk.as_mut() {
            let xb = &x.data()[i * in_len..(i + 1) * in_len];
            let src: &[f64] = if g.is_pointwise() {
                xb
            } else {
                g.im2col(xb, &mut cols);
                &cols
            };
            gemm(co, p, r, go, (p, 1), src, (1, p), 1.0, gk.data_mut());
        }
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx.data_mut()[i * in_len..(i + 1) * in_len];
            if g.is_pointwise() {
                gemm(r, co, p, k.data(), (1, r), go, (p, 1), 1.0, gxb);
            } else {
                gemm(r, co, p, k.data(), (1, r), go, (p, 1), 0.0, &mut gcols);
                g.col2im(&gcols, gxb);
            }
        }
        if let Some(gb) = gb.as_mut() {
            for (o, chunk) in go.chunks(p).enumerate() {
                gb.data_mut()[o] += chunk.iter().sum::<f64>();
            }
        }
    }
    (gx, gk, gb)
}

/// Per-axis interpolation taps for align-corners-false bilinear upsampling.
fn taps(src_len: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..src_len * factor)
        .map(|d| {
            let s = ((d as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            let l1 = s - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub fn upsample(x: &Tensor4, factor: usize) -> Result<Tensor4> {
    if factor < 2 {
        return Err(ScdError::Param(format!("upsample factor {factor} < 2")));
    }
    let [n, c, h, w] = x.shape();
    let (ty, tx) = (taps(h, factor), taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let od = out.data_mut();
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut od[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    Ok(out)
}

pub fn upsample_backward(gout: &Tensor4, in_shape: [usize; 4], factor: usize) -> Tensor4 {
    let [n, c, h, w] = in_shape;
    let (ty, tx) = (taps(h, factor), taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let mut gx = Tensor4::zeros(in_shape);
    let gd = gx.data_mut();
    for plane in 0..n * c {
        let src = &gout.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut gd[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += wy0 * wx0 * g;
                dst[y0 * w + x1] += wy0 * wx1 * g;
                dst[y1 * w + x0] += wy1 * wx0 * g;
                dst[y1 * w + x1] += wy1 * wx1 * g;
            }
        }
    }
    gx
}

pub fn global_avg_pool(x: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let data = x.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    Tensor4::new([n, c, 1, 1], data).expect("shape")
}

/// Index of the first maximum of each spatial plane.
pub fn plane_argmax(x: &Tensor4) -> Vec<usize> {
    let hw = x.h() * x.w();
    x.data()
        .chunks(hw)
        .map(|p| {
            let mut best = 0;
            for (i, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn global_max_pool(x: &Tensor4) -> Tensor4 {
    let hw = x.h() * x.w();
    let data = plane_argmax(x).iter().enumerate().map(|(p, &i)| x.data()[p * hw + i]).collect();
    Tensor4::new([x.n(), x.c(), 1, 1], data).expect("shape")
}

pub fn channel_mean(x: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = Tensor4::zeros([n, 1, h, w]);
    for i in 0..n {
        let dst = &mut out.data_mut()[i * hw..(i + 1) * hw];
        for ch in 0..c {
            let src = &x.data()[(i * c + ch) * hw..][..hw];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
        dst.iter_mut().for_each(|d| *d /= c as f64);
    }
    out
}

/// Channel index of the first maximum at each (batch, pixel).
pub fn channel_argmax(x: &Tensor4) -> Vec<usize> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut idx = vec![0usize; n * hw];
    for i in 0..n {
        for p in 0..hw {
            let mut best = 0;
            let mut bv = x.data()[i * c * hw + p];
            for ch in 1..c {
                let v = x.data()[(i * c + ch) * hw + p];
                if v > bv {
                    bv = v;
                    best = ch;
                }
            }
            idx[i * hw + p] = best;
        }
    }
    idx
}

pub fn channel_max(x: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let arg = channel_argmax(x);
    let data = arg
        .iter()
        .enumerate()
        .map(|(k, &ch)| {
            let (i, p) = (k / hw, k % hw);
            x.data()[(i * c + ch) * hw + p]
        })
        .collect();
    Tensor4::new([n, 1, h, w], data).expect("shape")
}

pub fn concat_channels(xs: &[&Tensor4]) -> Result<Tensor4> {
    let first = xs.first().ok_or_else(|| ScdError::Shape("concat of nothing".into()))?;
    let [n, _, h, w] = first.shape();
    for t in xs {
        if t.n() != n || t.h() != h || t.w() != w {
            return Err(ScdError::Shape(format!("concat {:?} with {:?}", t.shape(), first.shape())));
        }
    }
    let c: usize = xs.iter().map(|t| t.c()).sum();
    let hw = h * w;
    let mut data = Vec::with_capacity(n * c * hw);
    for i in 0..n {
        for t in xs {
            let per = t.c() * hw;
            data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
        }
    }
    Tensor4::new([n, c, h, w], data)
}

pub fn slice_channels(x: &Tensor4, start: usize, len: usize) -> Result<Tensor4> {
    let [n, c, h, w] = x.shape();
    if len == 0 || start + len > c {
        return Err(ScdError::Shape(format!("channel slice {start}..{} of {c}", start + len)));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * len * hw);
    for i in 0..n {
        data.extend_from_slice(&x.data()[(i * c + start) * hw..(i * c + start + len) * hw]);
    }
    Tensor4::new([n, len, h, w], data)
}

pub fn broadcast_shape(a: [usize; 4], b: [usize; 4]) -> Result<[usize; 4]> {
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(ScdError::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

fn bstrides(s: [usize; 4], out: [usize; 4]) -> [usize; 4] {
    let full = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
    std::array::from_fn(|d| if s[d] == 1 && out[d] > 1 { 0 } else { full[d] })
}

/// Walk the output of a broadcast binary op, yielding (out, a, b) flat indices.
pub fn broadcast_walk(a: [usize; 4], b: [usize; 4], out: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let (sa, sb) = (bstrides(a, out), bstrides(b, out));
    let mut k = 0;
    for i in 0..out[0] {
        for c in 0..out[1] {
            for y in 0..out[2] {
                let ba = i * sa[0] + c * sa[1] + y * sa[2];
                let bb = i * sb[0] + c * sb[1] + y * sb[2];
                for x in 0..out[3] {
                    f(k, ba + x * sa[3], bb + x * sb[3]);
                    k += 1;
                }
            }
        }
    }
}

pub fn broadcast_binary(a: &Tensor4, b: &Tensor4, op: impl Fn(f64, f64) -> f64) -> Result<Tensor4> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let mut out = Tensor4::zeros(out_shape);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    broadcast_walk(a.shape(), b.shape(), out_shape, |k, ia, ib| od[k] = op(ad[ia], bd[ib]));
    Ok(out)
}

/// Per-pixel cosine over channels, with the unclamped raw ratio and the norms.
pub struct CosineParts {
    pub cos: Tensor4,
    pub raw: Vec<f64>,
    pub n1: Vec<f64>,
    pub n2: Vec<f64>,
}

pub const COS_EPS: f64 = 1e-12;

pub fn cosine_parts(x1: &Tensor4, x2: &Tensor4) -> Result<CosineParts> {
    if x1.shape() != x2.shape() {
        return Err(ScdError::Shape(format!("cosine of {:?} and {:?}", x1.shape(), x2.shape())));
    }
    let [n, c, h, w] = x1.shape();
    let hw = h * w;
    let mut dot = vec![0.0; n * hw];
    let mut s1 = vec![0.0; n * hw];
    let mut s2 = vec![0.0; n * hw];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for p in 0..hw {
                let (a, b) = (x1.data()[base + p], x2.data()[base + p]);
                dot[i * hw + p] += a * b;
                s1[i * hw + p] += a * a;
                s2[i * hw + p] += b * b;
            }
        }
    }
    let n1: Vec<f64> = s1.iter().map(|v| v.sqrt()).collect();
    let n2: Vec<f64> = s2.iter().map(|v| v.sqrt()).collect();
    let raw: Vec<f64> = (0..n * hw).map(|k| dot[k] / (n1[k] * n2[k]).max(COS_EPS)).collect();
    let cos = Tensor4::new([n, 1, h, w], raw.iter().map(|v| v.clamp(-1.0, 1.0)).collect())?;
    Ok(CosineParts { cos, raw, n1, n2 })
}

pub fn cosine_backward(x1: &Tensor4, x2: &Tensor4, gout: &Tensor4) -> (Tensor4, Tensor4) {
    let parts = cosine_parts(x1, x2).expect("validated in forward");
    let [n, c, h, w] = x1.shape();
    let hw = h * w;
    let mut g1 = Tensor4::zeros(x1.shape());
    let mut g2 = Tensor4::zeros(x2.shape());
    for i in 0..n {
        for p in 0..hw {
            let k = i * hw + p;
            let g = gout.data()[k];
            let raw = parts.raw[k];
            if g == 0.0 || raw.abs() >= 1.0 {
                continue;
            }
            let (n1, n2) = (parts.n1[k], parts.n2[k]);
            let denom = n1 * n2;
            for ch in 0..c {
                let idx = (i * c + ch) * hw + p;
                let (a, b) = (x1.data()[idx], x2.data()[idx]);
                if denom > COS_EPS {
                    g1.data_mut()[idx] = g * (b / denom - raw * a / (n1 * n1));
                    g2.data_mut()[idx] = g * (a / denom - raw * b / (n2 * n2));
                } else {
                    g1.data_mut()[idx] = g * b / COS_EPS;
                    g2.data_mut()[idx] = g * a / COS_EPS;
                }
            }
        }
    }
    (g1, g2)
}

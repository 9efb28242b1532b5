//! Dense row-major tensors and the raw forward/backward kernels behind the
//! autodiff tape. Everything here is plain `f64` arithmetic with no graph
//! bookkeeping; `autodiff` wires these kernels together.

use crate::error::{shape_err, PtdError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err("Tensor::from_vec", format!("zero dimension in {:?}", shape)));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "Tensor::from_vec",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Validity check for the finite-values invariant.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(PtdError::Numeric(format!("non-finite value in {}", what)))
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err(
                "Tensor::reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err(op, format!("expected 4-D tensor, got {:?}", self.shape))),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-filled border keeping the spatial size.
    Same,
    Valid,
}

fn check_same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape != b.shape {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// `c = beta * c + a(m x k) * b(k x n)` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: bounds of all three operands were checked above; c is
    // contiguous row-major with row stride n.
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

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn new(x: &Tensor, k: &Tensor, pad: Padding) -> Result<Self> {
        let (n, c, h, w) = x.dims4("conv2d input")?;
        let (f, kc, kh, kw) = k.dims4("conv2d kernel")?;
        if kc != c {
            return Err(shape_err(
                "conv2d",
                format!("kernel expects {} input channels, input has {}", kc, c),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err("conv2d", format!("kernel size {}x{} must be odd", kh, kw)));
        }
        let (ph, pw, oh, ow) = match pad {
            Padding::Same => (kh / 2, kw / 2, h, w),
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(shape_err(
                        "conv2d",
                        format!("valid {}x{} kernel larger than {}x{} input", kh, kw, h, w),
                    ));
                }
                (0, 0, h - kh + 1, w - kw + 1)
            }
        };
        Ok(Self { n, c, h, w, f, kh, kw, ph, pw, oh, ow })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let plane = d.out_plane();
    for ch in 0..d.c {
        let src = &x[ch * d.h * d.w..(ch + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (ch * d.kh + i) * d.kw + j;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                // valid output columns for this tap: 0 <= ox + j - pw < w
                let ox_lo = d.pw.saturating_sub(j);
                let ox_hi = (d.w + d.pw).saturating_sub(j).min(d.ow);
                for oy in 0..d.oh {
                    let out = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    let iy = oy + i;
                    if iy < d.ph || iy - d.ph >= d.h || ox_lo >= ox_hi {
                        out.fill(0.0);
                        continue;
                    }
                    let iy = iy - d.ph;
                    out[..ox_lo].fill(0.0);
                    out[ox_hi..].fill(0.0);
                    let ix0 = ox_lo + j - d.pw;
                    out[ox_lo..ox_hi]
                        .copy_from_slice(&src[iy * d.w + ix0..iy * d.w + ix0 + (ox_hi - ox_lo)]);
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let plane = d.out_plane();
    for ch in 0..d.c {
        let dst = &mut dx[ch * d.h * d.w..(ch + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (ch * d.kh + i) * d.kw + j;
                let src = &cols[row * plane..(row + 1) * plane];
                let ox_lo = d.pw.saturating_sub(j);
                let ox_hi = (d.w + d.pw).saturating_sub(j).min(d.ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..d.oh {
                    let iy = oy + i;
                    if iy < d.ph || iy - d.ph >= d.h {
                        continue;
                    }
                    let iy = iy - d.ph;
                    let ix0 = ox_lo + j - d.pw;
                    let out = &mut dst[iy * d.w + ix0..iy * d.w + ix0 + (ox_hi - ox_lo)];
                    for (o, s) in out.iter_mut().zip(&src[oy * d.ow + ox_lo..oy * d.ow + ox_hi]) {
                        *o += s;
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [N,C,H,W]` with `kernel: [F,C,kh,kw]` plus an
/// optional per-filter bias.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, pad: Padding) -> Result<Tensor> {
    let d = ConvDims::new(x, kernel, pad)?;
    if let Some(b) = bias {
        if b.len() != d.f {
            return Err(shape_err(
                "conv2d",
                format!("bias has {} entries for {} filters", b.len(), d.f),
            ));
        }
    }
    let plane = d.out_plane();
    let rows = d.col_rows();
    let mut out = Tensor::zeros(&[d.n, d.f, d.oh, d.ow]);
    let mut cols = if d.is_pointwise() { Vec::new() } else { vec![0.0; rows * plane] };
    let in_sample = d.c * d.h * d.w;
    let out_sample = d.f * plane;
    for s in 0..d.n {
        let xs = &x.data[s * in_sample..(s + 1) * in_sample];
        let ys = &mut out.data[s * out_sample..(s + 1) * out_sample];
        if let Some(b) = bias {
            for (f, chunk) in ys.chunks_mut(plane).enumerate() {
                chunk.fill(b.data[f]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        let src: &[f64] = if d.is_pointwise() {
            xs
        } else {
            im2col(xs, &d, &mut cols);
            &cols
        };
        gemm(d.f, rows, plane, &kernel.data, rows, 1, src, plane, 1, beta, ys);
    }
    Ok(out)
}

pub struct Conv2dGrads {
    pub input: Option<Tensor>,
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Vector-Jacobian product of [`conv2d`]. `need_input` skips the input
/// gradient when the input is a constant.
pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    dy: &Tensor,
    pad: Padding,
    need_input: bool,
) -> Result<Conv2dGrads> {
    let d = ConvDims::new(x, kernel, pad)?;
    if dy.shape() != [d.n, d.f, d.oh, d.ow] {
        return Err(shape_err("conv2d_backward", format!("upstream grad {:?}", dy.shape())));
    }
    let plane = d.out_plane();
    let rows = d.col_rows();
    let in_sample = d.c * d.h * d.w;
    let out_sample = d.f * plane;
    let mut dk = Tensor::zeros(kernel.shape());
    let mut db = Tensor::zeros(&[d.f]);
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut cols = if d.is_pointwise() { Vec::new() } else { vec![0.0; rows * plane] };
    let mut dcols = if d.is_pointwise() || !need_input { Vec::new() } else { vec![0.0; rows * plane] };
    for s in 0..d.n {
        let xs = &x.data[s * in_sample..(s + 1) * in_sample];
        let dys = &dy.data[s * out_sample..(s + 1) * out_sample];
        for (f, chunk) in dys.chunks(plane).enumerate() {
            db.data[f] += chunk.iter().sum::<f64>();
        }
        let src: &[f64] = if d.is_pointwise() {
            xs
        } else {
            im2col(xs, &d, &mut cols);
            &cols
        };
        // dK += dY (F x P) * cols^T (P x R)
        gemm(d.f, plane, rows, dys, plane, 1, src, 1, plane, 1.0, &mut dk.data);
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data[s * in_sample..(s + 1) * in_sample];
            // dcols = K^T (R x F) * dY (F x P)
            if d.is_pointwise() {
                gemm(rows, d.f, plane, &kernel.data, 1, rows, dys, plane, 1, 1.0, dxs);
            } else {
                gemm(rows, d.f, plane, &kernel.data, 1, rows, dys, plane, 1, 0.0, &mut dcols);
                col2im(&dcols, &d, dxs);
            }
        }
    }
    Ok(Conv2dGrads {
        input: dx,
        kernel: dk,
        bias: db,
    })
}

/// `max(0, x)` for `slope = 0`, otherwise `slope * x` on the negative side.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Tensor, dy: &Tensor, slope: f64) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { slope * g })
            .collect(),
    }
}

pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("avg_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err("avg_pool2", format!("spatial dims must be even, got {}x{}", h, w)));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for (p, dst) in out.data.chunks_mut(oh * ow).enumerate() {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        for r in 0..oh {
            for col in 0..ow {
                let i = 2 * r * w + 2 * col;
                dst[r * ow + col] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward(x_shape: &[usize], dy: &Tensor) -> Tensor {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(x_shape);
    for (p, dst) in dx.data.chunks_mut(h * w).enumerate() {
        let src = &dy.data[p * oh * ow..(p + 1) * oh * ow];
        for r in 0..h {
            for col in 0..w {
                dst[r * w + col] = 0.25 * src[(r / 2) * ow + col / 2];
            }
        }
    }
    dx
}

pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("upsample_nearest2")?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for (p, dst) in out.data.chunks_mut(oh * ow).enumerate() {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        for r in 0..oh {
            for col in 0..ow {
                dst[r * ow + col] = src[(r / 2) * w + col / 2];
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest2_backward(x_shape: &[usize], dy: &Tensor) -> Tensor {
    let (h, w) = (x_shape[2], x_shape[3]);
    let ow = 2 * w;
    let mut dx = Tensor::zeros(x_shape);
    for (p, dst) in dx.data.chunks_mut(h * w).enumerate() {
        let src = &dy.data[p * 4 * h * w..(p + 1) * 4 * h * w];
        for r in 0..h {
            for col in 0..w {
                let i = 2 * r * ow + 2 * col;
                dst[r * w + col] = src[i] + src[i + 1] + src[i + ow] + src[i + ow + 1];
            }
        }
    }
    dx
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ca, h, w) = a.dims4("concat_channels")?;
    let (nb, cb, hb, wb) = b.dims4("concat_channels")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(shape_err(
            "concat_channels",
            format!("{:?} vs {:?}: N, H, W must match", a.shape, b.shape),
        ));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for s in 0..n {
        data.extend_from_slice(&a.data[s * ca * plane..(s + 1) * ca * plane]);
        data.extend_from_slice(&b.data[s * cb * plane..(s + 1) * cb * plane]);
    }
    Ok(Tensor {
        shape: vec![n, ca + cb, h, w],
        data,
    })
}

/// Splits the upstream gradient of a channel concat back into its parts.
pub fn concat_channels_backward(a_shape: &[usize], b_shape: &[usize], dy: &Tensor) -> (Tensor, Tensor) {
    let (n, ca, cb) = (a_shape[0], a_shape[1], b_shape[1]);
    let plane = a_shape[2] * a_shape[3];
    let mut da = Vec::with_capacity(n * ca * plane);
    let mut db = Vec::with_capacity(n * cb * plane);
    for s in 0..n {
        let base = s * (ca + cb) * plane;
        da.extend_from_slice(&dy.data[base..base + ca * plane]);
        db.extend_from_slice(&dy.data[base + ca * plane..base + (ca + cb) * plane]);
    }
    (
        Tensor { shape: a_shape.to_vec(), data: da },
        Tensor { shape: b_shape.to_vec(), data: db },
    )
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "add")?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

/// Broadcast add of `bias: [N,C,1,1]` (or `[1,C,1,1]`) over `x: [N,C,H,W]`.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("add_channel_bias")?;
    let (bn, bc, bh, bw) = bias.dims4("add_channel_bias")?;
    if bc != c || bh != 1 || bw != 1 || (bn != n && bn != 1) {
        return Err(shape_err(
            "add_channel_bias",
            format!("bias {:?} does not broadcast over {:?}", bias.shape, x.shape),
        ));
    }
    let plane = h * w;
    let mut out = x.clone();
    for s in 0..n {
        for ch in 0..c {
            let b = bias.data[(if bn == 1 { 0 } else { s }) * c + ch];
            let off = (s * c + ch) * plane;
            for v in &mut out.data[off..off + plane] {
                *v += b;
            }
        }
    }
    Ok(out)
}

pub fn add_channel_bias_backward(bias_shape: &[usize], dy: &Tensor) -> Tensor {
    let (n, c) = (dy.shape[0], dy.shape[1]);
    let plane = dy.shape[2] * dy.shape[3];
    let bn = bias_shape[0];
    let mut db = Tensor::zeros(bias_shape);
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            db.data[(if bn == 1 { 0 } else { s }) * c + ch] += dy.data[off..off + plane].iter().sum::<f64>();
        }
    }
    db
}

/// Mean of squared elementwise differences.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape(a, b, "mse")?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// Sinusoidal embedding of one scalar per sample: `[N] -> [N, dim, 1, 1]`,
/// first half sines, second half cosines.
pub fn sinusoidal_embedding(positions: &[f64], dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(shape_err("sinusoidal_embedding", format!("dim {} must be even", dim)));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| p * f).collect();
        data.extend(args.iter().map(|a| a.sin()));
        data.extend(args.iter().map(|a| a.cos()));
    }
    Tensor::from_vec(vec![positions.len(), dim, 1, 1], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: [usize; 4], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv_zero_input_gives_zero() {
        let x = Tensor::zeros(&[1, 1, 3, 3]);
        let k = t4([1, 1, 3, 3], (0..9).map(|v| v as f64).collect());
        let y = conv2d(&x, &k, Some(&Tensor::zeros(&[1])), Padding::Same).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_pointwise_identity() {
        let x = t4([1, 1, 3, 3], (1..=9).map(|v| v as f64).collect());
        let k = t4([1, 1, 1, 1], vec![1.0]);
        let y = conv2d(&x, &k, Some(&Tensor::zeros(&[1])), Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_valid_all_ones_sums_window() {
        let x = t4([1, 1, 3, 3], (1..=9).map(|v| v as f64).collect());
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, None, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 45.0);
    }

    #[test]
    fn conv_same_matches_direct_loop() {
        // independent direct evaluation of the zero-padded cross-correlation
        let (n, c, h, w, f, kh, kw) = (2, 3, 5, 4, 2, 3, 5);
        let x = t4([n, c, h, w], (0..n * c * h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect());
        let k = t4([f, c, kh, kw], (0..f * c * kh * kw).map(|i| ((i * 13) % 7) as f64 - 3.0).collect());
        let b = Tensor::from_vec(vec![f], vec![0.5, -1.0]).unwrap();
        let y = conv2d(&x, &k, Some(&b), Padding::Same).unwrap();
        for s in 0..n {
            for fo in 0..f {
                for r in 0..h {
                    for col in 0..w {
                        let mut acc = b.data()[fo];
                        for ch in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = r as isize + i as isize - (kh / 2) as isize;
                                    let ix = col as isize + j as isize - (kw / 2) as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((s * c + ch) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((fo * c + ch) * kh + i) * kw + j];
                                }
                            }
                        }
                        let got = y.data()[((s * f + fo) * h + r) * w + col];
                        assert!((got - acc).abs() < 1e-12, "{} vs {}", got, acc);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), None, Padding::Same).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), None, Padding::Same).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), Some(&Tensor::zeros(&[2])), Padding::Same).is_err());
    }

    #[test]
    fn relu_and_leaky() {
        let x = Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(leaky_relu(&x, 0.0).data(), &[0.0, 0.0, 2.0]);
        let x = Tensor::from_vec(vec![1], vec![-2.0]).unwrap();
        assert!((leaky_relu(&x, 0.1).item() + 0.2).abs() < 1e-15);
    }

    #[test]
    fn pool_and_upsample() {
        let x = t4([1, 1, 2, 2], vec![0.0, 0.0, 0.0, 4.0]);
        assert_eq!(avg_pool2(&x).unwrap().data(), &[1.0]);
        assert!(avg_pool2(&Tensor::zeros(&[1, 1, 3, 4])).is_err());
        let c = Tensor::full(&[1, 1, 8, 8], 0.7);
        let p = avg_pool2(&avg_pool2(&c).unwrap()).unwrap();
        assert_eq!(p.shape(), &[1, 1, 2, 2]);
        assert!(p.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

        let one = t4([1, 1, 1, 1], vec![5.0]);
        assert_eq!(upsample_nearest2(&one).unwrap().data(), &[5.0; 4]);
        let x = t4([1, 2, 4, 4], (0..32).map(|v| v as f64 * 0.3).collect());
        let up = upsample_nearest2(&x).unwrap();
        assert_eq!(up.shape(), &[1, 2, 8, 8]);
        assert_eq!(avg_pool2(&up).unwrap(), x);
    }

    #[test]
    fn concat_add_mse() {
        let a = Tensor::zeros(&[2, 3, 4, 4]);
        let b = Tensor::zeros(&[2, 1, 4, 4]);
        assert_eq!(concat_channels(&a, &b).unwrap().shape(), &[2, 4, 4, 4]);
        assert!(concat_channels(&a, &Tensor::zeros(&[1, 1, 4, 4])).is_err());
        let z = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
        let two = Tensor::from_vec(vec![2], vec![2.0, 2.0]).unwrap();
        assert_eq!(mse(&z, &two).unwrap(), 4.0);
        assert_eq!(mse(&two, &two).unwrap(), 0.0);
        assert!(add(&z, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn channel_bias_broadcast() {
        let x = Tensor::zeros(&[2, 2, 2, 2]);
        let b = t4([2, 2, 1, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let y = add_channel_bias(&x, &b).unwrap();
        assert_eq!(&y.data()[..4], &[1.0; 4]);
        assert_eq!(&y.data()[12..], &[4.0; 4]);
        let g = add_channel_bias_backward(b.shape(), &Tensor::full(&[2, 2, 2, 2], 1.0));
        assert_eq!(g.data(), &[4.0; 4]);
    }

    #[test]
    fn embedding_shape_and_range() {
        let e = sinusoidal_embedding(&[0.0, 0.3], 64).unwrap();
        assert_eq!(e.shape(), &[2, 64, 1, 1]);
        assert_eq!(e.data()[0], 0.0);
        assert_eq!(e.data()[32], 1.0);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        assert!(sinusoidal_embedding(&[0.0], 3).is_err());
    }

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::from_vec(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::from_vec(vec![2, 0], vec![]).is_err());
    }
}

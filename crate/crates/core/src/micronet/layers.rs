//! Layer kernels on `[n, c, h, w]` tensors, each with its exact backward pass.

use super::{NetError, Tensor};

/// Lower bound applied to batch-norm variances.
pub const BN_VAR_FLOOR: f64 = 1e-5;
/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;
/// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` inside the loss.
pub const PROB_CLIP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    /// No padding; output shrinks by `kernel - 1`.
    Valid,
    /// Zero padding of `(kernel - 1) / 2` on each side (odd kernels keep size).
    Same,
}

impl Padding {
    pub fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => (kernel - 1) / 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Max,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn pad_input(x: &[f64], n: usize, c: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<f64> {
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let mut out = vec![0.0; n * c * hp * wp];
    for plane in 0..n * c {
        for y in 0..h {
            let src = &x[(plane * h + y) * w..(plane * h + y + 1) * w];
            let dst = (plane * hp + y + ph) * wp + pw;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
}

impl ConvGeom {
    fn padded(&self) -> (usize, usize) {
        (self.h + 2 * self.ph, self.w + 2 * self.pw)
    }

    fn out(&self) -> (usize, usize) {
        let (hp, wp) = self.padded();
        (hp - self.kh + 1, wp - self.kw + 1)
    }
}

fn conv_geom(input: &Tensor, weight: &Tensor, bias: &Tensor, padding: Padding) -> Result<ConvGeom, NetError> {
    let (n, cin, h, w) = input.nchw()?;
    let (cout, wcin, kh, kw) = match *weight.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(NetError::Shape(format!(
                "conv weight must be 4-D, got {:?}",
                weight.shape()
            )))
        }
    };
    if wcin != cin {
        return Err(NetError::Shape(format!(
            "conv weight expects {wcin} input channels, input has {cin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(NetError::Shape(format!(
            "conv bias must be [{cout}], got {:?}",
            bias.shape()
        )));
    }
    let geom = ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ph: padding.amount(kh),
        pw: padding.amount(kw),
    };
    let (hp, wp) = geom.padded();
    if kh > hp || kw > wp {
        return Err(NetError::KernelTooLarge {
            kernel: (kh, kw),
            input: (h, w),
        });
    }
    Ok(geom)
}

/// Unfolds one padded sample into `[cin * kh * kw, ho * wo]` patch rows.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (hp, wp) = g.padded();
    let (ho, wo) = g.out();
    let p = ho * wo;
    let mut r = 0;
    for ci in 0..g.cin {
        let src = &x[ci * hp * wp..(ci + 1) * hp * wp];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut cols[r * p..(r + 1) * p];
                for oy in 0..ho {
                    let start = (oy + ky) * wp + kx;
                    row[oy * wo..(oy + 1) * wo].copy_from_slice(&src[start..start + wo]);
                }
                r += 1;
            }
        }
    }
}

/// Adds patch-row gradients back onto one padded sample.
fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (hp, wp) = g.padded();
    let (ho, wo) = g.out();
    let p = ho * wo;
    let mut r = 0;
    for ci in 0..g.cin {
        let dst = &mut dx[ci * hp * wp..(ci + 1) * hp * wp];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &cols[r * p..(r + 1) * p];
                for oy in 0..ho {
                    let start = (oy + ky) * wp + kx;
                    for (d, v) in dst[start..start + wo].iter_mut().zip(&row[oy * wo..(oy + 1) * wo]) {
                        *d += v;
                    }
                }
                r += 1;
            }
        }
    }
}

/// Row-major matrix view: `(data, rows, cols)`, optionally read transposed.
struct Mat<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<'a> Mat<'a> {
    fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    /// `(rows, cols, row stride, col stride)` as seen by the product.
    fn view(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

/// `c += a * b` with `c` row-major `[m, n]`.
fn gemm_acc(a: Mat, b: Mat, c: &mut [f64]) {
    let (m, k, rsa, csa) = a.view();
    let (kb, n, rsb, csb) = b.view();
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!(c.len(), m * n, "output size");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the views above describe in-bounds strided access to slices
    // of the asserted sizes, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation plus bias, before any activation. Output spatial size
/// is `(h + 2p - kh + 1) x (w + 2p - kw + 1)` (stride 1).
pub fn conv2d_linear(input: &Tensor, weight: &Tensor, bias: &Tensor, padding: Padding) -> Result<Tensor, NetError> {
    let g = conv_geom(input, weight, bias, padding)?;
    let (hp, wp) = g.padded();
    let (ho, wo) = g.out();
    let padded;
    let x: &[f64] = if g.ph == 0 && g.pw == 0 {
        input.data()
    } else {
        padded = pad_input(input.data(), g.n, g.cin, g.h, g.w, g.ph, g.pw);
        &padded
    };
    let (p, rows) = (ho * wo, g.cin * g.kh * g.kw);
    let wt = weight.data();
    let mut cols = vec![0.0; rows * p];
    let mut out = vec![0.0; g.n * g.cout * p];
    for b in 0..g.n {
        im2col(&x[b * g.cin * hp * wp..(b + 1) * g.cin * hp * wp], &g, &mut cols);
        let planes = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        for (co, plane) in planes.chunks_exact_mut(p).enumerate() {
            plane.fill(bias.data()[co]);
        }
        gemm_acc(Mat::new(wt, g.cout, rows), Mat::new(&cols, rows, p), planes);
    }
    Ok(Tensor::from_raw(vec![g.n, g.cout, ho, wo], out))
}

/// Convolution followed by the rectifier.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, padding: Padding) -> Result<Tensor, NetError> {
    Ok(mrelu(&conv2d_linear(input, weight, bias, padding)?))
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradients of [`conv2d_linear`] given the upstream gradient `dout`.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    dout: &Tensor,
    padding: Padding,
    need_input_grad: bool,
) -> Result<ConvGrads, NetError> {
    let bias = Tensor::zeros(&[weight.shape()[0]]);
    let g = conv_geom(input, weight, &bias, padding)?;
    let (hp, wp) = g.padded();
    let (ho, wo) = g.out();
    if dout.shape() != [g.n, g.cout, ho, wo] {
        return Err(NetError::Shape(format!(
            "conv upstream gradient must be {:?}, got {:?}",
            [g.n, g.cout, ho, wo],
            dout.shape()
        )));
    }
    let padded;
    let x: &[f64] = if g.ph == 0 && g.pw == 0 {
        input.data()
    } else {
        padded = pad_input(input.data(), g.n, g.cin, g.h, g.w, g.ph, g.pw);
        &padded
    };
    let (p, rows) = (ho * wo, g.cin * g.kh * g.kw);
    let plane_in = g.cin * hp * wp;
    let wt = weight.data();
    let dy = dout.data();
    let mut dw = vec![0.0; wt.len()];
    let mut db = vec![0.0; g.cout];
    let mut cols = vec![0.0; rows * p];
    let mut dcols = vec![0.0; if need_input_grad { rows * p } else { 0 }];
    let mut dx = vec![0.0; if need_input_grad { g.n * plane_in } else { 0 }];

    for b in 0..g.n {
        im2col(&x[b * plane_in..(b + 1) * plane_in], &g, &mut cols);
        let grad = &dy[b * g.cout * p..(b + 1) * g.cout * p];
        for (co, gp) in grad.chunks_exact(p).enumerate() {
            db[co] += gp.iter().sum::<f64>();
        }
        gemm_acc(Mat::new(grad, g.cout, p), Mat::new(&cols, rows, p).t(), &mut dw);
        if need_input_grad {
            dcols.fill(0.0);
            gemm_acc(Mat::new(wt, g.cout, rows).t(), Mat::new(grad, g.cout, p), &mut dcols);
            col2im(&dcols, &g, &mut dx[b * plane_in..(b + 1) * plane_in]);
        }
    }

    let input_grad = need_input_grad.then(|| {
        let data = if g.ph == 0 && g.pw == 0 {
            dx
        } else {
            let mut cropped = Vec::with_capacity(g.n * g.cin * g.h * g.w);
            for plane in 0..g.n * g.cin {
                for y in 0..g.h {
                    let start = (plane * hp + y + g.ph) * wp + g.pw;
                    cropped.extend_from_slice(&dx[start..start + g.w]);
                }
            }
            cropped
        };
        Tensor::from_raw(input.shape().to_vec(), data)
    });
    Ok(ConvGrads {
        input: input_grad,
        weight: Tensor::from_raw(weight.shape().to_vec(), dw),
        bias: Tensor::from_raw(vec![g.cout], db),
    })
}

/// Non-overlapping pooling with stride equal to the window. Also returns,
/// for max pooling, the flat input index that won each output cell (first
/// occurrence in row-major window order on ties).
pub fn pool_forward_routed(
    input: &Tensor,
    window: (usize, usize),
    kind: PoolKind,
) -> Result<(Tensor, Vec<usize>), NetError> {
    let (n, c, h, w) = input.nchw()?;
    let (fh, fw) = window;
    if fh == 0 || fw == 0 || fh > h || fw > w {
        return Err(NetError::WindowTooLarge { window, input: (h, w) });
    }
    let (ho, wo) = ((h - fh) / fh + 1, (w - fw) / fw + 1);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut route = Vec::new();
    let area = (fh * fw) as f64;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                match kind {
                    PoolKind::Max => {
                        let mut best_idx = base + oy * fh * w + ox * fw;
                        for dy in 0..fh {
                            for dx in 0..fw {
                                let idx = base + (oy * fh + dy) * w + ox * fw + dx;
                                if x[idx] > x[best_idx] {
                                    best_idx = idx;
                                }
                            }
                        }
                        route.push(best_idx);
                        out.push(x[best_idx]);
                    }
                    PoolKind::Average => {
                        let mut acc = 0.0;
                        for dy in 0..fh {
                            for dx in 0..fw {
                                acc += x[base + (oy * fh + dy) * w + ox * fw + dx];
                            }
                        }
                        out.push(acc / area);
                    }
                }
            }
        }
    }
    let shape = if input.shape().len() == 4 {
        vec![n, c, ho, wo]
    } else {
        vec![n, c]
    };
    Ok((Tensor::from_raw(shape, out), route))
}

pub fn pool_forward(input: &Tensor, window: (usize, usize), kind: PoolKind) -> Result<Tensor, NetError> {
    pool_forward_routed(input, window, kind).map(|(t, _)| t)
}

pub fn pool_backward(
    input_shape: &[usize],
    dout: &Tensor,
    window: (usize, usize),
    kind: PoolKind,
    route: &[usize],
) -> Tensor {
    let mut dx = vec![0.0; input_shape.iter().product()];
    match kind {
        PoolKind::Max => {
            for (&idx, &g) in route.iter().zip(dout.data()) {
                dx[idx] += g;
            }
        }
        PoolKind::Average => {
            let (h, w) = (input_shape[2], input_shape[3]);
            let (fh, fw) = window;
            let (ho, wo) = (dout.shape()[2], dout.shape()[3]);
            let share = 1.0 / (fh * fw) as f64;
            for (cell, &g) in dout.data().iter().enumerate() {
                let plane = cell / (ho * wo);
                let oy = (cell % (ho * wo)) / wo;
                let ox = cell % wo;
                for dy in 0..fh {
                    for dx_ in 0..fw {
                        dx[plane * h * w + (oy * fh + dy) * w + ox * fw + dx_] += g * share;
                    }
                }
            }
        }
    }
    Tensor::from_raw(input_shape.to_vec(), dx)
}

/// `max(0, x)` elementwise.
pub fn mrelu(x: &Tensor) -> Tensor {
    Tensor::from_raw(
        x.shape().to_vec(),
        x.data().iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect(),
    )
}

/// Passes the gradient where the pre-activation is strictly positive.
pub fn mrelu_backward(pre: &Tensor, dout: &Tensor) -> Tensor {
    Tensor::from_raw(
        pre.shape().to_vec(),
        pre.data()
            .iter()
            .zip(dout.data())
            .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
            .collect(),
    )
}

/// Per-channel batch normalization with learnable scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub mode: Mode,
    pub normalized: Tensor,
    pub std: Vec<f64>,
    pub floored: Vec<bool>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes without touching the running statistics.
    pub fn normalize(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, BnCache), NetError> {
        let (n, c, h, w) = x.nchw()?;
        if c != self.channels() {
            return Err(NetError::Shape(format!(
                "batch norm has {} channels, input has {c}",
                self.channels()
            )));
        }
        if mode == Mode::Train && n < 2 {
            return Err(NetError::BatchTooSmall(n));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let data = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        match mode {
            Mode::Train => {
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += data[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    mean[ch] = s / m;
                    let mut s2 = 0.0;
                    for b in 0..n {
                        s2 += data[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                    var[ch] = s2 / m;
                }
            }
            Mode::Eval => {
                mean.copy_from_slice(self.running_mean.data());
                var.copy_from_slice(self.running_var.data());
            }
        }
        let floored: Vec<bool> = var.iter().map(|&v| v < BN_VAR_FLOOR).collect();
        let std: Vec<f64> = var.iter().map(|&v| v.max(BN_VAR_FLOOR).sqrt()).collect();
        let mut normalized = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for b in 0..n {
            for ch in 0..c {
                let (g, be) = (self.gamma.data()[ch], self.beta.data()[ch]);
                let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for i in range {
                    let z = (data[i] - mean[ch]) / std[ch];
                    normalized[i] = z;
                    out[i] = g * z + be;
                }
            }
        }
        let cache = BnCache {
            mode,
            normalized: Tensor::from_raw(x.shape().to_vec(), normalized),
            std,
            floored,
            batch_mean: mean,
            batch_var: var,
        };
        Ok((Tensor::from_raw(x.shape().to_vec(), out), cache))
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running(&mut self, cache: &BnCache) {
        if cache.mode != Mode::Train {
            return;
        }
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&cache.batch_mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&cache.batch_var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }

    /// Train mode normalizes with batch statistics and updates the running
    /// statistics; eval mode uses the running statistics.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NetError> {
        let (y, cache) = self.normalize(x, mode)?;
        self.update_running(&cache);
        Ok(y)
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub fn backward(&self, cache: &BnCache, dout: &Tensor) -> (Tensor, Tensor, Tensor) {
        let shape = dout.shape().to_vec();
        let (n, c, h, w) = dout.nchw().expect("shape checked in forward");
        let hw = h * w;
        let m = (n * hw) as f64;
        let xhat = cache.normalized.data();
        let dy = dout.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dx = vec![0.0; dy.len()];
        for ch in 0..c {
            let g = self.gamma.data()[ch];
            let idx = || (0..n).flat_map(move |b| (b * c + ch) * hw..(b * c + ch + 1) * hw);
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for i in idx() {
                dgamma[ch] += dy[i] * xhat[i];
                dbeta[ch] += dy[i];
                sum_d += dy[i] * g;
                sum_dx += dy[i] * g * xhat[i];
            }
            let std = cache.std[ch];
            match cache.mode {
                Mode::Eval => {
                    for i in idx() {
                        dx[i] = dy[i] * g / std;
                    }
                }
                Mode::Train => {
                    let mean_d = sum_d / m;
                    let mean_dx = if cache.floored[ch] { 0.0 } else { sum_dx / m };
                    for i in idx() {
                        dx[i] = (dy[i] * g - mean_d - xhat[i] * mean_dx) / std;
                    }
                }
            }
        }
        (
            Tensor::from_raw(shape, dx),
            Tensor::from_raw(vec![c], dgamma),
            Tensor::from_raw(vec![c], dbeta),
        )
    }
}

/// Flattens every sample of a batch into one row: `[n, rest]`.
pub fn flatten(x: &Tensor) -> Tensor {
    let n = x.shape()[0];
    Tensor::from_raw(vec![n, x.len() / n], x.data().to_vec())
}

fn dense_dims(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize), NetError> {
    let n = x.shape()[0];
    let fan_in = x.len() / n;
    match *weight.shape() {
        [out, inp] if inp == fan_in && bias.shape() == [out] => Ok((n, inp, out)),
        _ => Err(NetError::Shape(format!(
            "dense weight {:?} / bias {:?} incompatible with {fan_in} inputs",
            weight.shape(),
            bias.shape()
        ))),
    }
}

/// `z = x W^T + b` with `x` flattened per sample and `W` of shape `[out, in]`.
pub fn dense_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, NetError> {
    let (n, inp, out) = dense_dims(x, weight, bias)?;
    let mut z = Vec::with_capacity(n * out);
    for b in 0..n {
        let row = &x.data()[b * inp..(b + 1) * inp];
        for o in 0..out {
            let wrow = &weight.data()[o * inp..(o + 1) * inp];
            z.push(bias.data()[o] + wrow.iter().zip(row).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    Ok(Tensor::from_raw(vec![n, out], z))
}

/// Returns `(dx, dW, db)` for [`dense_forward`]; `dx` has the flattened shape.
pub fn dense_backward(x: &Tensor, weight: &Tensor, dz: &Tensor) -> (Tensor, Tensor, Tensor) {
    let n = x.shape()[0];
    let inp = x.len() / n;
    let out = weight.shape()[0];
    let mut dx = vec![0.0; n * inp];
    let mut dw = vec![0.0; out * inp];
    let mut db = vec![0.0; out];
    for b in 0..n {
        let row = &x.data()[b * inp..(b + 1) * inp];
        for o in 0..out {
            let g = dz.data()[b * out + o];
            db[o] += g;
            let wrow = &weight.data()[o * inp..(o + 1) * inp];
            for i in 0..inp {
                dw[o * inp + i] += g * row[i];
                dx[b * inp + i] += g * wrow[i];
            }
        }
    }
    (
        Tensor::from_raw(vec![n, inp], dx),
        Tensor::from_raw(vec![out, inp], dw),
        Tensor::from_raw(vec![out], db),
    )
}

pub fn logistic(z: &Tensor) -> Tensor {
    Tensor::from_raw(
        z.shape().to_vec(),
        z.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
    )
}

/// Affine map followed by per-class logistic probabilities.
pub fn dense_logistic_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, NetError> {
    Ok(logistic(&dense_forward(x, weight, bias)?))
}

#[inline]
fn clip(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

/// Mean over samples of the summed per-class binary cross-entropy.
pub fn bce_loss(predictions: &Tensor, targets: &Tensor) -> Result<f64, NetError> {
    if predictions.shape() != targets.shape() || predictions.shape().len() != 2 {
        return Err(NetError::Shape(format!(
            "predictions {:?} and targets {:?} must be equal [samples, classes]",
            predictions.shape(),
            targets.shape()
        )));
    }
    let samples = predictions.shape()[0] as f64;
    let total: f64 = predictions
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &t)| {
            let p = clip(p);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / samples)
}

/// Gradient of [`bce_loss`] with respect to the logits feeding the logistic
/// layer: `(p - t) / samples`, zero where the probability was clipped.
pub fn bce_logit_grad(predictions: &Tensor, targets: &Tensor) -> Tensor {
    let samples = predictions.shape()[0] as f64;
    Tensor::from_raw(
        predictions.shape().to_vec(),
        predictions
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &t)| {
                if !(PROB_CLIP..=1.0 - PROB_CLIP).contains(&p) {
                    0.0
                } else {
                    (p - t) / samples
                }
            })
            .collect(),
    )
}

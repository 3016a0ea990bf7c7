//! Layer descriptions and the dense convolution / affine kernels.
//!
//! Convolutions are lowered to GEMM through an im2col buffer that holds the
//! whole batch side by side (`[C*k^3, N*P]`), so a layer is one matrix
//! product per pass and the reduction order never depends on threading.

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv3d,
    #[serde(rename = "convtranspose3d")]
    ConvTranspose3d,
    Linear,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Extra extent added on the far side of each output axis `[d, h, w]`
    /// (transposed convolutions only).
    pub output_padding: [usize; 3],
}

impl LayerSpec {
    pub fn conv3d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kind: LayerKind::Conv3d,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding: [0; 3],
        }
    }

    pub fn conv_transpose3d(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: [usize; 3],
    ) -> Self {
        Self {
            kind: LayerKind::ConvTranspose3d,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding,
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        Self {
            kind: LayerKind::Linear,
            in_channels: in_features,
            out_channels: out_features,
            kernel: 1,
            stride: 1,
            padding: 0,
            output_padding: [0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel < 1 || self.stride < 1 {
            return Err(Error::Parameter(format!("kernel and stride must be >= 1: {self:?}")));
        }
        if self.output_padding.iter().any(|&op| op >= self.stride) {
            return Err(Error::Parameter(format!("output_padding must be < stride: {self:?}")));
        }
        if self.kind != LayerKind::ConvTranspose3d && self.output_padding != [0; 3] {
            return Err(Error::Parameter(format!("output_padding only applies to transposed convs: {self:?}")));
        }
        Ok(())
    }

    /// Spatial output extent along `axis` (0 = d, 1 = h, 2 = w).
    pub fn output_size(&self, n: usize, axis: usize) -> Result<usize> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        match self.kind {
            LayerKind::Conv3d => {
                if n + 2 * p < k {
                    return Err(Error::Shape(format!("input extent {n} smaller than kernel {k} after padding {p}")));
                }
                Ok((n + 2 * p - k) / s + 1)
            }
            LayerKind::ConvTranspose3d => {
                let full = (n - 1) * s + k + self.output_padding[axis];
                if full <= 2 * p {
                    return Err(Error::Shape(format!("transposed conv output for extent {n} is empty")));
                }
                Ok(full - 2 * p)
            }
            LayerKind::Linear | LayerKind::Relu => Ok(n),
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let k = self.kernel;
        match self.kind {
            LayerKind::Conv3d => vec![self.out_channels, self.in_channels, k, k, k],
            LayerKind::ConvTranspose3d => vec![self.in_channels, self.out_channels, k, k, k],
            LayerKind::Linear => vec![self.in_channels, self.out_channels],
            LayerKind::Relu => vec![],
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv3d | LayerKind::ConvTranspose3d => self.in_channels * self.kernel.pow(3),
            LayerKind::Linear => self.in_channels,
            LayerKind::Relu => 0,
        }
    }
}

/// Geometry of one convolution, described from the forward-conv point of
/// view: `big` is the conv input (transposed-conv output), `small` the conv
/// output (transposed-conv input).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub big: [usize; 3],
    pub small: [usize; 3],
}

impl ConvGeom {
    fn big_len(&self) -> usize {
        self.big.iter().product()
    }

    fn small_len(&self) -> usize {
        self.small.iter().product()
    }

    /// Map an output position and kernel offset to an input coordinate.
    #[inline]
    fn source(&self, o: usize, kk: usize, n: usize) -> Option<usize> {
        let i = (o * self.s + kk) as isize - self.p as isize;
        (i >= 0 && (i as usize) < n).then_some(i as usize)
    }
}

/// Copy `x` (`[C, big]`) into columns `[col0, col0 + P)` of `cols`, a row-major
/// `[C*k^3, ld]` matrix.
fn im2col<T: Real>(x: &[T], c: usize, g: &ConvGeom, cols: &mut [T], ld: usize, col0: usize) {
    let k = g.k;
    let [bd, bh, bw] = g.big;
    let [sd, sh, sw] = g.small;
    for ci in 0..c {
        let xc = &x[ci * g.big_len()..(ci + 1) * g.big_len()];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let dst = &mut cols[row * ld + col0..row * ld + col0 + g.small_len()];
                    let mut o = 0;
                    for od in 0..sd {
                        let id = g.source(od, kd, bd);
                        for oh in 0..sh {
                            let ih = g.source(oh, kh, bh);
                            match (id, ih) {
                                (Some(id), Some(ih)) => {
                                    let base = (id * bh + ih) * bw;
                                    for ow in 0..sw {
                                        dst[o] = match g.source(ow, kw, bw) {
                                            Some(iw) => xc[base + iw],
                                            None => T::zero(),
                                        };
                                        o += 1;
                                    }
                                }
                                _ => {
                                    dst[o..o + sw].fill(T::zero());
                                    o += sw;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add columns `[col0, col0 + P)` of `cols` back into `x` (`[C, big]`).
fn col2im<T: Real>(cols: &[T], ld: usize, col0: usize, c: usize, g: &ConvGeom, x: &mut [T]) {
    let k = g.k;
    let [bd, bh, bw] = g.big;
    let [sd, sh, sw] = g.small;
    for ci in 0..c {
        let xc = &mut x[ci * g.big_len()..(ci + 1) * g.big_len()];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let src = &cols[row * ld + col0..row * ld + col0 + g.small_len()];
                    let mut o = 0;
                    for od in 0..sd {
                        let id = g.source(od, kd, bd);
                        for oh in 0..sh {
                            let ih = g.source(oh, kh, bh);
                            if let (Some(id), Some(ih)) = (id, ih) {
                                let base = (id * bh + ih) * bw;
                                for ow in 0..sw {
                                    if let Some(iw) = g.source(ow, kw, bw) {
                                        xc[base + iw] += src[o];
                                    }
                                    o += 1;
                                }
                            } else {
                                o += sw;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[N, C, P]` -> `[C, N*P]`
fn to_channel_major<T: Real>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * p + ni * p..ci * n * p + (ni + 1) * p]
                .copy_from_slice(&x[(ni * c + ci) * p..(ni * c + ci + 1) * p]);
        }
    }
    out
}

/// `[C, N*P]` -> `[N, C, P]`
fn to_batch_major<T: Real>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * p..(ni * c + ci + 1) * p]
                .copy_from_slice(&x[ci * n * p + ni * p..ci * n * p + (ni + 1) * p]);
        }
    }
    out
}

fn check_5d<T: Real>(x: &Tensor<T>, channels: usize, what: &str) -> Result<(usize, [usize; 3])> {
    let s = x.shape();
    if s.len() != 5 || s[1] != channels {
        return Err(Error::Shape(format!("{what}: expected [N, {channels}, D, H, W], got {s:?}")));
    }
    Ok((s[0], [s[2], s[3], s[4]]))
}

fn check_params<T: Real>(spec: &LayerSpec, w: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    spec.validate()?;
    w.expect_shape(&spec.weight_shape())?;
    b.expect_shape(&[spec.out_channels])
}

/// Resolve the geometry of a conv / transposed conv applied to `input`.
pub fn conv_geometry<T: Real>(input: &Tensor<T>, spec: &LayerSpec) -> Result<(usize, ConvGeom)> {
    let (n, dims) = check_5d(input, spec.in_channels, "conv input")?;
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = spec.output_size(dims[a], a)?;
    }
    let (big, small) = match spec.kind {
        LayerKind::Conv3d => (dims, out),
        LayerKind::ConvTranspose3d => (out, dims),
        other => return Err(Error::Contract(format!("{other:?} is not a convolution"))),
    };
    Ok((
        n,
        ConvGeom {
            k: spec.kernel,
            s: spec.stride,
            p: spec.padding,
            big,
            small,
        },
    ))
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], p: usize) {
    for (chunk, ci) in out.chunks_mut(p).zip((0..bias.len()).cycle()) {
        for v in chunk {
            *v += bias[ci];
        }
    }
}

fn bias_grad<T: Real>(dy: &[T], c: usize, p: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for (chunk, ci) in dy.chunks(p).zip((0..c).cycle()) {
        for &v in chunk {
            db[ci] += v;
        }
    }
    db
}

/// 3D cross-correlation; weights `[Cout, Cin, k, k, k]`.
pub fn conv3d<T: Real>(input: &Tensor<T>, spec: &LayerSpec, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if spec.kind != LayerKind::Conv3d {
        return Err(Error::Contract("conv3d needs a conv3d layer spec".into()));
    }
    check_params(spec, weights, bias)?;
    let (n, g) = conv_geometry(input, spec)?;
    Ok(conv3d_forward(input, weights, bias, spec, n, &g))
}

pub(crate) fn conv3d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    spec: &LayerSpec,
    n: usize,
    g: &ConvGeom,
) -> Tensor<T> {
    let (cin, cout, k3) = (spec.in_channels, spec.out_channels, g.k.pow(3));
    let (pin, pout) = (g.big_len(), g.small_len());
    let ld = n * pout;
    let mut cols = vec![T::zero(); cin * k3 * ld];
    for ni in 0..n {
        im2col(&x.data()[ni * cin * pin..(ni + 1) * cin * pin], cin, g, &mut cols, ld, ni * pout);
    }
    let mut out_cm = vec![T::zero(); cout * ld];
    T::gemm(cout, cin * k3, ld, T::one(), w.data(), false, &cols, false, T::zero(), &mut out_cm);
    let mut out = to_batch_major(&out_cm, n, cout, pout);
    add_bias(&mut out, b.data(), pout);
    let [d, h, wd] = g.small;
    Tensor::new(vec![n, cout, d, h, wd], out).expect("conv output shape")
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub(crate) fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &LayerSpec,
    n: usize,
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (cin, cout, k3) = (spec.in_channels, spec.out_channels, g.k.pow(3));
    let (pin, pout) = (g.big_len(), g.small_len());
    let ld = n * pout;
    let mut cols = vec![T::zero(); cin * k3 * ld];
    for ni in 0..n {
        im2col(&x.data()[ni * cin * pin..(ni + 1) * cin * pin], cin, g, &mut cols, ld, ni * pout);
    }
    let dy_cm = to_channel_major(dy.data(), n, cout, pout);
    let mut dw = vec![T::zero(); cout * cin * k3];
    T::gemm(cout, ld, cin * k3, T::one(), &dy_cm, false, &cols, true, T::zero(), &mut dw);
    let db = bias_grad(dy.data(), cout, pout);
    let dx = need_dx.then(|| {
        // reuse the column buffer for d(cols)
        T::gemm(cin * k3, cout, ld, T::one(), w.data(), true, &dy_cm, false, T::zero(), &mut cols);
        let mut dx = vec![T::zero(); n * cin * pin];
        for ni in 0..n {
            col2im(&cols, ld, ni * pout, cin, g, &mut dx[ni * cin * pin..(ni + 1) * cin * pin]);
        }
        Tensor::new(x.shape().to_vec(), dx).expect("dx shape")
    });
    (
        dx,
        Tensor::new(w.shape().to_vec(), dw).expect("dw shape"),
        Tensor::new(vec![cout], db).expect("db shape"),
    )
}

/// Transposed 3D convolution (gradient of conv3d w.r.t. its input); weights
/// `[Cin, Cout, k, k, k]`.
pub fn conv_transpose3d<T: Real>(
    input: &Tensor<T>,
    spec: &LayerSpec,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    if spec.kind != LayerKind::ConvTranspose3d {
        return Err(Error::Contract("conv_transpose3d needs a convtranspose3d layer spec".into()));
    }
    check_params(spec, weights, bias)?;
    let (n, g) = conv_geometry(input, spec)?;
    Ok(conv_transpose3d_forward(input, weights, bias, spec, n, &g))
}

pub(crate) fn conv_transpose3d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    spec: &LayerSpec,
    n: usize,
    g: &ConvGeom,
) -> Tensor<T> {
    let (cin, cout, k3) = (spec.in_channels, spec.out_channels, g.k.pow(3));
    let (pin, pout) = (g.small_len(), g.big_len());
    let ld = n * pin;
    let x_cm = to_channel_major(x.data(), n, cin, pin);
    let mut cols = vec![T::zero(); cout * k3 * ld];
    T::gemm(cout * k3, cin, ld, T::one(), w.data(), true, &x_cm, false, T::zero(), &mut cols);
    let mut out = vec![T::zero(); n * cout * pout];
    for ni in 0..n {
        col2im(&cols, ld, ni * pin, cout, g, &mut out[ni * cout * pout..(ni + 1) * cout * pout]);
    }
    add_bias(&mut out, b.data(), pout);
    let [d, h, wd] = g.big;
    Tensor::new(vec![n, cout, d, h, wd], out).expect("conv transpose output shape")
}

pub(crate) fn conv_transpose3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &LayerSpec,
    n: usize,
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (cin, cout, k3) = (spec.in_channels, spec.out_channels, g.k.pow(3));
    let (pin, pout) = (g.small_len(), g.big_len());
    let ld = n * pin;
    let mut dcols = vec![T::zero(); cout * k3 * ld];
    for ni in 0..n {
        im2col(&dy.data()[ni * cout * pout..(ni + 1) * cout * pout], cout, g, &mut dcols, ld, ni * pin);
    }
    let x_cm = to_channel_major(x.data(), n, cin, pin);
    let mut dw = vec![T::zero(); cin * cout * k3];
    T::gemm(cin, ld, cout * k3, T::one(), &x_cm, false, &dcols, true, T::zero(), &mut dw);
    let db = bias_grad(dy.data(), cout, pout);
    let dx = need_dx.then(|| {
        let mut dx_cm = vec![T::zero(); cin * ld];
        T::gemm(cin, cout * k3, ld, T::one(), w.data(), false, &dcols, false, T::zero(), &mut dx_cm);
        Tensor::new(x.shape().to_vec(), to_batch_major(&dx_cm, n, cin, pin)).expect("dx shape")
    });
    (
        dx,
        Tensor::new(w.shape().to_vec(), dw).expect("dw shape"),
        Tensor::new(vec![cout], db).expect("db shape"),
    )
}

/// `y = x W + b` with `x: [N, F]`, `W: [F, G]`, `b: [G]`.
pub fn linear<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    let ws = weights.shape();
    if s.len() != 2 || ws.len() != 2 || s[1] != ws[0] {
        return Err(Error::Shape(format!("linear: input {s:?} incompatible with weights {ws:?}")));
    }
    bias.expect_shape(&[ws[1]])?;
    Ok(linear_forward(input, weights, bias))
}

pub(crate) fn linear_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let g = w.shape()[1];
    let mut out: Vec<T> = b.data().iter().copied().cycle().take(n * g).collect();
    T::gemm(n, f, g, T::one(), x.data(), false, w.data(), false, T::one(), &mut out);
    Tensor::new(vec![n, g], out).expect("linear output shape")
}

pub(crate) fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let g = w.shape()[1];
    let mut dw = vec![T::zero(); f * g];
    T::gemm(f, n, g, T::one(), x.data(), true, dy.data(), false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); g];
    for row in dy.data().chunks(g) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); n * f];
        T::gemm(n, g, f, T::one(), dy.data(), false, w.data(), true, T::zero(), &mut dx);
        Tensor::new(vec![n, f], dx).expect("dx shape")
    });
    (
        dx,
        Tensor::new(vec![f, g], dw).expect("dw shape"),
        Tensor::new(vec![g], db).expect("db shape"),
    )
}

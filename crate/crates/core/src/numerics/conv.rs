//! 2-D convolution over CxHxW tensors (im2col + GEMM).
//!
//! Weights are laid out `[out_channels, in_channels, k, k]`. Reduction order
//! inside the GEMM is fixed, so repeated calls on identical inputs are
//! bit-identical.

use crate::error::{Error, Result};

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weights: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::Shape(format!(
                    "conv input must be CxHxW, got {input:?}"
                )))
            }
        };
        let (o, wc, kh, kw) = match *weights {
            [o, wc, kh, kw] => (o, wc, kh, kw),
            _ => {
                return Err(Error::Shape(format!(
                    "conv weights must be OxCxKxK, got {weights:?}"
                )))
            }
        };
        if wc != c {
            return Err(Error::Shape(format!(
                "weight in_channels {wc} != input channels {c}"
            )));
        }
        if kh != kw {
            return Err(Error::Shape(format!("kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "kernel {kh} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Self {
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels: o,
            kernel: kh,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.out_channels, self.out_h, self.out_w]
    }
}

/// Saved state of a forward pass, consumed by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvCache {
    geometry: ConvGeometry,
    columns: Vec<f64>,
}

impl ConvCache {
    pub fn geometry(&self) -> &ConvGeometry {
        &self.geometry
    }
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let p = g.out_positions();
    let k = g.kernel;
    let mut cols = vec![0.0; g.patch_len() * p];
    for c in 0..g.in_channels {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..][..g.in_w];
                    let dst = &mut row[oy * g.out_w..][..g.out_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let p = g.out_positions();
    let k = g.kernel;
    let mut out = vec![0.0; g.in_channels * g.in_h * g.in_w];
    for c in 0..g.in_channels {
        let plane = &mut out[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..][..g.in_w];
                    for (ox, &v) in row[oy * g.out_w..][..g.out_w].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Row-major GEMM `c = a * b + beta * c` with explicit strides.
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
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserted extents keep every strided access inside the
    // borrowed slices; `c` is uniquely borrowed.
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

/// Zero-padded 2-D convolution. Returns the output and the cache needed for
/// the backward pass.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Result<(Tensor, ConvCache)> {
    let g = ConvGeometry::new(input.shape(), weights.shape(), stride, pad)?;
    if bias.len() != g.out_channels {
        return Err(Error::Shape(format!(
            "bias length {} != out_channels {}",
            bias.len(),
            g.out_channels
        )));
    }
    let p = g.out_positions();
    let kk = g.patch_len();
    let columns = im2col(input.data(), &g);
    let mut out = Vec::with_capacity(g.out_channels * p);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, p));
    }
    gemm(
        g.out_channels,
        kk,
        p,
        weights.data(),
        (kk, 1),
        &columns,
        (p, 1),
        1.0,
        &mut out,
    );
    let out = Tensor::new(g.out_shape().to_vec(), out)?;
    Ok((out, ConvCache { geometry: g, columns }))
}

pub fn conv2d_backward(grad_out: &Tensor, cache: &ConvCache, weights: &Tensor) -> Result<ConvGrads> {
    let g = &cache.geometry;
    if grad_out.shape() != g.out_shape() {
        return Err(Error::Shape(format!(
            "grad_out shape {:?} != forward output shape {:?}",
            grad_out.shape(),
            g.out_shape()
        )));
    }
    let expected_w = [g.out_channels, g.in_channels, g.kernel, g.kernel];
    if weights.shape() != expected_w {
        return Err(Error::Shape(format!(
            "weights shape {:?} != cached {:?}",
            weights.shape(),
            expected_w
        )));
    }
    let p = g.out_positions();
    let kk = g.patch_len();
    let go = grad_out.data();

    let bias = go.chunks_exact(p).map(|row| row.iter().sum()).collect();

    let mut gw = vec![0.0; g.out_channels * kk];
    gemm(
        g.out_channels,
        p,
        kk,
        go,
        (p, 1),
        &cache.columns,
        (1, p),
        0.0,
        &mut gw,
    );

    let mut gcols = vec![0.0; kk * p];
    gemm(
        kk,
        g.out_channels,
        p,
        weights.data(),
        (1, kk),
        go,
        (p, 1),
        0.0,
        &mut gcols,
    );
    let gi = col2im(&gcols, g);

    Ok(ConvGrads {
        input: Tensor::new(vec![g.in_channels, g.in_h, g.in_w], gi)?,
        weights: Tensor::new(expected_w.to_vec(), gw)?,
        bias,
    })
}

/// Stateful wrapper that remembers its last forward pass.
#[derive(Debug, Default)]
pub struct ConvLayer {
    cache: Option<ConvCache>,
}

impl ConvLayer {
    pub fn forward(
        &mut self,
        input: &Tensor,
        weights: &Tensor,
        bias: &[f64],
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let (out, cache) = conv2d_forward(input, weights, bias, stride, pad)?;
        self.cache = Some(cache);
        Ok(out)
    }

    pub fn backward(&self, grad_out: &Tensor, weights: &Tensor) -> Result<ConvGrads> {
        let cache = self.cache.as_ref().ok_or(Error::MissingCache)?;
        conv2d_backward(grad_out, cache, weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_gives_bias() {
        let x = Tensor::zeros(&[1, 3, 3]);
        let w = Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 * 0.1 - 0.3);
        let (y, _) = conv2d_forward(&x, &w, &[0.5, -1.5], 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3]);
        assert!(y.channel(0).iter().all(|&v| v == 0.5));
        assert!(y.channel(1).iter().all(|&v| v == -1.5));
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::from_fn(&[1, 4, 5], |i| (i as f64).sin());
        let w = Tensor::filled(&[1, 1, 1, 1], 1.0);
        let (y, cache) = conv2d_forward(&x, &w, &[0.0], 1, 0).unwrap();
        assert_eq!(y, x);
        let g = Tensor::from_fn(&[1, 4, 5], |i| i as f64);
        let grads = conv2d_backward(&g, &cache, &w).unwrap();
        assert_eq!(grads.input, g);
    }

    #[test]
    fn zero_upstream_gradient() {
        let x = Tensor::from_fn(&[2, 5, 5], |i| (i as f64 * 0.37).cos());
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64 * 0.11).sin());
        let (_, cache) = conv2d_forward(&x, &w, &[0.0; 3], 2, 1).unwrap();
        let grads = conv2d_backward(&Tensor::zeros(&[3, 3, 3]), &cache, &w).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.weights.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors_name_dimensions() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d_forward(&x, &w, &[0.0], 1, 1).unwrap_err();
        assert!(err.to_string().contains("in_channels 3"), "{err}");
        let w = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(conv2d_forward(&x, &w, &[0.0, 0.0], 1, 1).is_err());
    }

    #[test]
    fn layer_without_forward_rejects_backward() {
        let layer = ConvLayer::default();
        let w = Tensor::zeros(&[1, 1, 1, 1]);
        assert!(matches!(
            layer.backward(&Tensor::zeros(&[1, 1, 1]), &w),
            Err(Error::MissingCache)
        ));
    }
}

//! Raw numeric kernels behind the tape operators.

use crate::parallel::for_each_chunk_mut;

/// Geometry of a 2-D convolution over NCHW input and OIHW weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.batch, self.in_channels, self.in_h, self.in_w]
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h(), self.out_w()]
    }

    /// Input coordinate hit by output coordinate `o` and kernel offset `k`.
    #[inline]
    fn input_coord(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Output coordinate that reads input coordinate `i` through kernel offset `k`.
    #[inline]
    fn output_coord(&self, i: usize, k: usize, extent: usize) -> Option<usize> {
        let num = (i + self.padding) as isize - k as isize;
        if num < 0 || !(num as usize).is_multiple_of(self.stride) {
            return None;
        }
        let o = num as usize / self.stride;
        (o < extent).then_some(o)
    }
}

pub fn conv2d(x: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh_n, ow_n) = (g.out_h(), g.out_w());
    let plane = oh_n * ow_n;
    let mut y = vec![0.0; g.batch * g.out_channels * plane];
    let ksize = g.kernel_h * g.kernel_w;
    for_each_chunk_mut(&mut y, plane, |idx, out| {
        let (n, o) = (idx / g.out_channels, idx % g.out_channels);
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let mut acc = 0.0;
                for c in 0..g.in_channels {
                    let xbase = (n * g.in_channels + c) * g.in_h * g.in_w;
                    let wbase = (o * g.in_channels + c) * ksize;
                    for kh in 0..g.kernel_h {
                        let Some(ih) = g.input_coord(oh, kh, g.in_h) else {
                            continue;
                        };
                        for kw in 0..g.kernel_w {
                            let Some(iw) = g.input_coord(ow, kw, g.in_w) else {
                                continue;
                            };
                            acc += x[xbase + ih * g.in_w + iw] * w[wbase + kh * g.kernel_w + kw];
                        }
                    }
                }
                out[oh * ow_n + ow] = acc;
            }
        }
    });
    y
}

/// Vector-Jacobian product of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad(gy: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh_n, ow_n) = (g.out_h(), g.out_w());
    let plane = g.in_h * g.in_w;
    let ksize = g.kernel_h * g.kernel_w;
    let mut gx = vec![0.0; g.batch * g.in_channels * plane];
    for_each_chunk_mut(&mut gx, plane, |idx, out| {
        let (n, c) = (idx / g.in_channels, idx % g.in_channels);
        for ih in 0..g.in_h {
            for iw in 0..g.in_w {
                let mut acc = 0.0;
                for o in 0..g.out_channels {
                    let gbase = (n * g.out_channels + o) * oh_n * ow_n;
                    let wbase = (o * g.in_channels + c) * ksize;
                    for kh in 0..g.kernel_h {
                        let Some(oh) = g.output_coord(ih, kh, oh_n) else {
                            continue;
                        };
                        for kw in 0..g.kernel_w {
                            let Some(ow) = g.output_coord(iw, kw, ow_n) else {
                                continue;
                            };
                            acc += gy[gbase + oh * ow_n + ow] * w[wbase + kh * g.kernel_w + kw];
                        }
                    }
                }
                out[ih * g.in_w + iw] = acc;
            }
        }
    });
    gx
}

/// Vector-Jacobian product of [`conv2d`] with respect to its weights.
pub fn conv2d_weight_grad(x: &[f64], gy: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh_n, ow_n) = (g.out_h(), g.out_w());
    let ksize = g.kernel_h * g.kernel_w;
    let mut gw = vec![0.0; g.out_channels * g.in_channels * ksize];
    for_each_chunk_mut(&mut gw, ksize, |idx, out| {
        let (o, c) = (idx / g.in_channels, idx % g.in_channels);
        for kh in 0..g.kernel_h {
            for kw in 0..g.kernel_w {
                let mut acc = 0.0;
                for n in 0..g.batch {
                    let xbase = (n * g.in_channels + c) * g.in_h * g.in_w;
                    let gbase = (n * g.out_channels + o) * oh_n * ow_n;
                    for oh in 0..oh_n {
                        let Some(ih) = g.input_coord(oh, kh, g.in_h) else {
                            continue;
                        };
                        for ow in 0..ow_n {
                            let Some(iw) = g.input_coord(ow, kw, g.in_w) else {
                                continue;
                            };
                            acc += gy[gbase + oh * ow_n + ow] * x[xbase + ih * g.in_w + iw];
                        }
                    }
                }
                out[kh * g.kernel_w + kw] = acc;
            }
        }
    });
    gw
}

/// `[m, k] x [k, n]` row-major matrix product.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for_each_chunk_mut(&mut c, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    });
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every flat index of `big`, the flat index of `small` it maps to under
/// same-rank broadcasting (dimensions of size 1 in `small` repeat).
pub fn broadcast_index_map(small: &[usize], big: &[usize]) -> Vec<usize> {
    let big_strides = strides(big);
    let small_strides: Vec<usize> = strides(small)
        .into_iter()
        .zip(small)
        .map(|(s, &d)| if d == 1 { 0 } else { s })
        .collect();
    let total: usize = big.iter().product();
    (0..total)
        .map(|flat| {
            let mut rem = flat;
            let mut src = 0;
            for (bs, ss) in big_strides.iter().zip(&small_strides) {
                src += (rem / bs) * ss;
                rem %= bs;
            }
            src
        })
        .collect()
}

pub fn broadcast_to(x: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    broadcast_index_map(from, to).into_iter().map(|i| x[i]).collect()
}

pub fn sum_to(x: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; to.iter().product()];
    for (v, i) in x.iter().zip(broadcast_index_map(to, from)) {
        out[i] += v;
    }
    out
}

/// Max pooling without padding. Returns the pooled values and, for every
/// output element, the flat input index it was taken from (first maximum
/// wins on ties).
pub fn max_pool2d(x: &[f64], shape: &[usize], kernel: usize, stride: usize) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut values = Vec::with_capacity(n * c * oh * ow);
    let mut indices = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * stride * w + j * stride;
                for ki in 0..kernel {
                    for kj in 0..kernel {
                        let idx = base + (i * stride + ki) * w + j * stride + kj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                values.push(x[best]);
                indices.push(best);
            }
        }
    }
    (values, indices, vec![n, c, oh, ow])
}

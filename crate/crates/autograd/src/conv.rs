//! Image kernels over NCHW tensors: convolution and pooling.
//!
//! These rules compute gradients with raw array kernels and are first-order
//! only.

use ndarray::{Array2, ArrayView2, IxDyn};

use crate::error::Result;
use crate::tensor::{Array, Backward, Tensor};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    #[track_caller]
    fn new(input: &[usize], kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        assert_eq!(input.len(), 4, "expected NCHW input, got {input:?}");
        assert!(stride > 0, "stride must be positive");
        let (batch, channels, height, width) = (input[0], input[1], input[2], input[3]);
        assert!(
            height + 2 * pad >= kh && width + 2 * pad >= kw,
            "kernel {kh}x{kw} larger than padded input {height}x{width}"
        );
        let out_h = (height + 2 * pad - kh) / stride + 1;
        let out_w = (width + 2 * pad - kw) / stride + 1;
        Geometry { batch, channels, height, width, kh, kw, stride, pad, out_h, out_w }
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate for output coordinate `o` and kernel tap `k`, if inside.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds the input into a `(C*kh*kw, B*out_h*out_w)` matrix.
fn im2col(x: &[f64], g: &Geometry) -> Array2<f64> {
    let rows = g.channels * g.kh * g.kw;
    let cols = g.batch * g.out_plane();
    let mut out = Array2::<f64>::zeros((rows, cols));
    let plane = g.height * g.width;
    for (r, mut row) in out.outer_iter_mut().enumerate() {
        let row = row.as_slice_mut().expect("standard layout");
        let c = r / (g.kh * g.kw);
        let ki = (r / g.kw) % g.kh;
        let kj = r % g.kw;
        for b in 0..g.batch {
            let src = &x[(b * g.channels + c) * plane..][..plane];
            let dst = &mut row[b * g.out_plane()..][..g.out_plane()];
            for oy in 0..g.out_h {
                let Some(iy) = g.source(oy, ki, g.height) else { continue };
                for ox in 0..g.out_w {
                    if let Some(ix) = g.source(ox, kj, g.width) {
                        dst[oy * g.out_w + ox] = src[iy * g.width + ix];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(cols: ArrayView2<'_, f64>, g: &Geometry) -> Array {
    let plane = g.height * g.width;
    let mut out = vec![0.0; g.batch * g.channels * plane];
    let cols = cols.as_standard_layout();
    let cols = cols.as_slice().expect("standard layout");
    let ncols = g.batch * g.out_plane();
    for b in 0..g.batch {
        for c in 0..g.channels {
            let dst = &mut out[(b * g.channels + c) * plane..][..plane];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let r = (c * g.kh + ki) * g.kw + kj;
                    let src = &cols[r * ncols + b * g.out_plane()..][..g.out_plane()];
                    for oy in 0..g.out_h {
                        let Some(iy) = g.source(oy, ki, g.height) else { continue };
                        for ox in 0..g.out_w {
                            if let Some(ix) = g.source(ox, kj, g.width) {
                                dst[iy * g.width + ix] += src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Array::from_shape_vec(IxDyn(&[g.batch, g.channels, g.height, g.width]), out).unwrap()
}

/// `(Co, B*P)` matrix to `(B, Co, oh, ow)` tensor.
fn channel_major_to_nchw(m: Array2<f64>, g: &Geometry, co: usize) -> Array {
    let p = g.out_plane();
    let src = m.as_standard_layout();
    let src = src.as_slice().unwrap();
    let mut out = vec![0.0; g.batch * co * p];
    for o in 0..co {
        for b in 0..g.batch {
            out[(b * co + o) * p..][..p].copy_from_slice(&src[o * g.batch * p + b * p..][..p]);
        }
    }
    Array::from_shape_vec(IxDyn(&[g.batch, co, g.out_h, g.out_w]), out).unwrap()
}

/// `(B, Co, oh, ow)` tensor to `(Co, B*P)` matrix.
fn nchw_to_channel_major(a: &Array, g: &Geometry, co: usize) -> Array2<f64> {
    let p = g.out_plane();
    let src = a.as_standard_layout();
    let src = src.as_slice().unwrap();
    let mut out = vec![0.0; g.batch * co * p];
    for o in 0..co {
        for b in 0..g.batch {
            out[o * g.batch * p + b * p..][..p].copy_from_slice(&src[(b * co + o) * p..][..p]);
        }
    }
    Array2::from_shape_vec((co, g.batch * p), out).unwrap()
}

struct Conv2dOp {
    geom: Geometry,
    cols: Array2<f64>,
}

impl Backward for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn higher_order(&self) -> bool {
        false
    }

    fn backward(&self, inputs: &[Tensor], _out: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        let co = w.shape()[0];
        let g2 = nchw_to_channel_major(grad.value(), &self.geom, co);
        let w2 = w
            .value()
            .view()
            .into_shape_with_order((co, self.cols.nrows()))
            .expect("weight is contiguous");
        let gw = w.requires_grad().then(|| {
            let gw = g2.dot(&self.cols.t());
            Tensor::constant(gw.into_shape_with_order(IxDyn(w.shape())).unwrap())
        });
        let gx = x.requires_grad().then(|| {
            let gcols = w2.t().dot(&g2);
            Tensor::constant(col2im(gcols.view(), &self.geom))
        });
        Ok(vec![gx, gw])
    }
}

struct MaxPoolOp {
    /// Flat input index chosen by each output element.
    argmax: Vec<usize>,
}

impl Backward for MaxPoolOp {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn higher_order(&self) -> bool {
        false
    }

    fn backward(&self, inputs: &[Tensor], _out: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let mut gx = Array::zeros(IxDyn(inputs[0].shape()));
        let dst = gx.as_slice_mut().unwrap();
        let g = grad.value().as_standard_layout();
        for (&idx, &gv) in self.argmax.iter().zip(g.iter()) {
            dst[idx] += gv;
        }
        Ok(vec![Some(Tensor::constant(gx))])
    }
}

struct AvgPoolOp {
    geom: Geometry,
}

impl Backward for AvgPoolOp {
    fn name(&self) -> &'static str {
        "avg_pool2d"
    }

    fn higher_order(&self) -> bool {
        false
    }

    fn backward(&self, inputs: &[Tensor], _out: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = &self.geom;
        let mut gx = Array::zeros(IxDyn(inputs[0].shape()));
        let dst = gx.as_slice_mut().unwrap();
        let gv = grad.value().as_standard_layout();
        let gv = gv.as_slice().unwrap();
        let norm = 1.0 / (g.kh * g.kw) as f64;
        let plane = g.height * g.width;
        for bc in 0..g.batch * g.channels {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let v = gv[bc * g.out_plane() + oy * g.out_w + ox] * norm;
                    for ki in 0..g.kh {
                        let Some(iy) = g.source(oy, ki, g.height) else { continue };
                        for kj in 0..g.kw {
                            if let Some(ix) = g.source(ox, kj, g.width) {
                                dst[bc * plane + iy * g.width + ix] += v;
                            }
                        }
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::constant(gx))])
    }
}

impl Tensor {
    /// 2-D cross-correlation of an NCHW input with `(Co, Ci, kh, kw)` weights,
    /// zero padding, no bias.
    #[track_caller]
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
        let ws = weight.shape();
        assert_eq!(ws.len(), 4, "conv weight must be (Co, Ci, kh, kw)");
        assert_eq!(ws[1], self.shape()[1], "conv input channels {} != weight {}", self.shape()[1], ws[1]);
        let geom = Geometry::new(self.shape(), ws[2], ws[3], stride, pad);
        let x = self.value().as_standard_layout();
        let cols = im2col(x.as_slice().unwrap(), &geom);
        let w2 = weight
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((ws[0], cols.nrows()))
            .unwrap();
        let out = channel_major_to_nchw(w2.dot(&cols), &geom, ws[0]);
        Tensor::from_op(out, vec![self.clone(), weight.clone()], Conv2dOp { geom, cols })
    }

    /// Max pooling with implicit `-inf` padding.
    #[track_caller]
    pub fn max_pool2d(&self, kernel: usize, stride: usize, pad: usize) -> Tensor {
        let g = Geometry::new(self.shape(), kernel, kernel, stride, pad);
        let x = self.value().as_standard_layout();
        let x = x.as_slice().unwrap();
        let plane = g.height * g.width;
        let mut out = Vec::with_capacity(g.batch * g.channels * g.out_plane());
        let mut argmax = Vec::with_capacity(out.capacity());
        for bc in 0..g.batch * g.channels {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ki in 0..g.kh {
                        let Some(iy) = g.source(oy, ki, g.height) else { continue };
                        for kj in 0..g.kw {
                            if let Some(ix) = g.source(ox, kj, g.width) {
                                let idx = bc * plane + iy * g.width + ix;
                                if x[idx] > best || best_idx == usize::MAX {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let v = Array::from_shape_vec(IxDyn(&[g.batch, g.channels, g.out_h, g.out_w]), out).unwrap();
        Tensor::from_op(v, vec![self.clone()], MaxPoolOp { argmax })
    }

    /// Average pooling without padding.
    #[track_caller]
    pub fn avg_pool2d(&self, kernel: usize, stride: usize) -> Tensor {
        let g = Geometry::new(self.shape(), kernel, kernel, stride, 0);
        let x = self.value().as_standard_layout();
        let x = x.as_slice().unwrap();
        let plane = g.height * g.width;
        let norm = 1.0 / (kernel * kernel) as f64;
        let mut out = Vec::with_capacity(g.batch * g.channels * g.out_plane());
        for bc in 0..g.batch * g.channels {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0;
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            acc += x[bc * plane + (oy * stride + ki) * g.width + ox * stride + kj];
                        }
                    }
                    out.push(acc * norm);
                }
            }
        }
        let v = Array::from_shape_vec(IxDyn(&[g.batch, g.channels, g.out_h, g.out_w]), out).unwrap();
        Tensor::from_op(v, vec![self.clone()], AvgPoolOp { geom: g })
    }
}

//! Forward and backward kernels for the layers used by the network.
//!
//! All kernels work on planar `[C, H, W]` features. Backward functions
//! accumulate into the provided gradient buffers.

use crate::tensor::{Feature, Tensor};

/// 3x3 convolution, stride 2, zero padding 1. `w` is `[out, in, 3, 3]`.
/// Input height and width must be even.
pub fn conv3x3_s2(input: &Feature, w: &Tensor, b: &Tensor) -> Feature {
    let (out_c, in_c) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(in_c, input.channels);
    let (ih, iw) = (input.height, input.width);
    let (oh, ow) = (ih / 2, iw / 2);
    let mut out = Feature::zeros(out_c, oh, ow);
    let wd = w.data();
    for o in 0..out_c {
        let dst = out.plane_mut(o);
        dst.iter_mut().for_each(|v| *v = b.data()[o]);
        for c in 0..in_c {
            let src = input.plane(c);
            for ky in 0..3 {
                let oy0 = usize::from(ky == 0);
                for kx in 0..3 {
                    let wv = wd[((o * in_c + c) * 3 + ky) * 3 + kx];
                    let ox0 = usize::from(kx == 0);
                    for oy in oy0..oh {
                        let iy = 2 * oy + ky - 1;
                        let srow = &src[iy * iw..(iy + 1) * iw];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for ox in ox0..ow {
                            drow[ox] += wv * srow[2 * ox + kx - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`conv3x3_s2`]. `grad_in` is skipped when `None`.
pub fn conv3x3_s2_backward(
    input: &Feature,
    w: &Tensor,
    grad_out: &Feature,
    grad_w: &mut Tensor,
    grad_b: &mut Tensor,
    mut grad_in: Option<&mut Feature>,
) {
    let (out_c, in_c) = (w.shape()[0], w.shape()[1]);
    let iw = input.width;
    let (oh, ow) = (grad_out.height, grad_out.width);
    let wd = w.data();
    for o in 0..out_c {
        let g = grad_out.plane(o);
        grad_b.data_mut()[o] += g.iter().sum::<f64>();
        for c in 0..in_c {
            let src = input.plane(c);
            for ky in 0..3 {
                let oy0 = usize::from(ky == 0);
                for kx in 0..3 {
                    let widx = ((o * in_c + c) * 3 + ky) * 3 + kx;
                    let ox0 = usize::from(kx == 0);
                    let mut acc = 0.0;
                    for oy in oy0..oh {
                        let iy = 2 * oy + ky - 1;
                        let srow = &src[iy * iw..(iy + 1) * iw];
                        let grow = &g[oy * ow..(oy + 1) * ow];
                        for ox in ox0..ow {
                            acc += grow[ox] * srow[2 * ox + kx - 1];
                        }
                    }
                    grad_w.data_mut()[widx] += acc;
                    if let Some(gin) = grad_in.as_deref_mut() {
                        let wv = wd[widx];
                        let dst = gin.plane_mut(c);
                        for oy in oy0..oh {
                            let iy = 2 * oy + ky - 1;
                            let grow = &g[oy * ow..(oy + 1) * ow];
                            let drow = &mut dst[iy * iw..(iy + 1) * iw];
                            for ox in ox0..ow {
                                drow[2 * ox + kx - 1] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Pointwise (1x1) projection of the channel-concatenation of `inputs`.
/// `w` is `[out, Σ in]`.
pub fn pointwise(w: &Tensor, inputs: &[&Feature], b: Option<&Tensor>) -> Feature {
    let out_c = w.shape()[0];
    let total_in = w.shape()[1];
    let (h, wd) = (inputs[0].height, inputs[0].width);
    let mut out = Feature::zeros(out_c, h, wd);
    for o in 0..out_c {
        let dst = out.plane_mut(o);
        if let Some(b) = b {
            dst.iter_mut().for_each(|v| *v = b.data()[o]);
        }
        let mut col = 0;
        for input in inputs {
            for c in 0..input.channels {
                let wv = w.data()[o * total_in + col];
                for (d, s) in dst.iter_mut().zip(input.plane(c)) {
                    *d += wv * s;
                }
                col += 1;
            }
        }
    }
    out
}

/// Backward of [`pointwise`]; `grad_inputs` parallels `inputs`.
pub fn pointwise_backward(
    w: &Tensor,
    inputs: &[&Feature],
    grad_out: &Feature,
    grad_w: &mut Tensor,
    grad_b: Option<&mut Tensor>,
    grad_inputs: &mut [&mut Feature],
) {
    let out_c = w.shape()[0];
    let total_in = w.shape()[1];
    if let Some(gb) = grad_b {
        for o in 0..out_c {
            gb.data_mut()[o] += grad_out.plane(o).iter().sum::<f64>();
        }
    }
    for o in 0..out_c {
        let g = grad_out.plane(o);
        let mut col = 0;
        for (input, gin) in inputs.iter().zip(grad_inputs.iter_mut()) {
            for c in 0..input.channels {
                let widx = o * total_in + col;
                let wv = w.data()[widx];
                let mut acc = 0.0;
                let dst = gin.plane_mut(c);
                for ((gv, s), d) in g.iter().zip(input.plane(c)).zip(dst.iter_mut()) {
                    acc += gv * s;
                    *d += wv * gv;
                }
                grad_w.data_mut()[widx] += acc;
                col += 1;
            }
        }
    }
}

pub fn relu_inplace(f: &mut Feature) {
    f.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zero the gradient where the (post-ReLU) activation is not positive.
pub fn relu_backward_inplace(act: &Feature, grad: &mut Feature) {
    for (g, a) in grad.data.iter_mut().zip(&act.data) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-tap linear interpolation weights along one axis for an integer
/// upsampling factor (half-pixel centres, edge clamped).
#[derive(Debug, Clone)]
pub struct AxisTaps {
    taps: Vec<(usize, usize, f64)>,
}

impl AxisTaps {
    pub fn new(src_len: usize, factor: usize) -> Self {
        let taps = (0..src_len * factor)
            .map(|i| {
                let s = ((i as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(src_len - 1);
                let i1 = (i0 + 1).min(src_len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect();
        AxisTaps { taps }
    }
}

/// Bilinear upsampling by `factor` and its adjoint.
#[derive(Debug, Clone)]
pub struct Upsampler {
    factor: usize,
    rows: AxisTaps,
    cols: AxisTaps,
    src_h: usize,
    src_w: usize,
}

impl Upsampler {
    pub fn new(src_h: usize, src_w: usize, factor: usize) -> Self {
        Upsampler {
            factor,
            rows: AxisTaps::new(src_h, factor),
            cols: AxisTaps::new(src_w, factor),
            src_h,
            src_w,
        }
    }

    pub fn forward(&self, input: &Feature) -> Feature {
        let (dh, dw) = (self.src_h * self.factor, self.src_w * self.factor);
        let mut out = Feature::zeros(input.channels, dh, dw);
        let mut tmp = vec![0.0; self.src_h * dw];
        for c in 0..input.channels {
            let src = input.plane(c);
            for y in 0..self.src_h {
                let srow = &src[y * self.src_w..(y + 1) * self.src_w];
                let trow = &mut tmp[y * dw..(y + 1) * dw];
                for (t, &(i0, i1, l)) in trow.iter_mut().zip(&self.cols.taps) {
                    *t = (1.0 - l) * srow[i0] + l * srow[i1];
                }
            }
            let dst = out.plane_mut(c);
            for (y, &(r0, r1, l)) in self.rows.taps.iter().enumerate() {
                let a = &tmp[r0 * dw..(r0 + 1) * dw];
                let b = &tmp[r1 * dw..(r1 + 1) * dw];
                for ((d, av), bv) in dst[y * dw..(y + 1) * dw].iter_mut().zip(a).zip(b) {
                    *d = (1.0 - l) * av + l * bv;
                }
            }
        }
        out
    }

    pub fn backward(&self, grad_out: &Feature) -> Feature {
        let dw = self.src_w * self.factor;
        let mut out = Feature::zeros(grad_out.channels, self.src_h, self.src_w);
        let mut tmp = vec![0.0; self.src_h * dw];
        for c in 0..grad_out.channels {
            tmp.iter_mut().for_each(|v| *v = 0.0);
            let g = grad_out.plane(c);
            for (y, &(r0, r1, l)) in self.rows.taps.iter().enumerate() {
                let grow = &g[y * dw..(y + 1) * dw];
                for (x, gv) in grow.iter().enumerate() {
                    tmp[r0 * dw + x] += (1.0 - l) * gv;
                    tmp[r1 * dw + x] += l * gv;
                }
            }
            let dst = out.plane_mut(c);
            for y in 0..self.src_h {
                let trow = &tmp[y * dw..(y + 1) * dw];
                let drow = &mut dst[y * self.src_w..(y + 1) * self.src_w];
                for (t, &(i0, i1, l)) in trow.iter().zip(&self.cols.taps) {
                    drow[i0] += (1.0 - l) * t;
                    drow[i1] += l * t;
                }
            }
        }
        out
    }
}

use super::{FeatureMap, ParamLayout};
use crate::instrument;
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;

/// 2-D convolution with square kernels, zero padding and a uniform stride,
/// lowered to a matrix product over an im2col buffer.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub(crate) weight_offset: usize,
    bias_offset: usize,
}

impl Conv2d {
    pub fn new(
        layout: &mut ParamLayout,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let weight_offset = layout.alloc(out_channels * in_channels * kernel * kernel);
        let bias_offset = layout.alloc(out_channels);
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight_offset,
            bias_offset,
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.weight_offset..self.weight_offset + self.out_channels * self.patch_len()]
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.bias_offset..self.bias_offset + self.out_channels]
    }

    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R, gain: f64) {
        let n = self.out_channels * self.patch_len();
        let fan_in = self.patch_len();
        super::he_normal(
            rng,
            &mut params[self.weight_offset..self.weight_offset + n],
            fan_in,
            gain,
        );
        params[self.bias_offset..self.bias_offset + self.out_channels].fill(0.0);
    }

    pub fn zero_init(&self, params: &mut [f64]) {
        let n = self.out_channels * self.patch_len();
        params[self.weight_offset..self.weight_offset + n].fill(0.0);
        params[self.bias_offset..self.bias_offset + self.out_channels].fill(0.0);
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        (
            (height + 2 * self.padding - self.kernel) / self.stride + 1,
            (width + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// Output columns `lo..hi` whose kernel tap `kx` lands inside a row of
    /// `width` input pixels.
    fn valid_columns(&self, kx: usize, width: usize, ow: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        // ox·s + kx − p ≤ width − 1
        let hi = if width + p > kx { ((width + p - kx - 1) / s + 1).min(ow) } else { 0 };
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &FeatureMap) -> (Vec<f64>, usize, usize) {
        let (oh, ow) = self.output_size(x.height, x.width);
        let k = self.kernel;
        let cols = oh * ow;
        let mut buf = vec![0.0; self.patch_len() * cols];
        for c in 0..x.channels {
            let plane = &x.data[c * x.plane()..(c + 1) * x.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut buf[row * cols..(row + 1) * cols];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.width..(iy as usize + 1) * x.width];
                        let out = &mut dst[oy * ow..(oy + 1) * ow];
                        let (lo, hi) = self.valid_columns(kx, x.width, ow);
                        if lo >= hi {
                            continue;
                        }
                        let first = lo * self.stride + kx - self.padding;
                        if self.stride == 1 {
                            out[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (o, &v) in out[lo..hi].iter_mut().zip(src[first..].iter().step_by(self.stride)) {
                                *o = v;
                            }
                        }
                    }
                }
            }
        }
        (buf, oh, ow)
    }

    fn col2im(&self, cols: &[f64], height: usize, width: usize) -> FeatureMap {
        let (oh, ow) = self.output_size(height, width);
        let k = self.kernel;
        let n = oh * ow;
        let mut out = FeatureMap::zeros(self.in_channels, height, width);
        for c in 0..self.in_channels {
            let plane = &mut out.data[c * height * width..(c + 1) * height * width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * width..(iy as usize + 1) * width];
                        let (lo, hi) = self.valid_columns(kx, width, ow);
                        if lo >= hi {
                            continue;
                        }
                        let first = lo * self.stride + kx - self.padding;
                        let row = &src[oy * ow + lo..oy * ow + hi];
                        for (d, &v) in dst[first..].iter_mut().step_by(self.stride).zip(row) {
                            *d += v;
                        }
                    }
                }
            }
        }
        out
    }

    /// Forward pass. Returns the output and the im2col buffer needed by
    /// [`Conv2d::backward`].
    pub fn forward(&self, params: &[f64], x: &FeatureMap) -> (FeatureMap, Vec<f64>) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (cols, oh, ow) = self.im2col(x);
        let n = oh * ow;
        let mut out = vec![0.0; self.out_channels * n];
        for (o, &b) in self.bias(params).iter().enumerate() {
            out[o * n..(o + 1) * n].fill(b);
        }
        let w = ArrayView2::from_shape((self.out_channels, self.patch_len()), self.weights(params))
            .expect("weight shape");
        let c = ArrayView2::from_shape((self.patch_len(), n), &cols).expect("cols shape");
        let mut y = ArrayViewMut2::from_shape((self.out_channels, n), &mut out).expect("out shape");
        general_mat_mul(1.0, &w, &c, 1.0, &mut y);
        (FeatureMap::from_vec(self.out_channels, oh, ow, out), cols)
    }

    /// Backward pass. Accumulates parameter gradients into `grads` when given
    /// and returns the input gradient when `want_input_grad` is set.
    pub fn backward(
        &self,
        params: &[f64],
        input_size: (usize, usize),
        cols: &[f64],
        dout: &FeatureMap,
        grads: Option<&mut [f64]>,
        want_input_grad: bool,
    ) -> Option<FeatureMap> {
        instrument::record_backward();
        let n = dout.plane();
        let pl = self.patch_len();
        let dy = ArrayView2::from_shape((self.out_channels, n), &dout.data).expect("dout shape");
        if let Some(grads) = grads {
            let c = ArrayView2::from_shape((pl, n), cols).expect("cols shape");
            {
                let gw = &mut grads[self.weight_offset..self.weight_offset + self.out_channels * pl];
                let mut gw = ArrayViewMut2::from_shape((self.out_channels, pl), gw).expect("gw");
                general_mat_mul(1.0, &dy, &c.t(), 1.0, &mut gw);
            }
            let gb = &mut grads[self.bias_offset..self.bias_offset + self.out_channels];
            for (o, g) in gb.iter_mut().enumerate() {
                *g += dout.data[o * n..(o + 1) * n].iter().sum::<f64>();
            }
        }
        if !want_input_grad {
            return None;
        }
        let w = ArrayView2::from_shape((self.out_channels, pl), self.weights(params)).expect("w");
        let mut dcols = vec![0.0; pl * n];
        {
            let mut dc = ArrayViewMut2::from_shape((pl, n), &mut dcols).expect("dcols");
            general_mat_mul(1.0, &w.t(), &dy, 0.0, &mut dc);
        }
        Some(self.col2im(&dcols, input_size.0, input_size.1))
    }
}

use super::ParamLayout;
use crate::instrument;
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;

/// Fully connected layer applied to a row-major batch `rows × in_features`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    weight_offset: usize,
    bias_offset: usize,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, in_features: usize, out_features: usize) -> Self {
        let weight_offset = layout.alloc(in_features * out_features);
        let bias_offset = layout.alloc(out_features);
        Self {
            in_features,
            out_features,
            weight_offset,
            bias_offset,
        }
    }

    fn weights<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        let w = &params[self.weight_offset..self.weight_offset + self.in_features * self.out_features];
        ArrayView2::from_shape((self.out_features, self.in_features), w).expect("linear weights")
    }

    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R, gain: f64) {
        let n = self.in_features * self.out_features;
        super::he_normal(
            rng,
            &mut params[self.weight_offset..self.weight_offset + n],
            self.in_features,
            gain,
        );
        params[self.bias_offset..self.bias_offset + self.out_features].fill(0.0);
    }

    pub fn forward(&self, params: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * self.out_features];
        if rows == 0 {
            return out;
        }
        let bias = &params[self.bias_offset..self.bias_offset + self.out_features];
        for row in out.chunks_exact_mut(self.out_features) {
            row.copy_from_slice(bias);
        }
        let xv = ArrayView2::from_shape((rows, self.in_features), x).expect("linear input");
        let mut y = ArrayViewMut2::from_shape((rows, self.out_features), &mut out).expect("y");
        general_mat_mul(1.0, &xv, &self.weights(params).t(), 1.0, &mut y);
        out
    }

    pub fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        rows: usize,
        dy: &[f64],
        grads: Option<&mut [f64]>,
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        instrument::record_backward();
        if rows == 0 {
            return want_input_grad.then(Vec::new);
        }
        let dyv = ArrayView2::from_shape((rows, self.out_features), dy).expect("dy");
        if let Some(grads) = grads {
            let xv = ArrayView2::from_shape((rows, self.in_features), x).expect("x");
            {
                let gw = &mut grads
                    [self.weight_offset..self.weight_offset + self.in_features * self.out_features];
                let mut gw =
                    ArrayViewMut2::from_shape((self.out_features, self.in_features), gw).expect("gw");
                general_mat_mul(1.0, &dyv.t(), &xv, 1.0, &mut gw);
            }
            let gb = &mut grads[self.bias_offset..self.bias_offset + self.out_features];
            for row in dy.chunks_exact(self.out_features) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        if !want_input_grad {
            return None;
        }
        let mut dx = vec![0.0; rows * self.in_features];
        {
            let mut dxv = ArrayViewMut2::from_shape((rows, self.in_features), &mut dx).expect("dx");
            general_mat_mul(1.0, &dyv, &self.weights(params), 0.0, &mut dxv);
        }
        Some(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradients_match_finite_differences() {
        let mut layout = ParamLayout::default();
        let lin = Linear::new(&mut layout, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = vec![0.0; layout.len()];
        lin.init(&mut params, &mut rng, 1.0);
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |p: &[f64], x: &[f64]| -> f64 {
            lin.forward(p, x, 2).iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let mut grads = vec![0.0; params.len()];
        let dx = lin.backward(&params, &x, 2, &r, Some(&mut grads), true).unwrap();
        let h = 1e-6;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            let up = loss(&p, &x);
            p[i] -= 2.0 * h;
            let fd = (up - loss(&p, &x)) / (2.0 * h);
            assert!((fd - grads[i]).abs() < 1e-7);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let up = loss(&params, &xp);
            xp[i] -= 2.0 * h;
            let fd = (up - loss(&params, &xp)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-7);
        }
    }
}

use super::FeatureMap;

/// `ln(1 + eˣ)`, computed without overflow. Smooth everywhere, so finite
/// differences through the network agree with the analytic gradient.
pub fn softplus_inplace(x: &mut [f64]) {
    for v in x {
        *v = if *v > 0.0 {
            *v + (-*v).exp().ln_1p()
        } else {
            v.exp().ln_1p()
        };
    }
}

/// Gradient of softplus given its *output*: `σ(x) = 1 − e^(−softplus(x))`.
pub fn softplus_backward(out: &[f64], grad: &mut [f64]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        *g *= -(-o).exp_m1();
    }
}

pub fn leaky_relu_inplace(x: &mut [f64], slope: f64) {
    for v in x {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

/// Gradient of leaky ReLU given its output (sign is preserved by the map).
pub fn leaky_relu_backward(out: &[f64], grad: &mut [f64], slope: f64) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o < 0.0 {
            *g *= slope;
        }
    }
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = FeatureMap::zeros(x.channels, h, w);
    for c in 0..x.channels {
        for y in 0..h {
            for xx in 0..w {
                out.data[(c * h + y) * w + xx] = x.at(c, y / 2, xx / 2);
            }
        }
    }
    out
}

pub fn upsample2_backward(dout: &FeatureMap) -> FeatureMap {
    let (h, w) = (dout.height / 2, dout.width / 2);
    let mut dx = FeatureMap::zeros(dout.channels, h, w);
    for c in 0..dout.channels {
        for y in 0..dout.height {
            for xx in 0..dout.width {
                dx.data[(c * h + y / 2) * w + xx / 2] += dout.at(c, y, xx);
            }
        }
    }
    dx
}

pub fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    assert_eq!((a.height, a.width), (b.height, b.width), "concat spatial size");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatureMap::from_vec(a.channels + b.channels, a.height, a.width, data)
}

/// Inverse of [`concat_channels`]: the first `channels` go left.
pub fn split_channels(x: &FeatureMap, channels: usize) -> (FeatureMap, FeatureMap) {
    let cut = channels * x.plane();
    (
        FeatureMap::from_vec(channels, x.height, x.width, x.data[..cut].to_vec()),
        FeatureMap::from_vec(x.channels - channels, x.height, x.width, x.data[cut..].to_vec()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_values_and_slope() {
        let xs = [-800.0, -3.0, 0.0, 2.5, 800.0];
        let mut out = xs;
        softplus_inplace(&mut out);
        assert_eq!(out[2], 2f64.ln());
        assert!(out[0] >= 0.0 && out[0] < 1e-300);
        assert_eq!(out[4], 800.0);
        let mut grad = [1.0; 5];
        softplus_backward(&out, &mut grad);
        for (i, &x) in xs.iter().enumerate() {
            let sigmoid = 1.0 / (1.0 + (-x as f64).exp());
            assert!((grad[i] - sigmoid).abs() < 1e-12, "{x}");
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = FeatureMap::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let up = upsample2(&x);
        assert_eq!(up.data[..4], [1.0, 1.0, 2.0, 2.0]);
        let g = FeatureMap::from_vec(1, 4, 4, (0..16).map(f64::from).collect());
        // <up(x), g> == <x, up^T(g)>
        let lhs: f64 = up.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let back = upsample2_backward(&g);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn concat_then_split_is_identity() {
        let a = FeatureMap::from_vec(1, 1, 2, vec![1.0, 2.0]);
        let b = FeatureMap::from_vec(2, 1, 2, vec![3.0, 4.0, 5.0, 6.0]);
        let (l, r) = split_channels(&concat_channels(&a, &b), 1);
        assert_eq!((l, r), (a, b));
    }
}

//! Perturbation generator: a small convolutional encoder–decoder with skip
//! connections whose output is squashed to `[-epsilon_max, epsilon_max]`.

use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::data::{chw_to_hwc, hwc_to_chw, ImageTensor};
use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, leaky_relu_backward, leaky_relu_inplace, split_channels, upsample2,
    upsample2_backward, Conv2d, FeatureMap, ParamLayout,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

const SLOPE: f64 = 0.1;
const VERSION: u32 = 1;
/// Input sides must be divisible by this (two stride-2 stages).
pub const SIZE_MULTIPLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    /// Bound on each raw perturbation value, in normalized pixel units.
    pub epsilon_max: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 4,
            epsilon_max: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub version: u32,
    pub config: GeneratorConfig,
    pub seed: u64,
    pub input_height: usize,
    pub input_width: usize,
    pub epochs: usize,
    pub lambda: Option<f64>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone)]
struct GeneratorNet {
    enc1: Conv2d,
    enc2: Conv2d,
    enc3: Conv2d,
    dec2: Conv2d,
    dec1: Conv2d,
    out: Conv2d,
    encoder_end: usize,
    num_params: usize,
}

impl GeneratorNet {
    fn new(c: usize) -> Self {
        let mut layout = ParamLayout::default();
        let enc1 = Conv2d::new(&mut layout, 3, c, 3, 1, 1);
        let enc2 = Conv2d::new(&mut layout, c, 2 * c, 3, 2, 1);
        let enc3 = Conv2d::new(&mut layout, 2 * c, 2 * c, 3, 2, 1);
        let encoder_end = layout.len();
        let dec2 = Conv2d::new(&mut layout, 4 * c, 2 * c, 3, 1, 1);
        let dec1 = Conv2d::new(&mut layout, 3 * c, c, 3, 1, 1);
        let out = Conv2d::new(&mut layout, c, 3, 3, 1, 1);
        Self {
            enc1,
            enc2,
            enc3,
            dec2,
            dec1,
            out,
            encoder_end,
            num_params: layout.len(),
        }
    }
}

/// Intermediate activations kept for the backward pass.
pub(crate) struct GeneratorTrace {
    input_size: (usize, usize),
    cols: [Vec<f64>; 6],
    e1: FeatureMap,
    e2: FeatureMap,
    e3: FeatureMap,
    d2: FeatureMap,
    d1: FeatureMap,
    /// tanh of the final pre-activation.
    squashed: FeatureMap,
}

/// Additive perturbation, same shape and layout (HWC) as its source image.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Perturbation {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", height * width * 3),
                actual: format!("{} values", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("perturbation must be finite".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width * 3],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Squared L2 norm.
    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// `clamp(x + delta, -1, 1)` element-wise.
///
/// # Panics
/// If the shapes differ.
pub fn apply(x: &ImageTensor, delta: &Perturbation) -> ImageTensor {
    assert_eq!(x.shape(), delta.shape(), "perturbation shape must match image");
    let values = x
        .values()
        .iter()
        .zip(&delta.values)
        .map(|(a, d)| a + d)
        .collect();
    ImageTensor::clamped(x.height(), x.width(), values)
}

#[derive(Debug, Clone)]
pub struct GeneratorWeights {
    meta: GeneratorMeta,
    params: Vec<f64>,
    net: GeneratorNet,
}

impl PartialEq for GeneratorWeights {
    fn eq(&self, other: &Self) -> bool {
        self.meta == other.meta && self.params == other.params
    }
}

impl GeneratorWeights {
    /// He-initialized hidden layers and a zero output layer, so `generate`
    /// returns an all-zero perturbation until trained.
    pub fn initialize(config: GeneratorConfig, input: (usize, usize), seed: u64) -> Result<Self> {
        if config.base_channels == 0 {
            return Err(Error::InvalidArgument("base_channels must be at least 1".into()));
        }
        if !(config.epsilon_max > 0.0 && config.epsilon_max.is_finite()) {
            return Err(Error::InvalidArgument("epsilon_max must be positive".into()));
        }
        check_size(input)?;
        let net = GeneratorNet::new(config.base_channels);
        let mut params = vec![0.0; net.num_params];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in [&net.enc1, &net.enc2, &net.enc3, &net.dec2, &net.dec1] {
            conv.init(&mut params, &mut rng, 1.0);
        }
        net.out.zero_init(&mut params);
        Ok(Self {
            meta: GeneratorMeta {
                version: VERSION,
                config,
                seed,
                input_height: input.0,
                input_width: input.1,
                epochs: 0,
                lambda: None,
                threshold: None,
            },
            params,
            net,
        })
    }

    pub fn meta(&self) -> &GeneratorMeta {
        &self.meta
    }

    pub(crate) fn meta_mut(&mut self) -> &mut GeneratorMeta {
        &mut self.meta
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.meta.input_height, self.meta.input_width)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let e = self.net.encoder_end;
        Checkpoint {
            header: self.meta.clone(),
            sections: vec![
                ("encoder".into(), self.params[..e].to_vec()),
                ("decoder".into(), self.params[e..].to_vec()),
            ],
        }
        .to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut ckpt = Checkpoint::<GeneratorMeta>::from_bytes(bytes)?;
        let meta = ckpt.header.clone();
        if meta.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported generator version {}",
                meta.version
            )));
        }
        let net = GeneratorNet::new(meta.config.base_channels);
        let mut params = Vec::with_capacity(net.num_params);
        for name in ["encoder", "decoder"] {
            params.extend(
                ckpt.take_section(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing section {name}")))?,
            );
        }
        if params.len() != net.num_params {
            return Err(Error::Checkpoint(format!(
                "expected {} generator parameters, found {}",
                net.num_params,
                params.len()
            )));
        }
        Ok(Self { meta, params, net })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.to_bytes().expect("generator header serializes"))
    }

    fn check_input(&self, x: &ImageTensor) -> Result<()> {
        if x.shape() != self.resolution() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.meta.input_height, self.meta.input_width),
                actual: format!("{}x{}", x.height(), x.width()),
            });
        }
        Ok(())
    }

    pub(crate) fn forward_traced(&self, x: &ImageTensor) -> Result<(Perturbation, GeneratorTrace)> {
        self.check_input(x)?;
        let p = &self.params;
        let n = &self.net;
        let input = hwc_to_chw(x.values(), x.height(), x.width());
        let (mut e1, c0) = n.enc1.forward(p, &input);
        leaky_relu_inplace(&mut e1.data, SLOPE);
        let (mut e2, c1) = n.enc2.forward(p, &e1);
        leaky_relu_inplace(&mut e2.data, SLOPE);
        let (mut e3, c2) = n.enc3.forward(p, &e2);
        leaky_relu_inplace(&mut e3.data, SLOPE);
        let cat2 = concat_channels(&upsample2(&e3), &e2);
        let (mut d2, c3) = n.dec2.forward(p, &cat2);
        leaky_relu_inplace(&mut d2.data, SLOPE);
        let cat1 = concat_channels(&upsample2(&d2), &e1);
        let (mut d1, c4) = n.dec1.forward(p, &cat1);
        leaky_relu_inplace(&mut d1.data, SLOPE);
        let (mut squashed, c5) = n.out.forward(p, &d1);
        squashed.data.iter_mut().for_each(|v| *v = v.tanh());
        let eps = self.meta.config.epsilon_max;
        let values = chw_to_hwc(&squashed).into_iter().map(|t| eps * t).collect();
        let delta = Perturbation {
            height: x.height(),
            width: x.width(),
            values,
        };
        let trace = GeneratorTrace {
            input_size: x.shape(),
            cols: [c0, c1, c2, c3, c4, c5],
            e1,
            e2,
            e3,
            d2,
            d1,
            squashed,
        };
        Ok((delta, trace))
    }

    /// Accumulate parameter gradients given `d_delta` (HWC) into `grads`.
    pub(crate) fn backward(&self, trace: &GeneratorTrace, d_delta: &[f64], grads: &mut [f64]) {
        let p = &self.params;
        let n = &self.net;
        let c = self.meta.config.base_channels;
        let (h, w) = trace.input_size;
        let (h2, w2) = (h / 2, w / 2);
        let eps = self.meta.config.epsilon_max;

        let mut d = hwc_to_chw(d_delta, h, w);
        for (g, t) in d.data.iter_mut().zip(&trace.squashed.data) {
            *g *= eps * (1.0 - t * t);
        }
        let mut d_d1 = n
            .out
            .backward(p, (h, w), &trace.cols[5], &d, Some(grads), true)
            .expect("input grad requested");
        leaky_relu_backward(&trace.d1.data, &mut d_d1.data, SLOPE);
        let d_cat1 = n
            .dec1
            .backward(p, (h, w), &trace.cols[4], &d_d1, Some(grads), true)
            .expect("input grad requested");
        let (d_up1, mut d_e1) = split_channels(&d_cat1, 2 * c);
        let mut d_d2 = upsample2_backward(&d_up1);
        leaky_relu_backward(&trace.d2.data, &mut d_d2.data, SLOPE);
        let d_cat2 = n
            .dec2
            .backward(p, (h2, w2), &trace.cols[3], &d_d2, Some(grads), true)
            .expect("input grad requested");
        let (d_up2, mut d_e2) = split_channels(&d_cat2, 2 * c);
        let mut d_e3 = upsample2_backward(&d_up2);
        leaky_relu_backward(&trace.e3.data, &mut d_e3.data, SLOPE);
        let from_e3 = n
            .enc3
            .backward(p, (h2, w2), &trace.cols[2], &d_e3, Some(grads), true)
            .expect("input grad requested");
        d_e2.add_assign(&from_e3);
        leaky_relu_backward(&trace.e2.data, &mut d_e2.data, SLOPE);
        let from_e2 = n
            .enc2
            .backward(p, (h, w), &trace.cols[1], &d_e2, Some(grads), true)
            .expect("input grad requested");
        d_e1.add_assign(&from_e2);
        leaky_relu_backward(&trace.e1.data, &mut d_e1.data, SLOPE);
        n.enc1
            .backward(p, (h, w), &trace.cols[0], &d_e1, Some(grads), false);
    }
}

fn check_size(input: (usize, usize)) -> Result<()> {
    let (h, w) = input;
    if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        return Err(Error::InvalidArgument(format!(
            "generator input {h}x{w} must be a positive multiple of {SIZE_MULTIPLE} on each side"
        )));
    }
    Ok(())
}

/// `δ = G(x)`: one forward pass through the generator, nothing else.
pub fn generate(x: &ImageTensor, weights: &GeneratorWeights) -> Result<Perturbation> {
    weights.forward_traced(x).map(|(delta, _)| delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::clamped(h, w, (0..h * w * 3).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn untrained_generator_is_identity_attack() {
        let g = GeneratorWeights::initialize(GeneratorConfig::default(), (16, 16), 3).unwrap();
        let d = generate(&image(16, 16, 1), &g).unwrap();
        assert!(d.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_wrong_resolution() {
        let g = GeneratorWeights::initialize(GeneratorConfig::default(), (16, 16), 3).unwrap();
        assert!(matches!(generate(&image(20, 16, 1), &g), Err(Error::ShapeMismatch { .. })));
        assert!(GeneratorWeights::initialize(GeneratorConfig::default(), (18, 16), 3).is_err());
    }

    #[test]
    fn clamp_endpoints() {
        let x = ImageTensor::filled(16, 16, 0.0).unwrap();
        let mut v = vec![0.0; 16 * 16 * 3];
        v[..4].copy_from_slice(&[-2.0, -0.3, 0.3, 2.0]);
        let out = apply(&x, &Perturbation::new(16, 16, v).unwrap());
        assert_eq!(&out.values()[..4], &[-1.0, -0.3, 0.3, 1.0]);
        let ones = ImageTensor::filled(16, 16, 1.0).unwrap();
        let half = Perturbation::new(16, 16, vec![0.5; 768]).unwrap();
        assert!(apply(&ones, &half).values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut g = GeneratorWeights::initialize(GeneratorConfig { base_channels: 3, epsilon_max: 0.5 }, (8, 8), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // give the zero output layer some weight so every path carries gradient
        let out_w = g.net.out.weight_offset;
        for v in &mut g.params[out_w..] {
            *v = rng.random_range(-0.3..0.3);
        }
        let x = image(8, 8, 2);
        let probe: Vec<f64> = (0..192).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |g: &GeneratorWeights| -> f64 {
            let d = generate(&x, g).unwrap();
            d.values().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (_, trace) = g.forward_traced(&x).unwrap();
        let mut grads = vec![0.0; g.num_params()];
        g.backward(&trace, &probe, &mut grads);
        for _ in 0..25 {
            let i = rng.random_range(0..g.num_params());
            let h = 1e-5;
            let mut plus = g.clone();
            plus.params[i] += h;
            let mut minus = g.clone();
            minus.params[i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let err = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: fd {fd} analytic {}", grads[i]);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let g = GeneratorWeights::initialize(GeneratorConfig::default(), (16, 16), 11).unwrap();
        let bytes = g.to_bytes().unwrap();
        let back = GeneratorWeights::from_bytes(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn any_multiple_of_four_keeps_shape() {
        for (h, w) in [(16, 16), (20, 32), (64, 48)] {
            let g = GeneratorWeights::initialize(GeneratorConfig::default(), (h, w), 1).unwrap();
            let d = generate(&image(h, w, 4), &g).unwrap();
            assert_eq!(d.shape(), (h, w));
        }
    }
}

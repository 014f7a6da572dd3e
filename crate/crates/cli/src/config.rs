//! The run configuration file. Every section is optional; missing keys take
//! the defaults below and unknown keys are rejected.

use advface::attacks::{CwConfig, GuardMode, TrainConfig};
use advface::detector::{AnchorConfig, DetectorTrainConfig, DEFAULT_NMS_IOU, TEST_PROPOSAL_CAP, TRAIN_PROPOSAL_CAP};
use advface::evaluation::{default_qualities, EvalSettings, SWEEP_ALPHAS};
use advface::generator::{GeneratorConfig, SIZE_MULTIPLE};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Default config shipped with the repository, tuned on synthetic data.
pub const DEFAULT_CONFIG: &str = include_str!("../default.toml");

/// Stream tags for the component seeds derived from the global seed.
pub mod tags {
    pub const DETECTOR_DATA: u64 = 1;
    pub const GENERATOR_DATA: u64 = 2;
    pub const EVAL_DATA: u64 = 3;
    pub const DETECTOR: u64 = 4;
    pub const GENERATOR_INIT: u64 = 5;
    pub const ATTACK: u64 = 6;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for data-parallel stages. 1 keeps runs bit-exact.
    pub workers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: DataSection,
    pub detector: DetectorSection,
    pub generator: GeneratorSection,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            output_dir: None,
            data: DataSection::default(),
            detector: DetectorSection::default(),
            generator: GeneratorSection::default(),
            attack: AttackSection::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub height: usize,
    pub width: usize,
    /// Folder of images plus annotations.csv; synthetic data when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_dir: Option<PathBuf>,
    pub synth_detector_images: usize,
    pub synth_generator_images: usize,
    pub synth_eval_images: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            train_dir: None,
            eval_dir: None,
            synth_detector_images: 400,
            synth_generator_images: 200,
            synth_eval_images: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub flip: bool,
    pub anchor_scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let anchors = AnchorConfig::default();
        Self {
            epochs: 15,
            learning_rate: 3e-3,
            batch_size: 8,
            flip: true,
            anchor_scales: anchors.scales,
            aspect_ratios: anchors.aspect_ratios,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub base_channels: usize,
    pub epsilon_max: f64,
    pub epochs: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            base_channels: g.base_channels,
            epsilon_max: g.epsilon_max,
            epochs: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub lambda: f64,
    pub threshold: f64,
    pub max_iter: usize,
    pub step_size: f64,
    pub train_alpha: f64,
    pub proposal_cap_train: usize,
    pub proposal_cap_test: usize,
    pub guard: GuardMode,
}

impl Default for AttackSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lambda: t.lambda,
            threshold: t.threshold,
            max_iter: t.max_iter,
            step_size: t.step_size,
            train_alpha: t.train_alpha,
            proposal_cap_train: TRAIN_PROPOSAL_CAP,
            proposal_cap_test: TEST_PROPOSAL_CAP,
            guard: t.guard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub alphas: Vec<f64>,
    pub jpeg_qualities: Vec<u8>,
    pub nms_iou: f64,
    /// Number of evaluation images exported as three-panel figures.
    pub figures: usize,
    pub magnify: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            alphas: SWEEP_ALPHAS.to_vec(),
            jpeg_qualities: default_qualities(),
            nms_iou: DEFAULT_NMS_IOU,
            figures: 4,
            magnify: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub images: usize,
    pub attacks: Vec<String>,
    pub fgsm_epsilon: f64,
    pub cw_c: f64,
    pub cw_steps: usize,
    pub cw_step_size: f64,
    /// Minimum slowdown between consecutive attacks in `--assert-order`.
    pub order_factor: f64,
}

impl Default for BenchSection {
    fn default() -> Self {
        let cw = CwConfig::default();
        Self {
            images: 100,
            attacks: vec!["generator".into(), "fgsm".into(), "cw".into()],
            fgsm_epsilon: 0.05,
            cw_c: cw.c,
            cw_steps: cw.steps,
            cw_step_size: cw.step_size,
            order_factor: 1.2,
        }
    }
}

/// Canonical attack name for a user-supplied one.
pub fn attack_name(name: &str) -> Option<&'static str> {
    match name.trim().to_ascii_lowercase().as_str() {
        "gen" | "generator" => Some("generator"),
        "fgsm" => Some("fgsm"),
        "cw" | "c-w" => Some("cw"),
        _ => None,
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    pub fn input(&self) -> (usize, usize) {
        (self.data.height, self.data.width)
    }

    /// Every check that can be made before touching data.
    pub fn validate(&self) -> Result<(), String> {
        if self.workers == 0 {
            return Err("workers must be at least 1".into());
        }
        let (h, w) = self.input();
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 || h < 16 || w < 16 {
            return Err(format!(
                "data.height and data.width must be multiples of {SIZE_MULTIPLE} and at least 16, got {h}x{w}"
            ));
        }
        if self.detector.epochs == 0 || self.detector.batch_size == 0 {
            return Err("detector.epochs and detector.batch_size must be at least 1".into());
        }
        if !(self.detector.learning_rate > 0.0) {
            return Err("detector.learning_rate must be positive".into());
        }
        if self.detector.anchor_scales.is_empty() || self.detector.aspect_ratios.is_empty() {
            return Err("detector anchors need at least one scale and one aspect ratio".into());
        }
        if self.generator.base_channels == 0 || !(self.generator.epsilon_max > 0.0) {
            return Err("generator.base_channels and generator.epsilon_max must be positive".into());
        }
        self.train_config().validate().map_err(|e| e.to_string())?;
        if self.eval.alphas.is_empty()
            || self.eval.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0))
            || self.eval.alphas.windows(2).any(|p| p[0] > p[1])
        {
            return Err("eval.alphas must be a non-empty ascending list inside (0, 1)".into());
        }
        if self.eval.jpeg_qualities.iter().any(|q| !(1..=100).contains(q)) {
            return Err("eval.jpeg_qualities must lie in 1..=100".into());
        }
        if !(self.eval.nms_iou > 0.0 && self.eval.nms_iou <= 1.0) || !(self.eval.magnify > 0.0) {
            return Err("eval.nms_iou must lie in (0, 1] and eval.magnify must be positive".into());
        }
        if self.bench.images < 10 {
            return Err(format!("bench.images must be at least 10, got {}", self.bench.images));
        }
        if let Some(bad) = self.bench.attacks.iter().find(|a| attack_name(a).is_none()) {
            return Err(format!("unknown attack {bad:?} (expected generator, fgsm or cw)"));
        }
        if !(self.bench.order_factor >= 1.0) {
            return Err("bench.order_factor must be at least 1".into());
        }
        Ok(())
    }

    pub fn detector_config(&self) -> DetectorTrainConfig {
        DetectorTrainConfig {
            epochs: self.detector.epochs,
            seed: advface::seeding::derive(self.seed, &[tags::DETECTOR]),
            learning_rate: self.detector.learning_rate,
            batch_size: self.detector.batch_size,
            flip: self.detector.flip,
            anchors: AnchorConfig {
                scales: self.detector.anchor_scales.clone(),
                aspect_ratios: self.detector.aspect_ratios.clone(),
            },
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            base_channels: self.generator.base_channels,
            epsilon_max: self.generator.epsilon_max,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let a = &self.attack;
        TrainConfig {
            lambda: a.lambda,
            threshold: a.threshold,
            max_iter: a.max_iter,
            step_size: a.step_size,
            train_alpha: a.train_alpha,
            proposal_cap_train: a.proposal_cap_train,
            proposal_cap_test: a.proposal_cap_test,
            seed: advface::seeding::derive(self.seed, &[tags::ATTACK]),
            guard: a.guard,
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            proposal_cap: self.attack.proposal_cap_test,
            nms_iou: self.eval.nms_iou,
        }
    }

    pub fn cw_config(&self) -> CwConfig {
        CwConfig {
            c: self.bench.cw_c,
            steps: self.bench.cw_steps,
            step_size: self.bench.cw_step_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_config_matches_defaults() {
        let shipped = RunConfig::from_toml(DEFAULT_CONFIG).unwrap();
        assert_eq!(shipped, RunConfig::default());
        shipped.validate().unwrap();
    }

    #[test]
    fn partial_sections_fill_in_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\n[attack]\nlambda = 0.5\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.attack.lambda, 0.5);
        assert_eq!(cfg.attack.max_iter, AttackSection::default().max_iter);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 3\n").is_err());
        assert!(RunConfig::from_toml("[attack]\nlamda = 0.5\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.data.train_dir = Some("faces".into());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.data.height = 66;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.bench.attacks.push("pgd".into());
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.workers = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn attack_aliases() {
        assert_eq!(attack_name("gen"), Some("generator"));
        assert_eq!(attack_name("C-W"), Some("cw"));
        assert_eq!(attack_name("pgd"), None);
    }
}

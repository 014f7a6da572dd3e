//! Desk-scale evaluations: detection counts over a confidence sweep, the
//! JPEG compression defense curve, per-attack runtime, and figure export.

mod figure;
mod report;

pub use figure::{export_figure, render_figure, FIGURE_MARGIN};
pub use report::{write_csv, EvalReport, REPORT_SCHEMA};

use crate::attacks::{craft_with_generator, cw_attack, fgsm_attack, generator_attack, CwConfig, FoolingCriterion};
use crate::data::{jpeg_roundtrip, ImageTensor, Sample};
use crate::detector::{DetectionList, DetectorPass, DetectorWeights, DEFAULT_NMS_IOU, TEST_PROPOSAL_CAP};
use crate::error::{Error, Result};
use crate::generator::GeneratorWeights;
use crate::geometry::BBox;
use crate::par;
use serde::{Deserialize, Serialize};

/// IoU a detection needs with a ground-truth face to count as finding it.
pub const MATCH_IOU: f64 = 0.5;
/// Confidence grid of the sweep.
pub const SWEEP_ALPHAS: [f64; 6] = [0.5, 0.6, 0.7, 0.8, 0.9, 0.99];
/// Detection threshold used for the defense curve.
pub const DEFENSE_ALPHA: f64 = 0.7;

pub fn default_qualities() -> Vec<u8> {
    (1..=10).map(|q| q * 10).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub clean_detected: usize,
    pub attacked_detected: usize,
    pub total_faces: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefensePoint {
    pub jpeg_quality: u8,
    pub detected_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseCurve {
    /// Detected fraction on the attacked images before any compression.
    pub uncompressed_fraction: f64,
    pub points: Vec<DefensePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRow {
    pub attack_name: String,
    pub seconds_per_1000: f64,
    pub hardware_note: String,
}

/// Detector settings shared by every evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub proposal_cap: usize,
    pub nms_iou: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            proposal_cap: TEST_PROPOSAL_CAP,
            nms_iou: DEFAULT_NMS_IOU,
        }
    }
}

/// Number of ground-truth boxes hit by at least one detection.
pub fn count_detected(detections: &DetectionList, truth: &[BBox]) -> usize {
    truth
        .iter()
        .filter(|g| detections.boxes.iter().any(|d| d.iou(g) >= MATCH_IOU))
        .count()
}

fn check_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
        return Err(Error::InvalidArgument("every alpha must lie in (0, 1)".into()));
    }
    if alphas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("alphas must be sorted ascending".into()));
    }
    Ok(())
}

/// Clean and generator-attacked detection counts at each confidence level.
pub fn threshold_sweep(
    data: &[Sample],
    detector: &DetectorWeights,
    generator: &GeneratorWeights,
    alphas: &[f64],
    settings: &EvalSettings,
) -> Result<Vec<SweepRow>> {
    check_alphas(alphas)?;
    let per_image = par::try_map(data, |s| -> Result<Vec<(usize, usize)>> {
        let attacked = craft_with_generator(&s.image, generator)?;
        let clean_pass = DetectorPass::run(&s.image, detector, settings.proposal_cap);
        let attacked_pass = DetectorPass::run(&attacked, detector, settings.proposal_cap);
        Ok(alphas
            .iter()
            .map(|&a| {
                (
                    count_detected(&clean_pass.detections(a, settings.nms_iou), &s.boxes),
                    count_detected(&attacked_pass.detections(a, settings.nms_iou), &s.boxes),
                )
            })
            .collect())
    })?;
    let total_faces = data.iter().map(|s| s.boxes.len()).sum();
    Ok(alphas
        .iter()
        .enumerate()
        .map(|(k, &alpha)| SweepRow {
            alpha,
            clean_detected: per_image.iter().map(|v| v[k].0).sum(),
            attacked_detected: per_image.iter().map(|v| v[k].1).sum(),
            total_faces,
        })
        .collect())
}

fn detected_fraction(detected: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        detected as f64 / total as f64
    }
}

/// Detected fraction of generator-attacked images after a JPEG round trip
/// at each quality, re-detected at [`DEFENSE_ALPHA`].
pub fn jpeg_defense_curve(
    data: &[Sample],
    detector: &DetectorWeights,
    generator: &GeneratorWeights,
    qualities: &[u8],
    settings: &EvalSettings,
) -> Result<DefenseCurve> {
    if let Some(q) = qualities.iter().find(|q| !(1..=100).contains(*q)) {
        return Err(Error::InvalidArgument(format!("JPEG quality {q} outside 1..=100")));
    }
    let detect = |x: &ImageTensor, truth: &[BBox]| {
        let pass = DetectorPass::run(x, detector, settings.proposal_cap);
        count_detected(&pass.detections(DEFENSE_ALPHA, settings.nms_iou), truth)
    };
    let per_image = par::try_map(data, |s| -> Result<(usize, Vec<usize>)> {
        let attacked = craft_with_generator(&s.image, generator)?;
        let base = detect(&attacked, &s.boxes);
        let mut by_quality = Vec::with_capacity(qualities.len());
        for &q in qualities {
            by_quality.push(detect(&jpeg_roundtrip(&attacked, q)?, &s.boxes));
        }
        Ok((base, by_quality))
    })?;
    let total: usize = data.iter().map(|s| s.boxes.len()).sum();
    Ok(DefenseCurve {
        uncompressed_fraction: detected_fraction(per_image.iter().map(|p| p.0).sum(), total),
        points: qualities
            .iter()
            .enumerate()
            .map(|(k, &q)| DefensePoint {
                jpeg_quality: q,
                detected_fraction: detected_fraction(per_image.iter().map(|p| p.1[k]).sum(), total),
            })
            .collect(),
    })
}

/// An attack to time in [`runtime_benchmark`].
#[derive(Debug, Clone, Copy)]
pub enum BenchAttack<'a> {
    Generator(&'a GeneratorWeights),
    Fgsm { epsilon: f64 },
    Cw(CwConfig),
}

impl BenchAttack<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            BenchAttack::Generator(_) => "generator",
            BenchAttack::Fgsm { .. } => "fgsm",
            BenchAttack::Cw(_) => "cw",
        }
    }
}

/// Images excluded from timing at the start of each attack's run.
pub const WARMUP_IMAGES: usize = 3;

pub fn hardware_note() -> String {
    format!(
        "{}-{} cpu, serial, {} hardware threads available",
        std::env::consts::ARCH,
        std::env::consts::OS,
        std::thread::available_parallelism().map_or(1, |n| n.get())
    )
}

/// Serial wall-clock cost of crafting each attack over `n` images (cycling
/// through `data`), first [`WARMUP_IMAGES`] excluded, scaled to 1000 images.
pub fn runtime_benchmark(
    attacks: &[BenchAttack],
    data: &[Sample],
    n: usize,
    detector: &DetectorWeights,
    criterion: &FoolingCriterion,
) -> Result<Vec<RuntimeRow>> {
    if n < 10 {
        return Err(Error::InvalidArgument(format!("benchmark needs n >= 10, got {n}")));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("benchmark needs at least one image".into()));
    }
    let note = hardware_note();
    let mut rows = Vec::with_capacity(attacks.len());
    for attack in attacks {
        let mut timed = 0.0;
        for i in 0..n {
            let x = &data[i % data.len()].image;
            let result = match attack {
                BenchAttack::Generator(g) => generator_attack(x, g, detector, criterion)?,
                BenchAttack::Fgsm { epsilon } => fgsm_attack(x, detector, *epsilon, criterion)?,
                BenchAttack::Cw(cfg) => cw_attack(x, detector, cfg, criterion)?,
            };
            if i >= WARMUP_IMAGES {
                timed += result.wall_time;
            }
        }
        let per_image = timed / (n - WARMUP_IMAGES) as f64;
        rows.push(RuntimeRow {
            attack_name: attack.name().to_string(),
            seconds_per_1000: per_image * 1000.0,
            hardware_note: note.clone(),
        });
    }
    Ok(rows)
}

/// Whether `rows` are strictly ordered as named, each at least `factor`
/// times slower than the previous.
pub fn check_order(rows: &[RuntimeRow], order: &[&str], factor: f64) -> Result<()> {
    let find = |name: &str| {
        rows.iter()
            .find(|r| r.attack_name == name)
            .map(|r| r.seconds_per_1000)
            .ok_or_else(|| Error::InvalidArgument(format!("no runtime row for attack {name}")))
    };
    for pair in order.windows(2) {
        let (a, b) = (find(pair[0])?, find(pair[1])?);
        if b < factor * a {
            return Err(Error::InvalidArgument(format!(
                "runtime order violated: {} ({a:.3} s/1000) is not {factor}x faster than {} ({b:.3} s/1000)",
                pair[0], pair[1]
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_counting_uses_iou_half() {
        let truth = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(30.0, 30.0, 40.0, 40.0)];
        let dets = DetectionList {
            boxes: vec![BBox::new(0.0, 0.0, 10.0, 5.0), BBox::new(31.0, 31.0, 40.0, 40.0)],
            confidences: vec![0.9, 0.8],
            threshold_used: 0.7,
        };
        assert_eq!(count_detected(&dets, &truth), 2);
        let shifted = DetectionList {
            boxes: vec![BBox::new(5.0, 5.0, 15.0, 15.0)],
            confidences: vec![0.9],
            threshold_used: 0.7,
        };
        assert_eq!(count_detected(&shifted, &truth), 0);
    }

    #[test]
    fn alphas_are_validated() {
        assert!(check_alphas(&[0.5, 0.7]).is_ok());
        assert!(check_alphas(&[0.7, 0.5]).is_err());
        assert!(check_alphas(&[0.0, 0.5]).is_err());
        assert!(check_alphas(&[0.5, 1.0]).is_err());
    }

    #[test]
    fn order_check() {
        let row = |n: &str, s: f64| RuntimeRow {
            attack_name: n.into(),
            seconds_per_1000: s,
            hardware_note: String::new(),
        };
        let rows = [row("generator", 1.0), row("fgsm", 1.5), row("cw", 20.0)];
        assert!(check_order(&rows, &["generator", "fgsm", "cw"], 1.2).is_ok());
        assert!(check_order(&rows, &["generator", "fgsm", "cw"], 1.6).is_err());
        assert!(check_order(&rows, &["generator", "pgd"], 1.2).is_err());
    }
}

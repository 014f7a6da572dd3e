use advface::attacks::{train_generator, CwConfig, FoolingCriterion, TrainConfig};
use advface::data::{synth_faces, Sample};
use advface::detector::{train_detector, DetectorPass, DetectorTrainConfig, DetectorWeights};
use advface::evaluation::{
    count_detected, default_qualities, jpeg_defense_curve, runtime_benchmark, threshold_sweep, BenchAttack,
    EvalSettings, SWEEP_ALPHAS,
};
use advface::generator::{GeneratorConfig, GeneratorWeights};
use advface::par;
use std::sync::OnceLock;

const INPUT: (usize, usize) = (64, 64);

fn samples(n: usize, seed: u64) -> Vec<Sample> {
    synth_faces(n, INPUT, seed).unwrap().preprocessed(INPUT).unwrap()
}

struct Models {
    detector: DetectorWeights,
    identity: GeneratorWeights,
    trained: GeneratorWeights,
}

fn models() -> &'static Models {
    static M: OnceLock<Models> = OnceLock::new();
    M.get_or_init(|| {
        let cfg = DetectorTrainConfig {
            epochs: 6,
            seed: 2,
            ..Default::default()
        };
        let detector = train_detector(&samples(100, 60), &cfg).unwrap();
        let identity = GeneratorWeights::initialize(GeneratorConfig::default(), INPUT, 1).unwrap();
        let trained =
            train_generator(&samples(12, 61), &detector, identity.clone(), &TrainConfig::default(), 1, |_| {})
                .unwrap();
        Models {
            detector,
            identity,
            trained,
        }
    })
}

#[test]
fn sweep_counts_are_bounded_and_monotone() {
    let m = models();
    let data = samples(12, 62);
    let truth: usize = data.iter().map(|s| s.boxes.len()).sum();
    let rows = threshold_sweep(&data, &m.detector, &m.trained, &SWEEP_ALPHAS, &EvalSettings::default()).unwrap();
    assert_eq!(rows.len(), SWEEP_ALPHAS.len());
    for r in &rows {
        assert_eq!(r.total_faces, truth);
        assert!(r.clean_detected <= truth && r.attacked_detected <= truth);
    }
    for w in rows.windows(2) {
        assert!(w[0].clean_detected >= w[1].clean_detected);
        assert!(w[0].attacked_detected >= w[1].attacked_detected);
    }
}

#[test]
fn identity_generator_leaves_counts_unchanged() {
    let m = models();
    let data = samples(8, 63);
    let settings = EvalSettings::default();
    let rows = threshold_sweep(&data, &m.detector, &m.identity, &[0.5, 0.7], &settings).unwrap();
    assert!(rows.iter().all(|r| r.clean_detected == r.attacked_detected));

    let curve = jpeg_defense_curve(&data, &m.detector, &m.identity, &default_qualities(), &settings).unwrap();
    let clean: usize = data
        .iter()
        .map(|s| {
            let pass = DetectorPass::run(&s.image, &m.detector, settings.proposal_cap);
            count_detected(&pass.detections(0.7, settings.nms_iou), &s.boxes)
        })
        .sum();
    let truth: usize = data.iter().map(|s| s.boxes.len()).sum();
    assert_eq!(curve.uncompressed_fraction, clean as f64 / truth as f64);
    assert_eq!(curve.points.len(), 10);
    assert!(curve.points.iter().all(|p| (0.0..=1.0).contains(&p.detected_fraction)));
}

#[test]
fn bad_arguments_are_rejected() {
    let m = models();
    let data = samples(2, 64);
    let settings = EvalSettings::default();
    assert!(threshold_sweep(&data, &m.detector, &m.trained, &[0.7, 0.5], &settings).is_err());
    assert!(threshold_sweep(&data, &m.detector, &m.trained, &[1.0], &settings).is_err());
    assert!(jpeg_defense_curve(&data, &m.detector, &m.trained, &[0], &settings).is_err());
    let crit = FoolingCriterion::default();
    let fgsm = [BenchAttack::Fgsm { epsilon: 0.05 }];
    assert!(runtime_benchmark(&fgsm, &data, 9, &m.detector, &crit).is_err());
    assert!(runtime_benchmark(&fgsm, &[], 10, &m.detector, &crit).is_err());
}

#[test]
fn benchmark_reports_one_row_per_attack() {
    let m = models();
    let data = samples(3, 65);
    let attacks = [
        BenchAttack::Generator(&m.trained),
        BenchAttack::Fgsm { epsilon: 0.05 },
        BenchAttack::Cw(CwConfig {
            steps: 2,
            ..Default::default()
        }),
    ];
    let rows = runtime_benchmark(&attacks, &data, 10, &m.detector, &FoolingCriterion::default()).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.attack_name.as_str()).collect();
    assert_eq!(names, ["generator", "fgsm", "cw"]);
    assert!(rows.iter().all(|r| r.seconds_per_1000 > 0.0));
}

#[test]
fn parallel_and_sequential_maps_agree() {
    let m = models();
    let data = samples(6, 66);
    let per_image = |s: &Sample| {
        let pass = DetectorPass::run(&s.image, &m.detector, 300);
        pass.scores.logits.clone()
    };
    assert_eq!(par::map(&data, per_image), par::map_seq(&data, per_image));
}

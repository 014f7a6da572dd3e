use advface::attacks::{
    algorithm1_inner, cw_attack, fgsm_attack, generator_attack, train_generator, CwConfig, FooledSet,
    FoolingCriterion, GeneratorTrainer, TrainConfig,
};
use advface::data::{synth_backgrounds, synth_faces, ImageTensor, Sample};
use advface::detector::{train_detector, AnchorConfig, DetectorPass, DetectorTrainConfig, DetectorWeights};
use advface::generator::{GeneratorConfig, GeneratorWeights};
use advface::instrument::Counters;
use advface::losses::misclassify_logit_grad;
use std::sync::OnceLock;

const INPUT: (usize, usize) = (64, 64);

fn samples(n: usize, seed: u64) -> Vec<Sample> {
    synth_faces(n, INPUT, seed).unwrap().preprocessed(INPUT).unwrap()
}

/// A small detector trained once and shared by the tests that need real
/// face scores.
fn trained() -> &'static DetectorWeights {
    static DET: OnceLock<DetectorWeights> = OnceLock::new();
    DET.get_or_init(|| {
        let cfg = DetectorTrainConfig {
            epochs: 8,
            seed: 1,
            ..Default::default()
        };
        train_detector(&samples(160, 40), &cfg).unwrap()
    })
}

fn generator(seed: u64) -> GeneratorWeights {
    GeneratorWeights::initialize(GeneratorConfig::default(), INPUT, seed).unwrap()
}

fn in_range(x: &ImageTensor) -> bool {
    x.values().iter().all(|v| (-1.0..=1.0).contains(v))
}

fn detected_face(det: &DetectorWeights) -> Sample {
    let crit = FoolingCriterion::default();
    samples(20, 41)
        .into_iter()
        .find(|s| !crit.is_fooled(&s.image, det))
        .expect("the trained detector finds a face in at least one image")
}

#[test]
fn zero_budget_leaves_the_generator_untouched() {
    let det = trained();
    let s = detected_face(det);
    let g = generator(2);
    let cfg = TrainConfig {
        max_iter: 0,
        ..Default::default()
    };
    let (updated, result) = algorithm1_inner(&s.image, det, &g, &cfg).unwrap();
    assert_eq!(updated.fingerprint(), g.fingerprint());
    assert_eq!(result.iterations_used, 0);
    assert_eq!(result.loss_trace.len(), 1);
}

#[test]
fn already_missed_image_exits_before_any_step() {
    let det = trained();
    let cfg = TrainConfig::default();
    let missed = synth_backgrounds(20, INPUT, 3)
        .unwrap()
        .preprocessed(INPUT)
        .unwrap()
        .into_iter()
        .find(|s| FooledSet::from_pass(&DetectorPass::run(&s.image, det, cfg.proposal_cap_train), cfg.train_alpha).is_empty())
        .expect("some background image has no face proposal above train_alpha");
    let g = generator(3);
    let (updated, result) = algorithm1_inner(&missed.image, det, &g, &cfg).unwrap();
    assert_eq!(result.iterations_used, 0);
    assert_eq!(updated.fingerprint(), g.fingerprint());
    assert!(result.delta.values().iter().all(|&d| d == 0.0));
}

#[test]
fn inner_loop_terminates_within_budget_and_keeps_the_detector_frozen() {
    let det = trained();
    let before = det.fingerprint();
    for max_iter in [1, 3, 6] {
        let cfg = TrainConfig {
            max_iter,
            threshold: 1e-9,
            ..Default::default()
        };
        for s in &samples(4, 42) {
            let (_, r) = algorithm1_inner(&s.image, det, &generator(4), &cfg).unwrap();
            assert!(r.iterations_used <= max_iter);
            assert!(r.loss_trace.len() <= max_iter + 1);
            assert_eq!(r.loss_trace.len(), r.iterations_used + 1);
            assert!(in_range(&r.x_prime));
        }
    }
    assert_eq!(det.fingerprint(), before);
}

#[test]
fn zero_epochs_returns_the_initial_generator() {
    let det = trained();
    let g = generator(5);
    let out = train_generator(&samples(3, 43), det, g.clone(), &TrainConfig::default(), 0, |_| {}).unwrap();
    assert_eq!(out.fingerprint(), g.fingerprint());
}

#[test]
fn equal_seeds_give_equal_loss_traces() {
    let det = trained();
    let data = samples(6, 44);
    let run = || {
        let mut trace = Vec::new();
        let mut t = GeneratorTrainer::new(generator(6), TrainConfig::default()).unwrap();
        for _ in 0..2 {
            t.run_epoch(&data, det, |r| trace.push((r.image_id, r.m, r.total.to_bits(), r.phi_size)))
                .unwrap();
        }
        (trace, t.into_weights().fingerprint())
    };
    assert_eq!(run(), run());
}

#[test]
fn generator_inference_is_a_single_forward_pass() {
    let det = trained();
    let data = samples(4, 45);
    let g = train_generator(&data, det, generator(7), &TrainConfig::default(), 1, |_| {}).unwrap();
    let crit = FoolingCriterion::default();
    for s in &data {
        let r = generator_attack(&s.image, &g, det, &crit).unwrap();
        assert_eq!(r.iterations_used, 0);
        assert!(r.loss_trace.is_empty());
        assert!(in_range(&r.x_prime));
    }
    let before = Counters::now();
    advface::attacks::craft_with_generator(&data[0].image, &g).unwrap();
    assert_eq!(Counters::now().since(before), Counters::default());
}

#[test]
fn fgsm_moves_each_pixel_by_epsilon_or_to_the_boundary() {
    let det = trained();
    let crit = FoolingCriterion::default();
    for s in &samples(3, 46) {
        let same = fgsm_attack(&s.image, det, 0.0, &crit).unwrap();
        assert_eq!(same.x_prime, s.image);
        for eps in [0.01, 0.2] {
            let r = fgsm_attack(&s.image, det, eps, &crit).unwrap();
            assert!(in_range(&r.x_prime));
            for (&a, &b) in s.image.values().iter().zip(r.x_prime.values()) {
                if a != b {
                    let step = ((b - a).abs() - eps).abs() < 1e-12;
                    assert!(step || b == 1.0 || b == -1.0, "{a} -> {b}");
                }
            }
        }
    }
}

#[test]
fn single_tiny_cw_step_stays_within_the_gradient_bound() {
    let det = trained();
    let crit = FoolingCriterion::default();
    let s = detected_face(det);
    let cfg = CwConfig {
        c: 0.5,
        steps: 1,
        step_size: 1e-6,
    };
    let r = cw_attack(&s.image, det, &cfg, &crit).unwrap();
    assert!(in_range(&r.x_prime));
    let pass = DetectorPass::run(&s.image, det, crit.proposal_cap);
    let rows: Vec<usize> = (0..pass.scores.rows()).collect();
    let grad = pass.input_gradient(&misclassify_logit_grad(&pass.scores, &rows, cfg.c));
    let bound = cfg.step_size * grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    assert!(r.l2().sqrt() <= bound * (1.0 + 1e-9), "{} > {bound}", r.l2().sqrt());
}

/// FGSM step size whose ‖δ‖₂ on `x` lands within 10% of `target`.
fn matched_fgsm_epsilon(x: &ImageTensor, det: &DetectorWeights, target: f64, crit: &FoolingCriterion) -> f64 {
    let norm = |eps: f64| fgsm_attack(x, det, eps, crit).unwrap().l2().sqrt();
    let (mut lo, mut hi) = (0.0, 0.5);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let n = norm(mid);
        if (n - target).abs() <= 0.1 * target {
            return mid;
        }
        if n < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    panic!("no epsilon matches norm {target}");
}

#[test]
fn cw_fools_at_least_as_often_as_fgsm_at_matched_perceptibility() {
    let det = trained();
    let crit = FoolingCriterion::default();
    let cfg = CwConfig {
        c: 0.5,
        steps: 20,
        step_size: 0.01,
    };
    let (mut cw_fooled, mut fgsm_fooled) = (0, 0);
    for s in &samples(10, 47) {
        let cw = cw_attack(&s.image, det, &cfg, &crit).unwrap();
        let target = cw.l2().sqrt();
        let fgsm = if target == 0.0 {
            fgsm_attack(&s.image, det, 0.0, &crit).unwrap()
        } else {
            let eps = matched_fgsm_epsilon(&s.image, det, target, &crit);
            let r = fgsm_attack(&s.image, det, eps, &crit).unwrap();
            assert!((r.l2().sqrt() - target).abs() <= 0.1 * target);
            r
        };
        cw_fooled += usize::from(cw.fooled);
        fgsm_fooled += usize::from(fgsm.fooled);
    }
    assert!(cw_fooled >= fgsm_fooled, "C-W {cw_fooled}/10, FGSM {fgsm_fooled}/10");
}

#[test]
fn every_attack_respects_the_pixel_range_on_an_untrained_detector() {
    let det = DetectorWeights::initialize(AnchorConfig::default(), INPUT, 9);
    let crit = FoolingCriterion::default();
    let x = ImageTensor::filled(64, 64, 0.98).unwrap();
    assert!(in_range(&fgsm_attack(&x, &det, 0.5, &crit).unwrap().x_prime));
    let cfg = CwConfig {
        c: 5.0,
        steps: 3,
        step_size: 0.5,
    };
    assert!(in_range(&cw_attack(&x, &det, &cfg, &crit).unwrap().x_prime));
}

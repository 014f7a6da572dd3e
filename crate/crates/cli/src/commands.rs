use crate::args::{
    BenchArgs, Cli, Command, DataArgs, EvalArgs, ExportFigArgs, SynthArgs, TrainAttackArgs,
    TrainDetectorArgs,
};
use crate::config::{attack_name, tags, RunConfig};
use advface::attacks::{generator_attack, FoolingCriterion, GeneratorTrainer, IterationRecord};
use advface::data::{export_folder, load_folder, synth_faces, Sample};
use advface::detector::{DetectorPass, DetectorTrainer, DetectorWeights};
use advface::evaluation::{
    check_order, export_figure, jpeg_defense_curve, runtime_benchmark, threshold_sweep, write_csv, BenchAttack,
    EvalReport,
};
use advface::generator::GeneratorWeights;
use advface::seeding::derive;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub const DETECTOR_FILE: &str = "detector.ckpt";
pub const DETECTOR_STATE_FILE: &str = "detector_state.ckpt";
pub const DETECTOR_LOG: &str = "detector_epochs.jsonl";
pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const ATTACK_LOG: &str = "attack_log.jsonl";
pub const ATTACK_EPOCH_LOG: &str = "attack_epochs.jsonl";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// λ at or below which the hinge term barely moves the perturbation.
const TINY_LAMBDA: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config or inputs; exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Anything that went wrong while running; exit code 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<advface::Error> for CliError {
    fn from(e: advface::Error) -> Self {
        use advface::Error as E;
        match e {
            E::InvalidArgument(_)
            | E::MissingDirectory(_)
            | E::NoImages(_)
            | E::Annotation { .. }
            | E::CanvasTooSmall { .. } => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Resolved config plus the output root every command writes under.
pub struct Context {
    pub config: RunConfig,
    pub output: PathBuf,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.output.join(name)
    }

    fn ensure_output(&self) -> Result<()> {
        std::fs::create_dir_all(&self.output)?;
        std::fs::write(self.path(RESOLVED_CONFIG), self.config.to_toml())?;
        Ok(())
    }
}

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Fold the config file and command-line flags into one validated config.
pub fn resolve(cli: &Cli) -> Result<Context> {
    let mut cfg = match &cli.global.config {
        Some(path) => RunConfig::load(path).map_err(validation)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.global.workers {
        cfg.workers = workers;
    }
    let set_data = |cfg: &mut RunConfig, d: &DataArgs| {
        if let Some(p) = &d.train_dir {
            cfg.data.train_dir = Some(p.clone());
        }
        if let Some(p) = &d.eval_dir {
            cfg.data.eval_dir = Some(p.clone());
        }
    };
    match &cli.command {
        Command::Synth(_) => {}
        Command::TrainDetector(a) => {
            set_data(&mut cfg, &a.data);
            if let Some(e) = a.epochs {
                cfg.detector.epochs = e;
            }
            if let Some(lr) = a.learning_rate {
                cfg.detector.learning_rate = lr;
            }
        }
        Command::TrainAttack(a) => {
            set_data(&mut cfg, &a.data);
            let at = &mut cfg.attack;
            if let Some(v) = a.lambda {
                at.lambda = v;
            }
            if let Some(v) = a.threshold {
                at.threshold = v;
            }
            if let Some(v) = a.max_iter {
                at.max_iter = v;
            }
            if let Some(v) = a.step_size {
                at.step_size = v;
            }
            if let Some(g) = a.guard {
                at.guard = g.into();
            }
            if let Some(v) = a.epochs {
                cfg.generator.epochs = v;
            }
            if let Some(v) = a.epsilon_max {
                cfg.generator.epsilon_max = v;
            }
        }
        Command::Eval(a) => {
            set_data(&mut cfg, &a.models.data);
            if let Some(s) = &a.sweep {
                cfg.eval.alphas = s.clone();
            }
            if let Some(q) = &a.jpeg {
                cfg.eval.jpeg_qualities = parse_qualities(q)?;
            }
            if let Some(f) = a.figures {
                cfg.eval.figures = f;
            }
        }
        Command::Bench(a) => {
            set_data(&mut cfg, &a.models.data);
            if let Some(list) = &a.attacks {
                cfg.bench.attacks = list.clone();
            }
            if let Some(n) = a.images {
                cfg.bench.images = n;
            }
        }
        Command::ExportFig(a) => {
            set_data(&mut cfg, &a.models.data);
            if let Some(m) = a.magnify {
                cfg.eval.magnify = m;
            }
        }
    }
    cfg.validate().map_err(validation)?;
    let output = cli
        .global
        .output
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    Ok(Context { config: cfg, output })
}

/// `10..100` (step 10), `10..100:5`, or a comma-separated list.
pub fn parse_qualities(text: &str) -> Result<Vec<u8>> {
    let bad = || validation(format!("cannot read JPEG qualities from {text:?}"));
    let parsed: Vec<u8> = if let Some((lo, rest)) = text.split_once("..") {
        let (hi, step) = match rest.split_once(':') {
            Some((hi, step)) => (hi, step.trim().parse::<u8>().map_err(|_| bad())?),
            None => (rest, 10),
        };
        let lo: u8 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u8 = hi.trim().parse().map_err(|_| bad())?;
        if step == 0 || lo > hi {
            return Err(bad());
        }
        (lo..=hi).step_by(step as usize).collect()
    } else {
        text.split(',')
            .map(|q| q.trim().parse::<u8>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if parsed.is_empty() || parsed.iter().any(|q| !(1..=100).contains(q)) {
        return Err(bad());
    }
    Ok(parsed)
}

/// Attack names from an order string such as `gen<fgsm<cw`.
pub fn parse_order(text: &str) -> Result<Vec<&'static str>> {
    let names: Vec<_> = text.split('<').map(attack_name).collect();
    if names.len() < 2 || names.iter().any(Option::is_none) {
        return Err(validation(format!(
            "cannot read attack order {text:?}; expected names joined by '<', e.g. gen<fgsm<cw"
        )));
    }
    Ok(names.into_iter().flatten().collect())
}

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = resolve(cli)?;
    advface::par::set_workers(ctx.config.workers);
    match &cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::TrainDetector(a) => train_detector(&ctx, a),
        Command::TrainAttack(a) => train_attack(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Bench(a) => bench(&ctx, a),
        Command::ExportFig(a) => export_fig(&ctx, a),
    }
}

fn synth(ctx: &Context, a: &SynthArgs) -> Result<()> {
    let set = synth_faces(a.n, ctx.config.input(), ctx.config.seed)?;
    let dir = a.dir.clone().unwrap_or_else(|| ctx.path("synth"));
    export_folder(&set, &dir)?;
    log::info!("wrote {} images with {} faces to {}", set.len(), set.total_boxes(), dir.display());
    Ok(())
}

fn load_dir(dir: &Path, input: (usize, usize)) -> Result<Vec<Sample>> {
    let report = load_folder(dir, None)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(report.set.preprocessed(input)?)
}

fn synthetic(cfg: &RunConfig, n: usize, tag: u64) -> Result<Vec<Sample>> {
    Ok(synth_faces(n, cfg.input(), derive(cfg.seed, &[tag]))?.preprocessed(cfg.input())?)
}

fn detector_data(cfg: &RunConfig) -> Result<Vec<Sample>> {
    match &cfg.data.train_dir {
        Some(dir) => load_dir(dir, cfg.input()),
        None => synthetic(cfg, cfg.data.synth_detector_images, tags::DETECTOR_DATA),
    }
}

fn generator_data(cfg: &RunConfig) -> Result<Vec<Sample>> {
    match &cfg.data.train_dir {
        Some(dir) => load_dir(dir, cfg.input()),
        None => synthetic(cfg, cfg.data.synth_generator_images, tags::GENERATOR_DATA),
    }
}

fn eval_data(cfg: &RunConfig) -> Result<Vec<Sample>> {
    match &cfg.data.eval_dir {
        Some(dir) => load_dir(dir, cfg.input()),
        None => synthetic(cfg, cfg.data.synth_eval_images, tags::EVAL_DATA),
    }
}

fn jsonl<T: serde::Serialize>(out: &mut impl Write, record: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")
}

fn train_detector(ctx: &Context, a: &TrainDetectorArgs) -> Result<()> {
    let cfg = &ctx.config;
    let data = detector_data(cfg)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = DetectorTrainer::load(path)?;
            t.set_epochs(cfg.detector.epochs);
            log::info!("resuming after {} epochs from {}", t.epochs_done(), path.display());
            t
        }
        None => DetectorTrainer::new(cfg.detector_config(), cfg.input())?,
    };
    ctx.ensure_output()?;
    let state_path = ctx.path(DETECTOR_STATE_FILE);
    let mut log_file = BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(a.resume.is_some())
            .write(true)
            .truncate(a.resume.is_none())
            .open(ctx.path(DETECTOR_LOG))?,
    );
    trainer.run(&data, |t, record| {
        jsonl(&mut log_file, record)?;
        log_file.flush()?;
        t.save(&state_path)
    })?;
    let weights = trainer.into_weights();
    let path = ctx.path(DETECTOR_FILE);
    weights.save(&path)?;
    log::info!("detector {} written to {}", weights.fingerprint(), path.display());
    Ok(())
}

fn load_detector(ctx: &Context, explicit: &Option<PathBuf>) -> Result<DetectorWeights> {
    let path = explicit.clone().unwrap_or_else(|| ctx.path(DETECTOR_FILE));
    if !path.exists() {
        return Err(validation(format!(
            "detector checkpoint {} not found; run train-detector first",
            path.display()
        )));
    }
    Ok(DetectorWeights::load(&path)?)
}

fn load_generator(ctx: &Context, explicit: &Option<PathBuf>) -> Result<GeneratorWeights> {
    let path = explicit.clone().unwrap_or_else(|| ctx.path(GENERATOR_FILE));
    if !path.exists() {
        return Err(validation(format!(
            "generator checkpoint {} not found; run train-attack first",
            path.display()
        )));
    }
    Ok(GeneratorWeights::load(&path)?)
}

fn train_attack(ctx: &Context, a: &TrainAttackArgs) -> Result<()> {
    let cfg = &ctx.config;
    if cfg.attack.lambda <= TINY_LAMBDA {
        log::warn!(
            "lambda {} is tiny: expect adversarial images almost identical to the originals and little fooling",
            cfg.attack.lambda
        );
    }
    let detector = load_detector(ctx, &a.detector)?;
    let data = generator_data(cfg)?;
    let g0 = GeneratorWeights::initialize(
        cfg.generator_config(),
        cfg.input(),
        derive(cfg.seed, &[tags::GENERATOR_INIT]),
    )?;
    ctx.ensure_output()?;
    let mut iter_log = BufWriter::new(File::create(ctx.path(ATTACK_LOG))?);
    let mut epoch_log = BufWriter::new(File::create(ctx.path(ATTACK_EPOCH_LOG))?);
    let mut trainer = GeneratorTrainer::new(g0, cfg.train_config())?;
    for _ in 0..cfg.generator.epochs {
        let mut write_err = None;
        let summary = trainer.run_epoch(&data, &detector, |r: &IterationRecord| {
            if write_err.is_none() {
                write_err = jsonl(&mut iter_log, r).err();
            }
        })?;
        if let Some(e) = write_err {
            return Err(e.into());
        }
        jsonl(&mut epoch_log, &summary)?;
    }
    iter_log.flush()?;
    epoch_log.flush()?;
    let generator = trainer.into_weights();
    let path = ctx.path(GENERATOR_FILE);
    generator.save(&path)?;
    log::info!("generator {} written to {}", generator.fingerprint(), path.display());
    Ok(())
}

fn check_input(cfg: &RunConfig, g: &GeneratorWeights) -> Result<()> {
    if g.resolution() != cfg.input() {
        return Err(validation(format!(
            "generator was trained at {:?} but data.height/width is {:?}",
            g.resolution(),
            cfg.input()
        )));
    }
    Ok(())
}

fn figure(
    path: &Path,
    sample: &Sample,
    detector: &DetectorWeights,
    generator: &GeneratorWeights,
    cfg: &RunConfig,
) -> Result<()> {
    let alpha = FoolingCriterion::default().alpha;
    let crit = FoolingCriterion {
        alpha,
        proposal_cap: cfg.attack.proposal_cap_test,
    };
    let result = generator_attack(&sample.image, generator, detector, &crit)?;
    let cap = cfg.attack.proposal_cap_test;
    let clean = DetectorPass::run(&sample.image, detector, cap).detections(alpha, cfg.eval.nms_iou);
    let attacked = DetectorPass::run(&result.x_prime, detector, cap).detections(alpha, cfg.eval.nms_iou);
    export_figure(&sample.image, &result.x_prime, &result.delta, &clean, &attacked, cfg.eval.magnify, path)?;
    Ok(())
}

fn eval(ctx: &Context, a: &EvalArgs) -> Result<()> {
    let cfg = &ctx.config;
    let detector = load_detector(ctx, &a.models.detector)?;
    let generator = load_generator(ctx, &a.models.generator)?;
    check_input(cfg, &generator)?;
    let data = eval_data(cfg)?;
    let settings = cfg.eval_settings();
    let sweep = threshold_sweep(&data, &detector, &generator, &cfg.eval.alphas, &settings)?;
    let defense = if cfg.eval.jpeg_qualities.is_empty() {
        None
    } else {
        Some(jpeg_defense_curve(&data, &detector, &generator, &cfg.eval.jpeg_qualities, &settings)?)
    };
    ctx.ensure_output()?;
    let dir = ctx.path("eval");
    std::fs::create_dir_all(&dir)?;
    write_csv(&dir.join("sweep.csv"), &sweep)?;
    if let Some(curve) = &defense {
        write_csv(&dir.join("defense.csv"), &curve.points)?;
    }
    for (i, sample) in data.iter().take(cfg.eval.figures).enumerate() {
        figure(&dir.join(format!("figure_{i:03}.png")), sample, &detector, &generator, cfg)?;
    }
    let report = EvalReport {
        detector_fingerprint: detector.fingerprint(),
        generator_fingerprint: generator.fingerprint(),
        images: data.len(),
        total_faces: data.iter().map(|s| s.boxes.len()).sum(),
        sweep,
        defense,
        runtime: None,
    };
    report.save(&dir.join("report.json"))?;
    for row in &report.sweep {
        log::info!(
            "alpha {}: clean {}/{} attacked {}/{}",
            row.alpha,
            row.clean_detected,
            row.total_faces,
            row.attacked_detected,
            row.total_faces
        );
    }
    Ok(())
}

fn bench(ctx: &Context, a: &BenchArgs) -> Result<()> {
    let cfg = &ctx.config;
    let order = a.assert_order.as_deref().map(parse_order).transpose()?;
    let names: Vec<&'static str> = cfg.bench.attacks.iter().filter_map(|n| attack_name(n)).collect();
    if let Some(order) = &order {
        if let Some(missing) = order.iter().find(|n| !names.contains(n)) {
            return Err(validation(format!("--assert-order names {missing}, which is not benchmarked")));
        }
    }
    let detector = load_detector(ctx, &a.models.detector)?;
    let generator = if names.contains(&"generator") {
        let g = load_generator(ctx, &a.models.generator)?;
        check_input(cfg, &g)?;
        Some(g)
    } else {
        None
    };
    let attacks: Vec<BenchAttack> = names
        .iter()
        .map(|&n| match n {
            "generator" => BenchAttack::Generator(generator.as_ref().expect("loaded above")),
            "fgsm" => BenchAttack::Fgsm {
                epsilon: cfg.bench.fgsm_epsilon,
            },
            _ => BenchAttack::Cw(cfg.cw_config()),
        })
        .collect();
    let data = eval_data(cfg)?;
    let crit = FoolingCriterion {
        proposal_cap: cfg.attack.proposal_cap_test,
        ..FoolingCriterion::default()
    };
    let rows = runtime_benchmark(&attacks, &data, cfg.bench.images, &detector, &crit)?;
    ctx.ensure_output()?;
    let dir = ctx.path("bench");
    std::fs::create_dir_all(&dir)?;
    write_csv(&dir.join("runtime.csv"), &rows)?;
    for r in &rows {
        log::info!("{}: {:.2} s per 1000 images ({})", r.attack_name, r.seconds_per_1000, r.hardware_note);
    }
    if let Some(order) = order {
        check_order(&rows, &order, cfg.bench.order_factor).map_err(|e| CliError::Runtime(e.to_string()))?;
        log::info!("order {} holds with factor {}", order.join(" < "), cfg.bench.order_factor);
    }
    Ok(())
}

fn export_fig(ctx: &Context, a: &ExportFigArgs) -> Result<()> {
    let cfg = &ctx.config;
    let detector = load_detector(ctx, &a.models.detector)?;
    let generator = load_generator(ctx, &a.models.generator)?;
    check_input(cfg, &generator)?;
    let data = eval_data(cfg)?;
    let sample = data.get(a.index).ok_or_else(|| {
        validation(format!("--index {} out of range for {} evaluation images", a.index, data.len()))
    })?;
    let path = match &a.file {
        Some(p) => p.clone(),
        None => {
            let dir = ctx.path("figures");
            std::fs::create_dir_all(&dir)?;
            dir.join(format!("figure_{:03}.png", a.index))
        }
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    figure(&path, sample, &detector, &generator, cfg)?;
    log::info!("figure written to {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quality_lists_and_ranges() {
        assert_eq!(parse_qualities("10..100").unwrap(), (1..=10).map(|q| q * 10).collect::<Vec<u8>>());
        assert_eq!(parse_qualities("20..40:10").unwrap(), vec![20, 30, 40]);
        assert_eq!(parse_qualities("90, 50").unwrap(), vec![90, 50]);
        assert!(parse_qualities("0..100").is_err());
        assert!(parse_qualities("abc").is_err());
        assert!(parse_qualities("50..10").is_err());
    }

    #[test]
    fn order_strings() {
        assert_eq!(parse_order("gen<fgsm<cw").unwrap(), vec!["generator", "fgsm", "cw"]);
        assert!(parse_order("gen").is_err());
        assert!(parse_order("gen<pgd").is_err());
    }

    #[test]
    fn core_errors_map_to_exit_codes() {
        let v: CliError = advface::Error::InvalidArgument("x".into()).into();
        assert_eq!(v.exit_code(), 1);
        let r: CliError = advface::Error::NonFiniteLogits.into();
        assert_eq!(r.exit_code(), 2);
    }
}

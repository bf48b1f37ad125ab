use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scd_core::data::{self, SyntheticSpec};
use scd_core::error::{Result, ScdError};
use scd_core::losses::{ConsistencyVariant, LossConfig};
use scd_core::model::{self, DecoderConfig, Fusion};
use scd_core::netpbm::{self, GrayImage};
use scd_core::precision::{self, InstabilityConfig, Precision, PrecisionMode, StabilityTrace};
use scd_core::train::{self, DataSource, ScheduleConfig, SgdConfig, TrainConfig};
use scd_core::{checkpoint, config, gradcheck};

#[derive(Parser, Debug)]
#[command(name = "scd", about = "Semantic change detection toolkit", args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic samples as PPM/PGM quadruples.
    GenData(GenData),
    /// Train the model and write curves, checkpoint and metrics.
    Train(Box<Train>),
    /// Score prediction label maps against ground truth.
    Eval(Eval),
    /// Run the finite-difference gradient suite.
    Gradcheck(Gradcheck),
    /// Run the near-margin consistency-loss stability experiment.
    SimulateInstability(Simulate),
    /// Write per-block gating weight maps as PGM.
    ExportHeatmaps(Heatmaps),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Index of the first sample in the seeded stream.
    #[arg(long, default_value_t = 0)]
    start: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0.3)]
    change_rate: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FusionArg {
    Cagm,
    Add,
}

#[derive(Args, Debug)]
struct Train {
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Directory with train/ and val/ sample folders; synthetic data is generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_peak: Option<f64>,
    #[arg(long)]
    lr_floor: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup_fraction: Option<f64>,
    #[arg(long)]
    poly_power: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    variant: Option<ConsistencyVariant>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    sc_weight: Option<f64>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    loss_scale: Option<f64>,
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    #[arg(long)]
    decoder_width: Option<usize>,
    /// Semantic classes, excluding no-change.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    train_pairs: Option<usize>,
    #[arg(long)]
    val_pairs: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    change_rate: Option<f64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct Eval {
    /// Prediction directory; filled from the checkpoint first when one is given.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Semantic classes, excluding no-change; inferred from the checkpoint when given.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Metric CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Gradcheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only run checks whose name contains this string.
    #[arg(long)]
    filter: Option<String>,
}

#[derive(Args, Debug)]
struct Simulate {
    #[arg(long, default_value = "traces")]
    out: PathBuf,
    #[arg(long, default_value_t = ConsistencyVariant::Sc)]
    variant: ConsistencyVariant,
    #[arg(long, default_value_t = Precision::Fp16Emulated)]
    precision: Precision,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long, default_value_t = 1024.0)]
    loss_scale: f64,
    /// Runs seeds 0..seeds.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr_peak: Option<f64>,
    #[arg(long)]
    lr_floor: Option<f64>,
}

#[derive(Args, Debug)]
struct Heatmaps {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sample directory holding `{id}_A.ppm` / `{id}_B.ppm`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Maximum number of samples to export.
    #[arg(long)]
    count: Option<usize>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn train_config(a: &Train) -> TrainConfig {
    let mut cfg = TrainConfig { seed: a.seed, out_dir: a.out.clone(), ..TrainConfig::default() };
    let s: &mut ScheduleConfig = &mut cfg.schedule;
    set(&mut s.lr_peak, a.lr_peak);
    set(&mut s.lr_floor, a.lr_floor);
    set(&mut s.warmup_fraction, a.warmup_fraction);
    set(&mut s.poly_power, a.poly_power);
    let o: &mut SgdConfig = &mut cfg.sgd;
    set(&mut o.momentum, a.momentum);
    set(&mut o.weight_decay, a.weight_decay);
    o.grad_clip = a.grad_clip.or(o.grad_clip);
    let l: &mut LossConfig = &mut cfg.loss;
    set(&mut l.variant, a.variant);
    set(&mut l.margin, a.margin);
    set(&mut l.tau, a.tau);
    set(&mut l.sc_weight, a.sc_weight);
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.precision, a.precision);
    set(&mut cfg.loss_scale, a.loss_scale);
    set(&mut cfg.threshold, a.threshold);
    let d: &mut DecoderConfig = &mut cfg.decoder;
    set(&mut d.decoder_width, a.decoder_width);
    set(&mut d.num_classes, a.classes.map(|k| k + 1));
    if let Some(f) = a.fusion {
        d.fusion = match f {
            FusionArg::Cagm => Fusion::Cagm,
            FusionArg::Add => Fusion::Add,
        };
    }
    cfg.data = match &a.data {
        Some(root) => {
            let (train, val) = data::split_dirs(root);
            DataSource::Dirs { train, val }
        }
        None => {
            let DataSource::Synthetic { mut spec, mut train_pairs, mut val_pairs } = DataSource::default() else {
                unreachable!("synthetic default")
            };
            spec.classes = cfg.decoder.num_classes - 1;
            set(&mut spec.size, a.size);
            set(&mut spec.change_rate, a.change_rate);
            set(&mut spec.seed, a.data_seed);
            set(&mut train_pairs, a.train_pairs);
            set(&mut val_pairs, a.val_pairs);
            DataSource::Synthetic { spec, train_pairs, val_pairs }
        }
    };
    cfg
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ScdError::io(dir, e))
}

fn gen_data(a: &GenData) -> Result<()> {
    create_dir(&a.out)?;
    let spec = SyntheticSpec { size: a.size, classes: a.classes, change_rate: a.change_rate, seed: a.seed };
    for i in a.start..a.start + a.count as u64 {
        let s = data::gen_synthetic_pair(data::sample_seed(spec.seed, i), spec.size, spec.size, spec.classes, spec.change_rate)?;
        data::write_sample(&a.out, &data::sample_id(i as usize), &s)?;
    }
    println!("wrote {} samples to {}", a.count, a.out.display());
    Ok(())
}

fn run_train(a: &Train) -> Result<()> {
    let cfg = train_config(a);
    let out = train::train_with(&cfg, |s| {
        println!(
            "epoch {:3}  loss {:.4}  val F_scd {:.4}  mIoU {:.4}  OA {:.4}  Sek {:.4}{}",
            s.epoch,
            s.mean_loss,
            s.val.f_scd,
            s.val.miou,
            s.val.oa,
            s.val.sek,
            if s.skipped_steps > 0 { format!("  skipped {}", s.skipped_steps) } else { String::new() }
        );
    })?;
    println!("best val F_scd {:.4}  mIoU {:.4}  OA {:.4}  Sek {:.4}", out.best.f_scd, out.best.miou, out.best.oa, out.best.sek);
    println!("checkpoint {}\ncurves {}", out.checkpoint.display(), out.curves.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(model::Params, DecoderConfig)> {
    let params = checkpoint::load(path)?;
    let cfg = DecoderConfig::infer(&params)?;
    Ok((params, cfg))
}

fn eval(a: &Eval) -> Result<()> {
    let classes = match &a.checkpoint {
        Some(ck) => {
            let (params, cfg) = load_model(ck)?;
            create_dir(&a.pred)?;
            for id in data::list_ids(&a.gt)? {
                let s = data::read_sample(&a.gt, &id)?;
                let pred = model::predict(&params, &cfg, &s.image_a, &s.image_b)?;
                let (pa, pb, _) = model::predict_scd_map(&pred, a.threshold);
                data::write_labels(&a.pred, &id, &pa, &pb, s.height(), s.width())?;
            }
            cfg.num_classes - 1
        }
        None => a.classes.ok_or_else(|| ScdError::Param("--classes is required without --checkpoint".into()))?,
    };
    let report = data::evaluate(&a.pred, &a.gt, classes)?;
    println!("{}", scd_core::metrics::MetricReport::CSV_HEADER);
    println!("{}", report.csv_row());
    if let Some(out) = &a.out {
        data::write_report(&report, out)?;
    }
    Ok(())
}

fn run_gradcheck(a: &Gradcheck) -> Result<()> {
    let results = gradcheck::run_suite(a.seed, a.filter.as_deref())?;
    let mut failed = 0;
    for r in &results {
        println!("{:<20} max rel err {:.3e}  {:>6.2}s  {}", r.name, r.max_rel_error, r.seconds, if r.passed() { "ok" } else { "FAIL" });
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(ScdError::Numerical(format!("{failed} of {} checks at or above {:e}", results.len(), gradcheck::TOLERANCE)));
    }
    println!("all {} checks below {:e}", results.len(), gradcheck::TOLERANCE);
    Ok(())
}

fn simulate(a: &Simulate) -> Result<()> {
    create_dir(&a.out)?;
    let mut base = InstabilityConfig {
        variant: a.variant,
        mode: PrecisionMode { precision: a.precision, loss_scale: a.loss_scale, grad_clip: a.grad_clip },
        ..InstabilityConfig::default()
    };
    set(&mut base.steps, a.steps);
    set(&mut base.pairs, a.pairs);
    set(&mut base.dim, a.dim);
    set(&mut base.margin, a.margin);
    set(&mut base.tau, a.tau);
    set(&mut base.lr_peak, a.lr_peak);
    set(&mut base.lr_floor, a.lr_floor);
    let mut unstable = 0;
    for seed in 0..a.seeds {
        let cfg = InstabilityConfig { seed, ..base.clone() };
        let trace = precision::run_instability_experiment(&cfg)?;
        let path = a.out.join(StabilityTrace::file_name(cfg.variant, cfg.mode.precision, seed));
        trace.write_csv(&path)?;
        let event = trace.first_event_step.map_or("-".to_string(), |s| s.to_string());
        println!("seed {seed}: unstable {}  first event {event}", trace.unstable);
        unstable += u64::from(trace.unstable);
    }
    println!("{unstable}/{} seeds unstable", a.seeds);
    Ok(())
}

fn export_heatmaps(a: &Heatmaps) -> Result<()> {
    let (params, cfg) = load_model(&a.checkpoint)?;
    if cfg.fusion != Fusion::Cagm {
        return Err(ScdError::Param("checkpoint has no gating module".into()));
    }
    create_dir(&a.out)?;
    let mut ids = data::list_ids(&a.data)?;
    if ids.is_empty() {
        return Err(ScdError::Data(format!("no samples in {}", a.data.display())));
    }
    ids.truncate(a.count.unwrap_or(ids.len()));
    let mut written = 0;
    for id in &ids {
        let s = data::read_sample(&a.data, id)?;
        let pred = model::predict(&params, &cfg, &s.image_a, &s.image_b)?;
        for (k, (wz, wh)) in pred.heatmaps.iter().enumerate() {
            for (tag, w) in [("Wz", wz), ("Wh", wh)] {
                let bytes = w.data().iter().map(|&v| model::heatmap_byte(v)).collect();
                let img = GrayImage::new(w.w(), w.h(), bytes)?;
                netpbm::write_pgm(&img, &a.out.join(format!("{id}_blk{}_{tag}.pgm", k + 1)))?;
                written += 1;
            }
        }
    }
    println!("wrote {written} heatmaps for {} samples to {}", ids.len(), a.out.display());
    Ok(())
}

/// Splices `--config <file>` entries in right after the subcommand so that
/// flags given on the command line, which come later, take precedence.
fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let Some(pos) = args.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args);
    };
    let mut args = args;
    let path = if let Some(p) = args[pos].strip_prefix("--config=") {
        let p = p.to_string();
        args.remove(pos);
        p
    } else {
        if pos + 1 >= args.len() {
            return Err(ScdError::Param("--config needs a path".into()));
        }
        args.remove(pos);
        args.remove(pos)
    };
    let flags = config::to_flags(&config::load_config(Path::new(&path))?);
    let at = args.len().min(2);
    args.splice(at..at, flags);
    Ok(args)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::SimulateInstability(a) => simulate(a),
        Command::ExportHeatmaps(a) => export_heatmaps(a),
    }
}

fn main() -> ExitCode {
    let args = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

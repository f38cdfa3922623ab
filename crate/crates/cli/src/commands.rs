//! Command implementations behind the `duogan` binary.
//!
//! Every function here returns `CliError` instead of exiting so the whole
//! surface stays callable from tests; `main` maps the error to its exit
//! code. All randomness is seeded, so each command is a pure function of
//! its arguments and input files.

use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use duogan_core::condition::ConditionSchema;
use duogan_core::diagnostics::{
    condition_adherence, diversity_score, load_oracle, near_duplicate_rate, save_oracle,
    train_eval_classifier, DiagnosticsError, DiagnosticsReport, DUPLICATE_THRESHOLD,
    ORACLE_ACCURACY_FLOOR,
};
use duogan_core::idx::{read_images, read_labels};
use duogan_core::training::{
    analyze_telemetry, dataset_rng, load_checkpoint, parse_telemetry, save_checkpoint,
    telemetry_line, TrainError, TELEMETRY_HEADER,
};
use duogan_core::{Checkpoint, ConditionVector, PairedDataset, StepTelemetry, Trainer};
use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::lock::DirLock;
use crate::pgm::export_grid;
use crate::sampling::{distinct_pair_conditions, generate_samples};

/// RNG stream for the fixed preview grid. The trainer reserves streams
/// 1..=4 and 0x100 upward; plain `seed_from_u64` (used for sampling noise)
/// is stream 0.
const STREAM_PREVIEW: u64 = 5;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Oracle-floor violations keep their dedicated exit code; everything else
/// a diagnostics call can report is a misuse of inputs.
fn diag_err(e: DiagnosticsError) -> CliError {
    match e {
        DiagnosticsError::OracleBelowFloor { .. } => CliError::OracleFloor(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

fn load_schema(config: &RunConfig) -> Result<ConditionSchema, CliError> {
    match &config.schema {
        Some(path) => ConditionSchema::from_file(path).map_err(config_err),
        None => Ok(ConditionSchema::digits()),
    }
}

pub fn cmd_train(config_path: &Path, dry_run: bool, resume: Option<&Path>) -> Result<(), CliError> {
    let config = RunConfig::from_file(config_path).map_err(config_err)?;
    config.check_inputs().map_err(config_err)?;
    let schema = load_schema(&config)?;
    let num_classes = schema.num_classes();
    let dataset =
        PairedDataset::from_files(&config.data_images, &config.data_labels, schema)
            .map_err(config_err)?;

    let mut trainer = match resume {
        None => Trainer::new(config.train.clone(), num_classes).map_err(config_err)?,
        Some(path) => {
            let ckpt = load_checkpoint(path).map_err(config_err)?;
            Trainer::resume(config.train.clone(), num_classes, &ckpt).map_err(config_err)?
        }
    };

    let n_samples = config.n_samples.unwrap_or_else(|| dataset.exemplar_count());
    let needed = config.train.batch_size * config.train.d_steps_per_g_step;
    let steps_per_epoch = trainer.steps_per_epoch(n_samples);
    if steps_per_epoch == 0 {
        return Err(CliError::Config(format!(
            "n_samples = {n_samples} is not enough for one step of \
             batch_size * d_steps_per_g_step = {needed} samples"
        )));
    }
    let total = trainer.total_steps(n_samples);

    if dry_run {
        // One real step over a minimal composed set proves the whole
        // pipeline without touching the filesystem.
        let samples = dataset.compose(needed, &mut dataset_rng(config.train.seed));
        let t = run_step(&mut trainer, &samples, &None)?;
        println!(
            "config ok: {num_classes} classes, {n_samples} composed samples, \
             {steps_per_epoch} steps/epoch, {total} steps total"
        );
        if let Some(t) = t {
            println!(
                "one step ran: d_loss {:.4} g_loss {:.4} alpha {:.3} beta {:.3}",
                t.d_loss, t.g_loss, t.mean_alpha, t.mean_beta
            );
        }
        println!("dry run complete; nothing was written");
        return Ok(());
    }

    std::fs::create_dir_all(&config.out_dir).map_err(runtime_err)?;
    let _lock = DirLock::acquire(&config.out_dir)?;

    let samples = dataset.compose(n_samples, &mut dataset_rng(config.train.seed));
    let telemetry_path = config.out_dir.join("telemetry.txt");
    // A resumed run appends to the interrupted run's log; a fresh run
    // starts one.
    let mut telemetry = if resume.is_some() && telemetry_path.exists() {
        OpenOptions::new()
            .append(true)
            .open(&telemetry_path)
            .map_err(runtime_err)?
    } else {
        let mut f = File::create(&telemetry_path).map_err(runtime_err)?;
        writeln!(f, "{TELEMETRY_HEADER}").map_err(runtime_err)?;
        f
    };

    // The preview grid uses one fixed set of conditions and noise for the
    // whole run so successive grids are directly comparable.
    let mut preview_rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    preview_rng.set_stream(STREAM_PREVIEW);
    let preview = distinct_pair_conditions(
        num_classes,
        config.grid_rows * config.grid_cols,
        &mut preview_rng,
    );

    let mut last_checkpoint: Option<PathBuf> = None;
    loop {
        let Some(t) = run_step(&mut trainer, &samples, &last_checkpoint)? else {
            break;
        };
        writeln!(telemetry, "{}", telemetry_line(&t)).map_err(runtime_err)?;

        let s = trainer.step();
        let epoch_end = s % steps_per_epoch == 0;
        let checkpoint_due = match config.checkpoint_interval {
            0 => epoch_end,
            interval => s % interval == 0,
        };
        if checkpoint_due || s == total {
            let path = config.out_dir.join(format!("checkpoint-{s:06}.ckpt"));
            save_checkpoint(&trainer.checkpoint(), &path).map_err(runtime_err)?;
            last_checkpoint = Some(path);
        }
        if epoch_end || s == total {
            let images = generate_samples(&mut trainer.generator, &preview, config.train.seed);
            let grid = config.out_dir.join(format!("samples-{s:06}.pgm"));
            export_grid(&images, config.grid_rows, config.grid_cols, &grid)
                .map_err(runtime_err)?;
            println!(
                "step {s}/{total} (epoch {}/{}): d_loss {:.4} g_loss {:.4} \
                 alpha {:.3} beta {:.3}",
                s.div_ceil(steps_per_epoch),
                config.train.epochs,
                t.d_loss,
                t.g_loss,
                t.mean_alpha,
                t.mean_beta
            );
        }
    }

    println!(
        "done: {} steps; max identity gap {:.3e}; outputs in {}",
        trainer.step(),
        trainer.max_identity_gap(),
        config.out_dir.display()
    );
    Ok(())
}

/// One training step, translating a non-finite abort into the dedicated
/// exit path that names the last usable checkpoint.
fn run_step(
    trainer: &mut Trainer,
    samples: &[duogan_core::ComposedSample],
    last_checkpoint: &Option<PathBuf>,
) -> Result<Option<StepTelemetry>, CliError> {
    match trainer.step_once(samples) {
        Ok(t) => Ok(t),
        Err(TrainError::NonFinite { quantity, step }) => {
            let tail = match last_checkpoint {
                Some(p) => format!("last checkpoint: {}", p.display()),
                None => "no checkpoint was written".to_string(),
            };
            Err(CliError::NanAbort {
                message: format!("non-finite {quantity} at step {step}; {tail}"),
                checkpoint: last_checkpoint.clone(),
            })
        }
        Err(e) => Err(CliError::Runtime(e.to_string())),
    }
}

#[derive(Debug, Clone)]
pub struct GenerateArgs {
    pub checkpoint: PathBuf,
    pub classes: String,
    pub count: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub schema: Option<PathBuf>,
}

/// Multi-hot condition from a comma-separated class list. Named classes
/// need a schema; bare indices always work.
fn resolve_condition(
    classes: &str,
    schema: Option<&ConditionSchema>,
    num_classes: usize,
) -> Result<ConditionVector, CliError> {
    let mut bits = vec![0u8; num_classes];
    for token in classes.split(',') {
        let token = token.trim();
        if token.is_empty() {
            return Err(CliError::Config(format!(
                "empty class in --classes {classes:?}"
            )));
        }
        let index = match schema {
            Some(s) => s.resolve(token).map_err(config_err)?,
            None => token
                .parse::<usize>()
                .ok()
                .filter(|&i| i < num_classes)
                .ok_or_else(|| {
                    CliError::Config(format!(
                        "unknown class `{token}`: the checkpoint has {num_classes} unnamed \
                         classes; pass an index below {num_classes} or a --schema file"
                    ))
                })?,
        };
        bits[index] = 1;
    }
    ConditionVector::from_bits(bits).map_err(config_err)
}

/// Near-square layout: enough columns for `count` tiles, rows to match.
fn grid_layout(count: usize) -> (usize, usize) {
    let cols = (count as f64).sqrt().ceil() as usize;
    (count.div_ceil(cols), cols)
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    if args.count == 0 {
        return Err(CliError::Config("--count must be at least 1".into()));
    }
    let ckpt = load_checkpoint(&args.checkpoint).map_err(config_err)?;
    let mut trainer = Trainer::from_checkpoint(&ckpt).map_err(config_err)?;
    let num_classes = trainer.num_classes();

    let schema = match &args.schema {
        Some(path) => {
            let s = ConditionSchema::from_file(path).map_err(config_err)?;
            if s.num_classes() != num_classes {
                return Err(CliError::Config(format!(
                    "schema {} has {} classes but the checkpoint was trained with {}",
                    path.display(),
                    s.num_classes(),
                    num_classes
                )));
            }
            Some(s)
        }
        None if num_classes == 10 => Some(ConditionSchema::digits()),
        None => None,
    };

    let condition = resolve_condition(&args.classes, schema.as_ref(), num_classes)?;
    if condition.popcount() != 2 {
        eprintln!(
            "warning: condition selects {} classes; training always pairs exactly 2, \
             so these samples are off the training distribution",
            condition.popcount()
        );
    }

    let conditions = vec![condition; args.count];
    let images = generate_samples(&mut trainer.generator, &conditions, args.seed);

    std::fs::create_dir_all(&args.out).map_err(runtime_err)?;
    let _lock = DirLock::acquire(&args.out)?;
    for i in 0..args.count {
        let tile = images.slice(s![i..i + 1, .., .., ..]).to_owned();
        let path = args.out.join(format!("sample-{i:03}.pgm"));
        export_grid(&tile, 1, 1, &path).map_err(runtime_err)?;
    }
    let (rows, cols) = grid_layout(args.count);
    export_grid(&images, rows, cols, &args.out.join("grid.pgm")).map_err(runtime_err)?;
    println!(
        "wrote {} samples and grid.pgm ({rows}x{cols}) to {}",
        args.count,
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub oracle: PathBuf,
    pub n: usize,
    pub out: PathBuf,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    if args.n < 2 {
        return Err(CliError::Config(format!(
            "--n must be at least 2 to measure pairwise statistics, got {}",
            args.n
        )));
    }
    let ckpt = load_checkpoint(&args.checkpoint).map_err(config_err)?;
    let mut trainer = Trainer::from_checkpoint(&ckpt).map_err(config_err)?;
    let mut oracle = load_oracle(&args.oracle).map_err(diag_err)?;

    // Evaluation is fixed-seed by design: two invocations on the same
    // checkpoint and oracle must agree to the byte.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let conditions = distinct_pair_conditions(trainer.num_classes(), args.n, &mut rng);
    let images = generate_samples(&mut trainer.generator, &conditions, 0);

    let report = DiagnosticsReport {
        n_samples: args.n,
        diversity: diversity_score(&images).map_err(diag_err)?,
        duplicate_rate: near_duplicate_rate(&images, DUPLICATE_THRESHOLD).map_err(diag_err)?,
        adherence: condition_adherence(&images, &conditions, &mut oracle).map_err(diag_err)?,
    };

    std::fs::create_dir_all(&args.out).map_err(runtime_err)?;
    let _lock = DirLock::acquire(&args.out)?;
    std::fs::write(args.out.join("report.txt"), report.text()).map_err(runtime_err)?;
    std::fs::write(args.out.join("report.kv"), report.key_values()).map_err(runtime_err)?;
    print!("{}", report.text());
    Ok(())
}

#[derive(Debug, Clone)]
pub struct OracleArgs {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn cmd_oracle(args: &OracleArgs) -> Result<(), CliError> {
    let images = read_images(&args.images).map_err(config_err)?;
    let labels = read_labels(&args.labels).map_err(config_err)?;
    let mut oracle = train_eval_classifier(&images, &labels, args.seed).map_err(diag_err)?;
    save_oracle(&mut oracle, &args.out).map_err(runtime_err)?;
    println!(
        "oracle held-out accuracy {:.4} (floor {ORACLE_ACCURACY_FLOOR}); wrote {}",
        oracle.val_accuracy(),
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone)]
pub struct InspectArgs {
    pub telemetry: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub steps_per_epoch: Option<usize>,
    pub spike_multiple: f32,
}

pub fn telemetry_report(
    records: &[StepTelemetry],
    steps_per_epoch: usize,
    spike_multiple: f32,
) -> String {
    let summary = analyze_telemetry(records, steps_per_epoch, spike_multiple);
    let mut out = format!(
        "{} steps, {} epochs\n",
        records.len(),
        summary.epochs.len()
    );
    for e in &summary.epochs {
        out += &format!(
            "epoch {:>3}  alpha {:+.4}/{:+.4}/{:+.4}  beta {:+.4}/{:+.4}/{:+.4}\n",
            e.epoch, e.alpha.min, e.alpha.mean, e.alpha.max, e.beta.min, e.beta.mean, e.beta.max
        );
    }
    if summary.flagged_steps.is_empty() {
        out += "attention spikes: none\n";
    } else {
        let list = summary
            .flagged_steps
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(", ");
        out += &format!("attention spikes at steps: {list}\n");
    }
    out
}

pub fn checkpoint_report(ckpt: &Checkpoint) -> String {
    let c = &ckpt.config;
    let values: usize = ckpt.tensors.iter().map(|t| t.data.len()).sum();
    format!(
        "step                {}\n\
         num_classes         {}\n\
         adam steps          d {} / g {}\n\
         max identity gap    {:.3e}\n\
         tensors             {} ({values} values)\n\
         lr                  d {} / g {}\n\
         betas               {} / {}\n\
         batch_size          {}\n\
         epochs              {}\n\
         noise_dim           {}\n\
         seed                {}\n\
         d2_enabled          {}\n\
         d_steps_per_g_step  {}\n\
         generator_loss      {}\n",
        ckpt.step,
        ckpt.num_classes,
        ckpt.adam_d_t,
        ckpt.adam_g_t,
        ckpt.max_identity_gap,
        ckpt.tensors.len(),
        c.lr_d,
        c.lr_g,
        c.beta1,
        c.beta2,
        c.batch_size,
        c.epochs,
        c.noise_dim,
        c.seed,
        c.d2_enabled,
        c.d_steps_per_g_step,
        c.generator_loss,
    )
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<(), CliError> {
    if args.telemetry.is_none() && args.checkpoint.is_none() {
        return Err(CliError::Config(
            "nothing to inspect; pass --telemetry and/or --checkpoint".into(),
        ));
    }
    if !(args.spike_multiple > 0.0 && args.spike_multiple.is_finite()) {
        return Err(CliError::Config(format!(
            "--spike-multiple must be positive, got {}",
            args.spike_multiple
        )));
    }
    if args.steps_per_epoch == Some(0) {
        return Err(CliError::Config("--steps-per-epoch must be at least 1".into()));
    }
    if let Some(path) = &args.telemetry {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read telemetry {}: {e}", path.display()))
        })?;
        let records = parse_telemetry(&text).map_err(config_err)?;
        // Without an explicit epoch length the whole log is one epoch.
        let spe = args.steps_per_epoch.unwrap_or_else(|| records.len().max(1));
        println!("telemetry {}:", path.display());
        print!("{}", telemetry_report(&records, spe, args.spike_multiple));
    }
    if let Some(path) = &args.checkpoint {
        let ckpt = load_checkpoint(path).map_err(config_err)?;
        println!("checkpoint {}:", path.display());
        print!("{}", checkpoint_report(&ckpt));
    }
    Ok(())
}

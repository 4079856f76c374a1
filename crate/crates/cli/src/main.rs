//! `dsclap` command-line runner: synthetic data generation, pretraining,
//! fine-tuning, evaluation and data-size sweeps.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or file
//! format error, 4 numerical failure.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use dsclap::data::{
    asr_transcripts, measure_cer, read_dataset, write_dataset, CerReport, PairedSample, SynthSpec, Task,
};
use dsclap::encoders::EncoderConfig;
use dsclap::training::{
    data_size_sweep, evaluate, finetune, load_checkpoint, load_classifier, pretrain, save_checkpoint, save_classifier,
    write_loss_log, Checkpoint, FreezeMask, Metrics, TrainConfig,
};
use dsclap::Exec;

use config::{parse_freeze, RunConfig, TrainOverrides};

const SEED_ENV: &str = "DSCLAP_SEED";
const LATENT_DIM: usize = 8;

#[derive(Parser)]
#[command(name = "dsclap", version, about = "Contrastive language-audio pretraining and fine-tuning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate paired clean ("manual") and ASR-corrupted datasets.
    Gen(GenArgs),
    /// Pretrain the dual encoders on paired data.
    Pretrain(PretrainArgs),
    /// Fine-tune a classifier per seed and report test metrics.
    Finetune(FinetuneArgs),
    /// Evaluate saved classifiers on labeled data.
    Eval(EvalArgs),
    /// Fine-tune on growing prefixes of the training set.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Supplies `cer`, `seeds` (first entry) and `out`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 15)]
    classes: usize,
    /// Target character error rate of the ASR variant [default: 0.187].
    #[arg(long)]
    cer: Option<f64>,
    /// Defaults to $DSCLAP_SEED, then the config, then 1.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; receives manual.ds and asr.ds.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Attach labels for this task (mdsd or mcic).
    #[arg(long)]
    task: Option<Task>,
    /// Use the downstream command-utterance generator settings.
    #[arg(long)]
    downstream: bool,
}

/// Training-schedule flags; each overrides the matching config key.
#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Comma-separated seeds.
    #[arg(long, value_parser = seeds_arg)]
    seeds: Option<CommaList<u64>>,
    /// Run per-sample work on all cores; results are identical either way.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; receives checkpoint.dsck and loss_log.tsv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TaskFlags {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    /// Encoders kept fixed: none, audio, text or both.
    #[arg(long, value_parser = parse_freeze)]
    freeze: Option<FreezeMask>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    task: TaskFlags,
    /// Directory for per-seed classifiers and metrics.tsv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long = "classifier", required = true)]
    classifiers: Vec<PathBuf>,
    #[arg(long)]
    test_data: PathBuf,
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    task: TaskFlags,
    /// Comma-separated, strictly ascending training-set sizes.
    #[arg(long, value_parser = sizes_arg)]
    sizes: Option<CommaList<usize>>,
    /// Directory for sweep.tsv.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// One flag value holding a comma-separated list.
#[derive(Clone, Debug)]
struct CommaList<T>(Vec<T>);

fn seeds_arg(s: &str) -> Result<CommaList<u64>, String> {
    config::list("seeds", s).map(CommaList)
}

fn sizes_arg(s: &str) -> Result<CommaList<usize>, String> {
    config::list("sizes", s).map(CommaList)
}

/// A bad invocation detected after argument parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Input data that does not fit the requested run.
#[derive(Debug)]
struct DataError(String);

impl std::fmt::Display for DataError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use dsclap::Error as E;
    for cause in e.chain() {
        if cause.is::<UsageError>() || cause.is::<config::ConfigError>() {
            return 2;
        }
        if cause.is::<std::io::Error>() || cause.is::<DataError>() {
            return 3;
        }
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::NonFiniteGradient(_) | E::NonFiniteLoss { .. } | E::NonFiniteValue(_) | E::DegenerateProjection => 4,
                E::Io { .. }
                | E::Malformed { .. }
                | E::SplitMismatch { .. }
                | E::LabelOutOfRange { .. }
                | E::IncompatibleCheckpoint(_)
                | E::EmptyDataset
                | E::EmptyTestSet
                | E::SizeExceedsData { .. }
                | E::TokenOutOfVocabulary { .. }
                | E::AudioTooShort { .. }
                | E::InvalidWaveform(_)
                | E::InvalidTokens(_)
                | E::ShapeMismatch(_)
                | E::EmptyInput => 3,
                E::BatchTooSmall(_)
                | E::NotEnoughNegatives { .. }
                | E::InconsistentNegatives(_)
                | E::NegativeWeight(_)
                | E::InvalidParameter(_)
                | E::UndefinedCer => 2,
            };
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// Config file, then $DSCLAP_SEED, then flags.
fn resolve(flags: &TrainFlags, base: TrainConfig) -> anyhow::Result<(RunConfig, TrainConfig, Exec)> {
    let file = match &flags.config {
        Some(path) => {
            require_file(path, "config")?;
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    let mut overrides = file.train.clone();
    if let Some(seed) = env_seed()? {
        overrides.seeds = Some(vec![seed]);
    }
    overrides.merge(TrainOverrides {
        epochs: flags.epochs,
        learning_rate: flags.learning_rate,
        batch_size: flags.batch_size,
        seeds: flags.seeds.clone().map(|l| l.0),
        ..Default::default()
    });
    let train = overrides.apply(base);
    train.validate().map_err(|e| usage(e.to_string()))?;
    let exec = if flags.parallel || file.parallel == Some(true) {
        Exec::Parallel
    } else {
        Exec::Sequential
    };
    Ok((file, train, exec))
}

fn pick(flag: &Option<PathBuf>, file: &Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    flag.clone()
        .or_else(|| file.clone())
        .ok_or_else(|| usage(format!("missing {what} (flag or config key)")))
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} file {} does not exist", path.display())));
    }
    Ok(())
}

/// Creates the directory and confirms it accepts files.
fn prepare_out_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let probe = dir.join(".dsclap-write-probe");
    std::fs::write(&probe, b"").with_context(|| format!("output directory {} is not writable", dir.display()))?;
    std::fs::remove_file(&probe).with_context(|| format!("cannot clean up {}", probe.display()))?;
    Ok(())
}

fn cmd_gen(a: GenArgs) -> anyhow::Result<()> {
    let file = match &a.config {
        Some(path) => {
            require_file(path, "config")?;
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    let cer = a.cer.or(file.cer).unwrap_or(0.187);
    if !(0.0..=1.0).contains(&cer) {
        return Err(usage(format!("cer must lie in [0, 1], got {cer}")));
    }
    if a.n == 0 {
        return Err(usage("--n must be positive"));
    }
    let config_seed = file.train.seeds.as_ref().map(|s| s[0]);
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.or(config_seed).unwrap_or(1),
    };
    let out = pick(&a.out, &file.out, "--out")?;
    let mut spec = SynthSpec::new(a.classes, LATENT_DIM);
    if a.downstream {
        spec = spec.downstream();
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    prepare_out_dir(&out)?;
    let clean = spec.generate(seed, a.n, a.task)?;
    let asr = asr_transcripts(&clean, cer, spec.vocab_size, dsclap::seed::mix(seed, 0xA5))?;
    let report = CerReport::corpus(
        clean
            .iter()
            .zip(&asr)
            .map(|(c, n)| measure_cer(&c.text, &n.text))
            .collect::<Result<Vec<_>, _>>()?,
    )?;
    write_dataset(out.join("manual.ds"), &clean)?;
    write_dataset(out.join("asr.ds"), &asr)?;
    println!(
        "wrote {} pairs to {}: corpus CER {:.4} over {} tokens",
        a.n,
        out.display(),
        report.cer,
        report.reference_len
    );
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> anyhow::Result<()> {
    let (file, config, exec) = resolve(&a.train, TrainConfig::desk())?;
    let data_path = pick(&a.data, &file.data, "--data")?;
    let out = pick(&a.out, &file.out, "--out")?;
    require_file(&data_path, "data")?;
    prepare_out_dir(&out)?;

    let data = read_dataset(&data_path)?;
    let run = pretrain(&config, EncoderConfig::default(), &data, exec)?;
    save_checkpoint(out.join("checkpoint.dsck"), &run.checkpoint)?;
    write_loss_log(out.join("loss_log.tsv"), &run.log)?;
    match run.log.last() {
        Some(r) => println!(
            "pretrained {} epochs, {} steps: L_a {:.4} L_t {:.4} L_a* {:.4} L_t* {:.4} total {:.4} exp(s) {:.3}",
            config.epochs,
            run.log.len(),
            r.loss.l_a,
            r.loss.l_t,
            r.loss.l_a_hard,
            r.loss.l_t_hard,
            r.loss.total,
            r.logit_scale
        ),
        None => println!("pretrained 0 steps: checkpoint is the initialization"),
    }
    Ok(())
}

/// Inputs shared by fine-tuning and sweeps, loaded after every path checks out.
struct TaskInputs {
    ckpt: Checkpoint,
    task: Task,
    freeze: FreezeMask,
    train: Vec<PairedSample>,
    test: Vec<PairedSample>,
}

fn task_inputs(flags: &TaskFlags, file: &RunConfig, out: Option<&Path>) -> anyhow::Result<TaskInputs> {
    let ckpt_path = pick(&flags.checkpoint, &file.checkpoint, "--checkpoint")?;
    let train_path = pick(&flags.train_data, &file.train_data, "--train-data")?;
    let test_path = pick(&flags.test_data, &file.test_data, "--test-data")?;
    let task = flags.task.or(file.task).ok_or_else(|| usage("missing --task (flag or config key)"))?;
    let freeze = flags.freeze.or(file.freeze).unwrap_or(FreezeMask::TRAIN_ALL);
    require_file(&ckpt_path, "checkpoint")?;
    require_file(&train_path, "training data")?;
    require_file(&test_path, "test data")?;
    if let Some(dir) = out {
        prepare_out_dir(dir)?;
    }
    let ckpt = load_checkpoint(&ckpt_path)?;
    let train = read_dataset(&train_path)?;
    let test = read_dataset(&test_path)?;
    check_task_labels(&train, task, &train_path)?;
    check_task_labels(&test, task, &test_path)?;
    Ok(TaskInputs {
        ckpt,
        task,
        freeze,
        train,
        test,
    })
}

fn check_task_labels(data: &[PairedSample], task: Task, path: &Path) -> anyhow::Result<()> {
    for s in data {
        match s.label {
            None => bail!(DataError(format!(
                "{}: sample `{}` has no label for task {}",
                path.display(),
                s.id,
                task.as_str()
            ))),
            Some(l) if l as usize >= task.classes() => {
                return Err(anyhow::Error::new(dsclap::Error::LabelOutOfRange {
                    label: l,
                    classes: task.classes(),
                })
                .context(format!("{}: sample `{}` does not fit task {}", path.display(), s.id, task.as_str())));
            }
            Some(_) => {}
        }
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.collect::<Option<Vec<_>>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Tab-separated metrics with one row per run and a closing mean row.
fn metrics_table(key: &str, rows: &[(String, Metrics)]) -> String {
    let mut t = format!("{key}\tn\tacc\tfrr\tmacro_f1\n");
    for (name, m) in rows {
        writeln!(t, "{name}\t{}\t{:.6}\t{}\t{}", m.n, m.acc, fmt_opt(m.frr), fmt_opt(m.macro_f1)).expect("string write");
    }
    let acc = rows.iter().map(|(_, m)| m.acc).sum::<f64>() / rows.len() as f64;
    writeln!(
        t,
        "mean\t{}\t{acc:.6}\t{}\t{}",
        rows[0].1.n,
        fmt_opt(mean_opt(rows.iter().map(|(_, m)| m.frr))),
        fmt_opt(mean_opt(rows.iter().map(|(_, m)| m.macro_f1)))
    )
    .expect("string write");
    t
}

fn emit(table: &str, out: Option<&Path>, name: &str) -> anyhow::Result<()> {
    print!("{table}");
    if let Some(dir) = out {
        let path = dir.join(name);
        std::fs::write(&path, table).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> anyhow::Result<()> {
    let (file, config, exec) = resolve(&a.train, TrainConfig::desk_finetune())?;
    let out = a.out.clone().or_else(|| file.out.clone());
    let inputs = task_inputs(&a.task, &file, out.as_deref())?;
    // Seeds run one after another; the parallel flag only spreads per-sample work.
    let mut rows = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let clf = finetune(&inputs.ckpt, inputs.task, inputs.freeze, &inputs.train, &config, seed, exec)?;
        let metrics = evaluate(&clf, &inputs.test, exec)?;
        if let Some(dir) = &out {
            save_classifier(dir.join(format!("classifier-{seed}.dscl")), &clf)?;
        }
        rows.push((seed.to_string(), metrics));
    }
    emit(&metrics_table("seed", &rows), out.as_deref(), "metrics.tsv")
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    for path in &a.classifiers {
        require_file(path, "classifier")?;
    }
    require_file(&a.test_data, "test data")?;
    let exec = if a.parallel { Exec::Parallel } else { Exec::Sequential };
    let test = read_dataset(&a.test_data)?;
    let mut rows = Vec::with_capacity(a.classifiers.len());
    for path in &a.classifiers {
        let clf = load_classifier(path)?;
        check_task_labels(&test, clf.task, &a.test_data)?;
        rows.push((path.display().to_string(), evaluate(&clf, &test, exec)?));
    }
    print!("{}", metrics_table("classifier", &rows));
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<()> {
    let (file, config, exec) = resolve(&a.train, TrainConfig::desk_finetune())?;
    let sizes = a
        .sizes
        .clone()
        .map(|l| l.0)
        .or_else(|| file.sizes.clone())
        .ok_or_else(|| usage("missing --sizes (flag or config key)"))?;
    if sizes.windows(2).any(|w| w[0] >= w[1]) || sizes.contains(&0) {
        return Err(usage("--sizes must be positive and strictly ascending"));
    }
    let out = a.out.clone().or_else(|| file.out.clone());
    let inputs = task_inputs(&a.task, &file, out.as_deref())?;
    // Seeds inside a sweep run sequentially unless parallelism was requested.
    let rows = data_size_sweep(&inputs.ckpt, &sizes, inputs.task, inputs.freeze, &inputs.train, &inputs.test, &config, exec)?;
    let mut t = String::from("size");
    for seed in &config.seeds {
        write!(t, "\tacc_seed{seed}").expect("string write");
    }
    t.push_str("\tmean\tmin\tmax\n");
    for r in &rows {
        t.push_str(&r.size.to_string());
        for s in &r.per_seed {
            write!(t, "\t{:.6}", s.metrics.acc).expect("string write");
        }
        writeln!(t, "\t{:.6}\t{:.6}\t{:.6}", r.mean_acc, r.min_acc, r.max_acc).expect("string write");
    }
    emit(&t, out.as_deref(), "sweep.tsv")
}

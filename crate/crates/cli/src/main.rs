use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command as Process, ExitCode};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use gazereward::checkpoint::TrainedModel;
use gazereward::corpus::{
    load_pairs_jsonl, load_ranked_jsonl, load_scored_jsonl, pairs_from_ranked, pairs_from_scored, write_pairs_jsonl,
    ChatTemplate, PreferencePair,
};
use gazereward::fusion::Fusion;
use gazereward::gazegen::{
    distribute_to_tokens, load_features_jsonl, quantile_discretize, write_features_jsonl, Channel, FeatureCombo,
    FeatureRecord, SurrogateConfig,
};
use gazereward::pipeline::{feature_id, FeatureSource, Pipeline, Side};
use gazereward::remap::{remap_features, remap_report, remap_report_csv};
use gazereward::rmcore::{grad_check, random_batch, ModelConfig, RewardModelParams};
use gazereward::tokenizers::{align_words, Vocab};
use gazereward::trainer::{
    bench_categories, evaluate_accuracy, grid_search, history_csv, select_trial, train, trials_csv, trials_text,
    Grid, Scheduler, TrainConfig, Trial,
};
use gazereward::Error;

#[derive(Parser, Debug)]
#[command(name = "gazereward", version, about = "Reward models with eye-tracking features")]
struct Cli {
    /// Increase log detail (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert ranked or scored records into preference pairs.
    Prepare(PrepareArgs),
    /// Write word-level gaze features for every pair (surrogate or ingested).
    Gaze(GazeArgs),
    /// Show how gaze-token features are remapped onto reward tokens.
    Remap(RemapArgs),
    /// Train a reward model.
    Train(TrainArgs),
    /// Train every cell of a hyper-parameter grid and keep the best.
    Gridsearch(GridArgs),
    /// Pairwise accuracy of a trained model.
    Eval(EvalArgs),
    /// Per-subset accuracy and macro average.
    Bench(BenchArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InputFormat {
    Ranked,
    Scored,
    Pairs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Text,
    Csv,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = InputFormat::Ranked)]
    format: InputFormat,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GazeArgs {
    #[arg(long, value_name = "PATH")]
    pairs: PathBuf,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Validate and normalise externally computed features instead of
    /// generating surrogate ones.
    #[arg(long, value_name = "PATH")]
    ingest: Option<PathBuf>,
    #[arg(long, default_value_t = ChatTemplate::Headered)]
    template: ChatTemplate,
    /// Replace every channel by its quantile bin (1..=K).
    #[arg(long)]
    quantize: bool,
    #[arg(long = "K", default_value_t = SurrogateConfig::default().k)]
    k: usize,
}

#[derive(Args, Debug)]
struct RemapArgs {
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long)]
    response: String,
    #[arg(long, default_value_t = ChatTemplate::Headered)]
    template: ChatTemplate,
    #[arg(long, default_value_t = FeatureCombo::Fcomb1)]
    combo: FeatureCombo,
    /// Channel shown in the table (nFix, FFD, GPT, TRT or fixProp).
    #[arg(long, default_value = "TRT")]
    channel: String,
    #[arg(long = "epsilon-last-char", default_value_t = SurrogateConfig::default().epsilon_last_char)]
    epsilon_last_char: f64,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
}

/// Flags named after [`TrainConfig`] keys; explicit values override a
/// `--config` file, which overrides the defaults.
#[derive(Args, Debug)]
struct ConfigFlags {
    /// File of `key = value` lines using the flag names with underscores.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = TrainConfig::default().fusion)]
    fusion: Fusion,
    #[arg(long, default_value_t = TrainConfig::default().combo)]
    combo: FeatureCombo,
    #[arg(long, default_value_t = TrainConfig::default().template)]
    template: ChatTemplate,
    #[arg(long, default_value_t = TrainConfig::default().lr0)]
    lr0: f64,
    #[arg(long, default_value_t = TrainConfig::default().scheduler)]
    scheduler: Scheduler,
    #[arg(long, default_value_t = TrainConfig::default().min_lr_fraction)]
    min_lr_fraction: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().val_frac)]
    val_frac: f64,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    weight_decay: f64,
    #[arg(long, default_value_t = TrainConfig::default().grad_clip)]
    grad_clip: f64,
    #[arg(long, default_value_t = TrainConfig::default().eval_every)]
    eval_every: usize,
    #[arg(long, default_value_t = TrainConfig::default().d_model)]
    d_model: usize,
    #[arg(long, default_value_t = TrainConfig::default().n_layers)]
    n_layers: usize,
    #[arg(long, default_value_t = TrainConfig::default().n_heads)]
    n_heads: usize,
    #[arg(long, default_value_t = TrainConfig::default().max_positions)]
    max_positions: usize,
    #[arg(long, default_value_t = TrainConfig::default().init_std)]
    init_std: f64,
    #[arg(long, default_value_t = TrainConfig::default().surrogate.window)]
    window: usize,
    #[arg(long, default_value_t = TrainConfig::default().surrogate.overlap)]
    overlap: usize,
    #[arg(long, default_value_t = TrainConfig::default().surrogate.epsilon_last_char)]
    epsilon_last_char: f64,
    #[arg(long = "K", default_value_t = TrainConfig::default().surrogate.k)]
    k: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_name = "PATH")]
    pairs: PathBuf,
    /// Ingested feature records; the surrogate is used when absent.
    #[arg(long, value_name = "PATH")]
    features: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long, value_name = "PATH")]
    pairs: PathBuf,
    #[arg(long, value_name = "PATH")]
    features: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = Grid::default().batch_sizes)]
    batch_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = Grid::default().lrs)]
    lrs: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = Grid::default().schedulers)]
    schedulers: Vec<Scheduler>,
    /// Trials run at once; above 1 each trial is a separate process.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pairs: PathBuf,
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    features: Option<PathBuf>,
    /// Vocabulary file the model must have been trained with.
    #[arg(long, value_name = "PATH")]
    vocab: Option<PathBuf>,
    /// Also write the report to this file.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_name = "PATH")]
    pairs: PathBuf,
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    features: Option<PathBuf>,
    /// Restrict the report to these subsets.
    #[arg(long, value_delimiter = ',')]
    subsets: Option<Vec<String>>,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FusionChoice {
    All,
    Baseline,
    Concat,
    Add,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long = "d", default_value_t = 16)]
    d_model: usize,
    #[arg(long, default_value_t = 1)]
    n_layers: usize,
    #[arg(long, default_value_t = 2)]
    n_heads: usize,
    #[arg(long, value_enum, default_value_t = FusionChoice::All)]
    fusion: FusionChoice,
    /// Pairs in the checked batch.
    #[arg(long, default_value_t = 4)]
    pairs: usize,
    /// Gaze channels per row.
    #[arg(long, default_value_t = 2)]
    width: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Lower bound of the relative-error denominator.
    #[arg(long, default_value_t = 1e-6)]
    floor: f64,
    #[arg(long, default_value_t = 0.3)]
    init_std: f64,
    /// Seeds both the parameters and the batch. Some seeds put a ReLU input
    /// within `eps` of zero, where central differences are not meaningful.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
}

/// Failure carrying its exit status.
#[derive(Debug)]
struct Exit(u8);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "exit status {}", self.0)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(Exit(code)) = cause.downcast_ref::<Exit>() {
            return *code;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Diverged { .. } | Error::NonFinite(_) => 3,
                Error::Config(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    match run(cli.command, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command, sub: &ArgMatches) -> Result<()> {
    match command {
        Command::Prepare(a) => prepare(a),
        Command::Gaze(a) => gaze(a),
        Command::Remap(a) => remap(a),
        Command::Train(a) => {
            let cfg = resolve_config(&a.config, sub)?;
            train_cmd(a, cfg)
        }
        Command::Gridsearch(a) => {
            let cfg = resolve_config(&a.config, sub)?;
            gridsearch(a, cfg)
        }
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

/// Defaults, then the config file, then flags given on the command line.
fn resolve_config(flags: &ConfigFlags, sub: &ArgMatches) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
    }
    for key in TrainConfig::KEYS {
        if sub.value_source(key) == Some(ValueSource::CommandLine) {
            let raw = sub
                .get_raw(key)
                .and_then(|mut v| v.next())
                .and_then(|v| v.to_str())
                .context("flag value is not valid UTF-8")?;
            cfg.set(key, raw)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    print!("{text}");
    if let Some(path) = out {
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    Ok(load_pairs_jsonl(path)?)
}

fn feature_source(path: Option<&Path>) -> Result<FeatureSource> {
    match path {
        Some(p) => Ok(FeatureSource::from_records(load_features_jsonl(p)?)?),
        None => Ok(FeatureSource::Surrogate),
    }
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let (pairs, skipped) = match a.format {
        InputFormat::Ranked => {
            let recs = load_ranked_jsonl(&a.input)?;
            let pairs: Vec<_> = recs.iter().filter_map(pairs_from_ranked).collect();
            let skipped = recs.len() - pairs.len();
            (pairs, skipped)
        }
        InputFormat::Scored => {
            let recs = load_scored_jsonl(&a.input)?;
            let pairs: Vec<_> = recs.iter().filter_map(pairs_from_scored).collect();
            let skipped = recs.len() - pairs.len();
            (pairs, skipped)
        }
        InputFormat::Pairs => (load_pairs_jsonl(&a.input)?, 0),
    };
    if skipped > 0 {
        log::warn!("{skipped} records yielded no pair");
    }
    write_pairs_jsonl(&a.out, &pairs)?;
    println!("wrote {} pairs to {} ({skipped} records skipped)", pairs.len(), a.out.display());
    Ok(())
}

fn quantize_record(rec: &mut FeatureRecord, k: usize) -> Result<()> {
    for values in rec.features.values_mut() {
        if values.iter().all(|&v| v == 0.0) {
            continue;
        }
        let bins = quantile_discretize(values, k)?;
        *values = bins.into_iter().map(|b| b as f64).collect();
    }
    Ok(())
}

fn gaze(a: GazeArgs) -> Result<()> {
    let pairs = load_pairs(&a.pairs)?;
    let surrogate = SurrogateConfig {
        k: a.k,
        ..SurrogateConfig::default()
    };
    surrogate.validate()?;
    let pipeline = Pipeline::fit(&pairs, a.template, Fusion::Concat, FeatureCombo::Fcomb2_5, surrogate)?;
    let mut records = match &a.ingest {
        None => pipeline.surrogate_records(&pairs)?,
        Some(path) => {
            let source = FeatureSource::from_records(load_features_jsonl(path)?)?;
            let FeatureSource::Records(mut map) = source else {
                unreachable!("from_records returns records")
            };
            let mut out = Vec::with_capacity(2 * pairs.len());
            for p in &pairs {
                for (side, text) in [(Side::Chosen, &p.chosen), (Side::Rejected, &p.rejected)] {
                    let id = feature_id(&p.id, side);
                    let rec = map.remove(&id).ok_or_else(|| Error::Feature(format!("no feature record {id:?}")))?;
                    let words = pipeline.feature_words(&p.prompt, text)?;
                    let m = rec.to_matrix(&words, None).with_context(|| format!("record {id:?}"))?;
                    out.push(FeatureRecord::from_matrix(id, &words, &m));
                }
            }
            if !map.is_empty() {
                log::warn!("{} feature records match no pair and were dropped", map.len());
            }
            out
        }
    };
    if a.quantize {
        for r in &mut records {
            quantize_record(r, a.k)?;
        }
    }
    write_features_jsonl(&a.out, &records)?;
    println!("wrote {} feature records to {}", records.len(), a.out.display());
    Ok(())
}

fn remap(a: RemapArgs) -> Result<()> {
    let channel = Channel::from_name(&a.channel).with_context(|| format!("unknown channel {:?}", a.channel))?;
    let pair = PreferencePair::new("remap", a.prompt.clone(), a.response.clone(), a.response.clone());
    let surrogate = SurrogateConfig {
        epsilon_last_char: a.epsilon_last_char,
        ..SurrogateConfig::default()
    };
    let pipeline = Pipeline::fit(&[pair], a.template, Fusion::Add, a.combo, surrogate)?;
    let rendered = pipeline.render(&a.prompt, &a.response)?;
    let gaze_tok = pipeline.gaze_tokens(&rendered)?;
    let reward_tok = pipeline.reward_tokens(&rendered)?;
    let words = pipeline.word_features(&gaze_tok, None)?;
    let column = words
        .channels
        .iter()
        .position(|&c| c == channel)
        .with_context(|| format!("{} does not include {}", a.combo, channel.name()))?;
    let tokens = distribute_to_tokens(&words, &gaze_tok, a.combo.scheme(), a.epsilon_last_char)?;
    let align = align_words(&gaze_tok, &reward_tok)?;
    let remapped = remap_features(&tokens, &align, a.combo.scheme(), &gaze_tok, &reward_tok)?;
    let before = tokens.values.column(column);
    let after = remapped.values.column(column);
    let text = match a.format {
        OutputFormat::Text => remap_report(&gaze_tok, &reward_tok, &align, &before, &after),
        OutputFormat::Csv => remap_report_csv(&gaze_tok, &reward_tok, &align, &before, &after),
    };
    print!("{text}");
    Ok(())
}

struct SideLog {
    file: fs::File,
}

impl SideLog {
    fn create(path: &Path) -> Result<Self> {
        Ok(SideLog {
            file: fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        })
    }

    fn line(&mut self, msg: &str) -> Result<()> {
        let t = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        writeln!(self.file, "{}.{:03} {msg}", t.as_secs(), t.subsec_millis())?;
        Ok(())
    }
}

fn train_cmd(a: TrainArgs, cfg: TrainConfig) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut log = SideLog::create(&a.out.join("train.log"))?;
    let pairs = load_pairs(&a.pairs)?;
    let source = feature_source(a.features.as_deref())?;
    log.line(&format!("start: {} pairs, config {}", pairs.len(), cfg.fingerprint()))?;
    fs::write(a.out.join("config.txt"), cfg.to_text())?;
    let outcome = match train(&pairs, &source, &cfg) {
        Ok(o) => o,
        Err(e) => {
            log.line(&format!("failed: {e}"))?;
            return Err(e.into());
        }
    };
    outcome.model.save(a.out.join("checkpoint.bin"))?;
    fs::write(a.out.join("history.csv"), history_csv(&outcome.history))?;
    log.line(&format!(
        "done: best step {} validation loss {:.6}",
        outcome.model.best_step, outcome.model.best_val_loss
    ))?;
    println!(
        "best validation loss {:.6} at step {} (initial {:.6}); wrote {}",
        outcome.model.best_val_loss,
        outcome.model.best_step,
        outcome.initial_val_loss,
        a.out.display()
    );
    Ok(())
}

fn trial_from_checkpoint(path: &Path, cfg: &TrainConfig) -> Result<Trial> {
    let model = TrainedModel::load(path)?;
    Ok(Trial {
        batch_size: cfg.batch_size,
        lr0: cfg.lr0,
        scheduler: cfg.scheduler,
        best_val_loss: model.best_val_loss,
        best_step: model.best_step as usize,
    })
}

/// Runs each cell as a `train` child process, at most `jobs` at a time.
fn grid_in_processes(a: &GridArgs, cells: &[TrainConfig]) -> Result<Vec<Trial>> {
    let exe = std::env::current_exe().context("locating the executable")?;
    let dirs: Vec<PathBuf> = (0..cells.len()).map(|i| a.out.join("trials").join(format!("{i:03}"))).collect();
    let mut pending = cells.iter().zip(&dirs).peekable();
    let mut running: Vec<(std::process::Child, &PathBuf)> = Vec::new();
    loop {
        while running.len() < a.jobs {
            let Some((cfg, dir)) = pending.next() else { break };
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.txt"), cfg.to_text())?;
            let mut cmd = Process::new(&exe);
            cmd.arg("train").arg("--pairs").arg(&a.pairs).arg("--out").arg(dir);
            cmd.arg("--config").arg(dir.join("config.txt"));
            if let Some(f) = &a.features {
                cmd.arg("--features").arg(f);
            }
            cmd.stdout(std::process::Stdio::null());
            running.push((cmd.spawn().context("spawning trial")?, dir));
        }
        if running.is_empty() {
            break;
        }
        let (mut child, dir) = running.remove(0);
        let status = child.wait()?;
        if !status.success() {
            let code = status.code().unwrap_or(2).clamp(1, 255) as u8;
            return Err(anyhow::Error::new(Exit(code)).context(format!("trial in {} failed", dir.display())));
        }
    }
    cells
        .iter()
        .zip(&dirs)
        .map(|(cfg, dir)| trial_from_checkpoint(&dir.join("checkpoint.bin"), cfg))
        .collect()
}

fn gridsearch(a: GridArgs, base: TrainConfig) -> Result<()> {
    if a.jobs == 0 {
        bail!(Error::Config("--jobs must be at least 1".into()));
    }
    fs::create_dir_all(&a.out)?;
    let grid = Grid {
        batch_sizes: a.batch_sizes.clone(),
        lrs: a.lrs.clone(),
        schedulers: a.schedulers.clone(),
    };
    let pairs = load_pairs(&a.pairs)?;
    let source = feature_source(a.features.as_deref())?;
    let cells: Vec<TrainConfig> = grid
        .cells()
        .into_iter()
        .map(|(batch_size, lr0, scheduler)| TrainConfig {
            batch_size,
            lr0,
            scheduler,
            ..base.clone()
        })
        .collect();
    let trials = if a.jobs > 1 {
        grid_in_processes(&a, &cells)?
    } else {
        grid_search(&pairs, &source, &base, &grid, 1)?.trials
    };
    let best = select_trial(&trials).context("grid has no cells")?;
    let best_cfg = &cells[best];
    fs::write(a.out.join("trials.csv"), trials_csv(&trials))?;
    fs::write(a.out.join("best_config.txt"), best_cfg.to_text())?;

    let outcome = train(&pairs, &source, best_cfg)?;
    outcome.model.save(a.out.join("checkpoint.bin"))?;
    fs::write(a.out.join("history.csv"), history_csv(&outcome.history))?;

    match a.format {
        OutputFormat::Text => print!("{}", trials_text(&trials, Some(best))),
        OutputFormat::Csv => print!("{}", trials_csv(&trials)),
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = TrainedModel::load(&a.checkpoint)?;
    if let Some(path) = &a.vocab {
        model.check_vocab(&Vocab::load(path)?)?;
    }
    let pairs = load_pairs(&a.pairs)?;
    let source = feature_source(a.features.as_deref())?;
    let report = evaluate_accuracy(&pairs, &model, &source, None)?;
    let text = match a.format {
        OutputFormat::Text => report.to_text(),
        OutputFormat::Csv => report.to_csv(),
    };
    emit(&text, a.out.as_deref())
}

fn bench(a: BenchArgs) -> Result<()> {
    let model = TrainedModel::load(&a.checkpoint)?;
    let pairs = load_pairs(&a.pairs)?;
    let source = feature_source(a.features.as_deref())?;
    let report = bench_categories(&pairs, &model, &source, a.subsets.as_deref())?;
    let text = match a.format {
        OutputFormat::Text => report.to_text(),
        OutputFormat::Csv => report.to_csv(),
    };
    emit(&text, a.out.as_deref())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let fusions: &[Fusion] = match a.fusion {
        FusionChoice::All => &[Fusion::Baseline, Fusion::Concat, Fusion::Add],
        FusionChoice::Baseline => &[Fusion::Baseline],
        FusionChoice::Concat => &[Fusion::Concat],
        FusionChoice::Add => &[Fusion::Add],
    };
    let mut all_pass = true;
    let mut csv = String::from("fusion,group,checked,max_rel_error,pass\n");
    for &fusion in fusions {
        let config = ModelConfig {
            vocab_size: 24,
            d_model: a.d_model,
            n_layers: a.n_layers,
            n_heads: a.n_heads,
            max_positions: 32,
            fusion,
            feature_width: if fusion.uses_gaze() { a.width } else { 0 },
            special_rows: 6,
            eye_open_id: 4,
            eye_close_id: 5,
            init_std: a.init_std,
        };
        let params = RewardModelParams::init(config.clone(), a.seed)?;
        let batch = random_batch(&config, a.pairs, a.seed.wrapping_add(1));
        let report = grad_check(&params, &batch, a.eps, a.floor)?;
        let pass = report.passes(a.tol);
        all_pass &= pass;
        match a.format {
            OutputFormat::Text => {
                println!("== {fusion} ==");
                print!("{}", report.render(a.tol));
            }
            OutputFormat::Csv => {
                for (group, g) in &report.groups {
                    csv.push_str(&format!(
                        "{fusion},{group},{},{:e},{}\n",
                        g.checked,
                        g.max_rel_error,
                        g.max_rel_error < a.tol
                    ));
                }
            }
        }
    }
    if a.format == OutputFormat::Csv {
        print!("{csv}");
    }
    if !all_pass {
        return Err(anyhow::Error::new(Exit(3)).context(format!("gradient check failed at tolerance {:e}", a.tol)));
    }
    Ok(())
}

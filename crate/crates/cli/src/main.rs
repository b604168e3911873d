//! Command-line front end: data preparation, training, evaluation and the
//! ablation, grid and reference-behavior experiments. Results go to stdout
//! as JSON lines and, with the resolved config, into the output directory.

mod args;
mod report;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{Map, Value};

use hifirec::dataset::{filter_activity, load_interactions, read_prepared, temporal_split, write_prepared, PreparedData, Schema};
use hifirec::experiment::{ablation, grid_sweep, reference_behavior_study, GRID_C, GRID_X};
use hifirec::model::Checkpoint;
use hifirec::optim::{AdamConfig, AdamState};
use hifirec::synthetic::{generate, SyntheticConfig};
use hifirec::train::{evaluate_split, model_shape, train_from, Dataset, Split};
use hifirec::{Behavior, Real, TrainConfig, VariantSpec};

use args::ConfigArgs;

#[derive(Parser, Debug)]
#[command(name = "hifirec", version, about = "Multi-behavior recommendation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter and split a raw interaction log into a data directory.
    Prepare(PrepareArgs),
    /// Write a seeded synthetic data directory.
    Synth(SynthArgs),
    /// Train one model and save its checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on the validation or test split.
    Evaluate(EvaluateArgs),
    /// Train every neighborhood and sampling variant.
    Ablate(AblateArgs),
    /// Sweep the negative weight mass C against the exponent x.
    Grid(GridArgs),
    /// Train once per reference behavior and summarize the negative weights.
    Refstudy(RefstudyArgs),
    /// Render JSON-lines results as a text table.
    Report(ReportArgs),
}

#[derive(clap::Args, Debug)]
struct PrepareArgs {
    /// Delimited file with user, item, behavior and timestamp columns.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Users and items need more than this many interactions.
    #[arg(long, default_value_t = 10)]
    min_interactions: usize,
    #[arg(long, default_value_t = 5)]
    min_purchases: usize,
    /// Field separator: tab, comma or a single character.
    #[arg(long, default_value = "tab")]
    delimiter: String,
    #[arg(long)]
    header: bool,
    /// Zero-based column positions of user, item, behavior, timestamp.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    columns: Vec<usize>,
    /// Extra behavior label such as `buy=purchase`; repeatable.
    #[arg(long = "alias")]
    aliases: Vec<String>,
}

#[derive(clap::Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML file with generator fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args, Debug)]
struct DataArgs {
    /// Directory written by `prepare` or `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the frozen config and results.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from a checkpoint, including its optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long = "k", value_delimiter = ',', default_value = "10,50,100")]
    ks: Vec<usize>,
    /// Defaults to the config.toml next to the checkpoint.
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(clap::Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Semicolon-separated variants; all six by default.
    #[arg(long, value_delimiter = ';')]
    variants: Option<Vec<VariantSpec>>,
    /// Runs executed concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(clap::Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',')]
    cs: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    xs: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(clap::Args, Debug)]
struct RefstudyArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Histogram bins per weight distribution.
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(clap::Args, Debug)]
struct ReportArgs {
    /// JSON-lines files from train, evaluate, ablate, grid or refstudy.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Pivot grid results into a C by x matrix of this metric.
    #[arg(long)]
    grid_metric: Option<String>,
}

/// Writes each JSON line to stdout and, when open, to a results file.
struct Sink {
    file: Option<BufWriter<File>>,
}

impl Sink {
    fn to(path: &Path) -> Result<Self> {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { file: Some(BufWriter::new(f)) })
    }

    fn emit(&mut self, v: &Value) -> Result<()> {
        let line = serde_json::to_string(v)?;
        println!("{line}");
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

fn tagged(tag: (&str, &str), v: Value) -> Value {
    let mut m = Map::new();
    m.insert(tag.0.into(), tag.1.into());
    if let Value::Object(rest) = v {
        m.extend(rest);
    }
    Value::Object(m)
}

fn load_data(dir: &Path) -> Result<Dataset> {
    let prepared = read_prepared(dir).with_context(|| format!("reading data directory {}", dir.display()))?;
    Ok(Dataset::from_prepared(&prepared))
}

fn start_run(out: &Path, cfg: &TrainConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.save(&out.join("config.toml"))?;
    Ok(())
}

/// Runs `f` on a pool of `n` threads; `f` learns whether to fan out.
fn with_parallelism<R: Send>(n: usize, f: impl FnOnce(bool) -> R + Send) -> Result<R> {
    if n <= 1 {
        return Ok(f(false));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
    Ok(pool.install(|| f(true)))
}

fn parse_delimiter(s: &str) -> Result<u8> {
    match s {
        "tab" | "\\t" => Ok(b'\t'),
        "comma" => Ok(b','),
        "space" => Ok(b' '),
        _ if s.len() == 1 => Ok(s.as_bytes()[0]),
        _ => bail!("delimiter must be tab, comma, space or one character, got {s:?}"),
    }
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let [user, item, behavior, timestamp] = a.columns[..] else {
        bail!("--columns needs four positions");
    };
    let mut aliases = Vec::new();
    for spec in &a.aliases {
        let (label, b) = spec.split_once('=').with_context(|| format!("alias {spec:?} is not label=behavior"))?;
        aliases.push((label.to_string(), b.parse::<Behavior>()?));
    }
    let schema = Schema { user, item, behavior, timestamp, delimiter: parse_delimiter(&a.delimiter)?, has_header: a.header, aliases };
    let raw = load_interactions(&a.input, &schema)?;
    let filtered = filter_activity(&raw, a.min_interactions, a.min_purchases)?;
    let stats = filtered.stats();
    let split = temporal_split(&filtered);
    let skipped = split.skipped_users;
    let data = PreparedData::from_split(split, stats);
    write_prepared(&a.out, &data)?;
    let mut v = serde_json::to_value(&data.stats)?;
    v["raw_events"] = raw.len().into();
    v["valid_users"] = data.valid.len().into();
    v["test_users"] = data.test.len().into();
    v["skipped_users"] = skipped.into();
    Sink { file: None }.emit(&v)
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SyntheticConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SyntheticConfig::default(),
    };
    cfg.users = a.users.unwrap_or(cfg.users);
    cfg.items = a.items.unwrap_or(cfg.items);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let log = generate(&cfg)?;
    let stats = log.stats();
    let data = PreparedData::from_split(temporal_split(&log), stats);
    write_prepared(&a.out, &data)?;
    fs::write(a.out.join("synthetic.toml"), toml::to_string(&cfg)?)?;
    Sink { file: None }.emit(&serde_json::to_value(&data.stats)?)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let data = load_data(&a.data.data)?;
    let out = &a.data.out;
    start_run(out, &cfg)?;
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let (params, adam) = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::<Real>::load(path).with_context(|| format!("loading {}", path.display()))?;
            if ckpt.activation != cfg.activation {
                bail!("checkpoint was trained with {:?} but the config asks for {:?}", ckpt.activation, cfg.activation);
            }
            let adam = match ckpt.optimizer {
                Some((step, m, v)) => AdamState::restore(adam_cfg, step, m, v),
                None => AdamState::new(adam_cfg, &ckpt.params),
            };
            (ckpt.params, adam)
        }
        None => {
            let params = hifirec::model::init_params::<Real>(model_shape(&cfg, &data), cfg.seed)?;
            let adam = AdamState::new(adam_cfg, &params);
            (params, adam)
        }
    };

    let mut sink = Sink::to(&out.join("epochs.jsonl"))?;
    let mut failure = None;
    let outcome = train_from(&cfg, &data, params, adam, &mut |record, valid| {
        let mut emit = || -> Result<()> {
            sink.emit(&serde_json::to_value(record)?)?;
            if let Some(r) = valid {
                let mut v = tagged(("split", "valid"), r.to_json());
                v["epoch"] = record.epoch.into();
                sink.emit(&v)?;
            }
            Ok(())
        };
        if let Err(e) = emit() {
            failure.get_or_insert(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    sink.finish()?;

    let optimizer = Some((outcome.optimizer.step, outcome.optimizer.m.clone(), outcome.optimizer.v.clone()));
    Checkpoint { params: outcome.params, activation: cfg.activation, optimizer }.save(&out.join("checkpoint.bin"))?;
    let mut results = Sink::to(&out.join("metrics.jsonl"))?;
    for (split, r) in [("valid", &outcome.valid), ("test", &outcome.test)] {
        let mut v = tagged(("split", split), r.to_json());
        v["best_epoch"] = outcome.best_epoch.into();
        v["stopped_early"] = outcome.stopped_early.into();
        results.emit(&v)?;
    }
    results.finish()
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let mut config = a.config.clone();
    if config.config.is_none() {
        let sibling = a.checkpoint.with_file_name("config.toml");
        if sibling.exists() {
            config.config = Some(sibling);
        }
    }
    let cfg = config.resolve()?;
    let data = load_data(&a.data)?;
    let ckpt = Checkpoint::<Real>::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let expected = model_shape(&cfg, &data);
    if ckpt.params.shape != expected {
        bail!("checkpoint shape {:?} does not match config and data {:?}", ckpt.params.shape, expected);
    }
    let cfg = TrainConfig { activation: ckpt.activation, ..cfg };
    let r = evaluate_split(&cfg, &data, &ckpt.params, a.split, &a.ks)?;
    let split = if a.split == Split::Valid { "valid" } else { "test" };
    Sink { file: None }.emit(&tagged(("split", split), r.to_json()))
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let data = load_data(&a.data.data)?;
    start_run(&a.data.out, &cfg)?;
    let variants = a.variants.unwrap_or_else(VariantSpec::grid);
    let rows = with_parallelism(a.parallel, |par| ablation::<Real>(&cfg, &data, &variants, par))??;
    let mut sink = Sink::to(&a.data.out.join("ablation.jsonl"))?;
    for r in rows {
        sink.emit(&r.to_json())?;
    }
    sink.finish()
}

fn grid_cmd(a: GridArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let data = load_data(&a.data.data)?;
    start_run(&a.data.out, &cfg)?;
    let cs = a.cs.unwrap_or_else(|| GRID_C.to_vec());
    let xs = a.xs.unwrap_or_else(|| GRID_X.to_vec());
    for &c in &cs {
        TrainConfig { c, ..cfg.clone() }.validate()?;
    }
    for &x in &xs {
        TrainConfig { x, ..cfg.clone() }.validate()?;
    }
    let cells = with_parallelism(a.parallel, |par| grid_sweep::<Real>(&cfg, &data, &cs, &xs, par))??;
    let mut sink = Sink::to(&a.data.out.join("grid.jsonl"))?;
    for cell in cells {
        sink.emit(&cell.to_json())?;
    }
    sink.finish()
}

fn refstudy_cmd(a: RefstudyArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let data = load_data(&a.data.data)?;
    start_run(&a.data.out, &cfg)?;
    let rows = with_parallelism(a.parallel, |par| reference_behavior_study::<Real>(&cfg, &data, a.bins, par))??;
    let mut sink = Sink::to(&a.data.out.join("refstudy.jsonl"))?;
    for r in rows {
        sink.emit(&r.to_json())?;
    }
    sink.finish()
}

fn read_jsonl(path: &Path) -> Result<Vec<Map<String, Value>>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))? {
            Value::Object(m) => rows.push(m),
            _ => bail!("{}:{}: expected a JSON object", path.display(), i + 1),
        }
    }
    Ok(rows)
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for p in &a.inputs {
        rows.extend(read_jsonl(p)?);
    }
    let text = match &a.grid_metric {
        Some(m) => report::render_grid(&rows, m).context("grid report needs rows with C and x")?,
        None => report::render_table(&rows),
    };
    print!("{text}");
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Prepare(a) => prepare(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Grid(a) => grid_cmd(a),
        Command::Refstudy(a) => refstudy_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn variant_conflicts_with_axis_flags() {
        let err = Cli::try_parse_from(["hifirec", "train", "--data", "d", "--variant", "F-NB+I-NS", "--sampling", "U-NS"]);
        assert!(err.is_err());
        let ok = Cli::try_parse_from(["hifirec", "train", "--data", "d", "--variant", "W-NB+U-NS", "--lr", "0.01"]).unwrap();
        let Command::Train(t) = ok.command else { panic!("train expected") };
        let cfg = t.config.resolve().unwrap();
        assert_eq!(cfg.variant().to_string(), "W-NB+U-NS");
        assert_eq!(cfg.lr, 0.01);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "dim = 16\nlr = 0.5\n").unwrap();
        let cli = Cli::try_parse_from(["hifirec", "train", "--data", "d", "--config", path.to_str().unwrap(), "--lr", "0.02"]).unwrap();
        let Command::Train(t) = cli.command else { panic!("train expected") };
        let cfg = t.config.resolve().unwrap();
        assert_eq!((cfg.dim, cfg.lr), (16, 0.02));
        let bad = Cli::try_parse_from(["hifirec", "train", "--data", "d", "--c", "2.0"]).unwrap();
        let Command::Train(t) = bad.command else { panic!("train expected") };
        assert!(t.config.resolve().is_err());
    }

    #[test]
    fn delimiters() {
        assert_eq!(parse_delimiter("tab").unwrap(), b'\t');
        assert_eq!(parse_delimiter(",").unwrap(), b',');
        assert!(parse_delimiter("ab").is_err());
    }
}

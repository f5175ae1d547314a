use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use uaul::checkpoint;
use uaul::codec::{self, TemplateKind};
use uaul::config::ConfigError;
use uaul::corpus::{self, synth, Example};
use uaul::eval::{self, Prediction};
use uaul::trainer::{self, TrainError};
use uaul::{CorpusSplit, UaulConfig};

#[derive(Parser)]
#[command(name = "uaul", version, about = "Uncertainty-aware unlikelihood training for aspect sentiment quads")]
struct Cli {
    /// Seed for every random choice; overrides `seed` from configs and checkpoints.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Write JSON-lines metrics here instead of stdout.
    #[arg(long, global = true)]
    metrics: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and save the best-dev checkpoint.
    Train {
        /// Directory holding train.jsonl, dev.jsonl and test.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Decode a corpus file with a checkpoint and score it.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Also write the predictions as a corpus file.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Render the gold quads of a corpus file as target sequences.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "paraphrase")]
        template: String,
    },
    /// Parse target sequences back into a corpus file.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "paraphrase")]
        template: String,
    },
    /// Score a prediction file against a gold file.
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Generate a synthetic corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 800)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        dev: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
    },
    /// Train the full configuration and its five ablations over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Baseline vs. full training on nested subsets of the training split.
    LowResource {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated ratios in (0, 1].
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Dump the positive and negative samples a checkpoint would train on.
    InspectNegatives {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// One flag per config key; flags win over `--config`.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    margin: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    d_model: Option<String>,
    #[arg(long)]
    n_heads: Option<String>,
    #[arg(long)]
    n_layers: Option<String>,
    #[arg(long)]
    d_ff: Option<String>,
    #[arg(long)]
    max_len: Option<String>,
    #[arg(long)]
    use_mul: Option<String>,
    #[arg(long)]
    use_me: Option<String>,
    #[arg(long)]
    use_mc: Option<String>,
    #[arg(long)]
    use_ul: Option<String>,
    #[arg(long)]
    negatives: Option<String>,
    #[arg(long)]
    me_normalize: Option<String>,
    #[arg(long)]
    clip_norm: Option<String>,
    #[arg(long)]
    max_decode_len: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> [(&'static str, &Option<String>); 21] {
        [
            ("k", &self.k),
            ("dropout", &self.dropout),
            ("alpha", &self.alpha),
            ("margin", &self.margin),
            ("lr", &self.lr),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("template", &self.template),
            ("d_model", &self.d_model),
            ("n_heads", &self.n_heads),
            ("n_layers", &self.n_layers),
            ("d_ff", &self.d_ff),
            ("max_len", &self.max_len),
            ("use_mul", &self.use_mul),
            ("use_me", &self.use_me),
            ("use_mc", &self.use_mc),
            ("use_ul", &self.use_ul),
            ("negatives", &self.negatives),
            ("me_normalize", &self.me_normalize),
            ("clip_norm", &self.clip_norm),
            ("max_decode_len", &self.max_decode_len),
        ]
    }

    /// `base`, then the config file, then flags, then the global seed.
    fn resolve(&self, mut base: UaulConfig, seed: Option<u64>) -> Result<UaulConfig> {
        if let Some(path) = &self.config {
            let text = read(path)?;
            base.apply_text(&text)?;
        }
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                base.set(key, v)?;
            }
        }
        if let Some(s) = seed {
            base.seed = s;
        }
        base.validate()?;
        Ok(base)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

struct Metrics(Box<dyn Write>);

impl Metrics {
    fn open(path: Option<&Path>) -> Result<Self> {
        Ok(Metrics(match path {
            Some(p) => Box::new(BufWriter::new(
                fs::File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
            )),
            None => Box::new(io::stdout().lock()),
        }))
    }

    fn emit<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.0, value)?;
        self.0.write_all(b"\n")?;
        Ok(())
    }
}

/// One line of `encode` output and `decode` input.
#[derive(Serialize, Deserialize)]
struct EncodedLine {
    sentence: String,
    target: String,
}

fn load_data(dir: &Path) -> Result<CorpusSplit> {
    Ok(CorpusSplit::load_dir(dir)?)
}

fn template(name: &str) -> Result<TemplateKind> {
    Ok(TemplateKind::parse_name(name)?)
}

fn run(cli: Cli) -> Result<()> {
    let mut metrics = Metrics::open(cli.metrics.as_deref())?;
    let seed = cli.seed;
    match cli.command {
        Command::Train { data, checkpoint: ckpt, cfg } => {
            let cfg = cfg.resolve(UaulConfig::default(), seed)?;
            let corpus = load_data(&data)?;
            let mut emit_err = None;
            let out = trainer::train_with(&cfg, &corpus, |log| {
                if let Err(e) = metrics.emit(log) {
                    emit_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = emit_err {
                return Err(e);
            }
            checkpoint::save(&ckpt, &out.model, &out.vocab, &cfg)?;
            let test = eval::evaluate(&out.model, &out.vocab, cfg.template, &corpus.test, cfg.max_decode_len)?;
            metrics.emit(&serde_json::json!({
                "event": "done",
                "best_epoch": out.report.best_epoch,
                "best_dev_f1": out.report.best_dev_f1,
                "test": eval::ScoreReportSummary::from(&test),
            }))?;
            eprintln!(
                "trained {} epochs in {:.1}s; best dev F1 {:.4} at epoch {}; test F1 {:.4}",
                cfg.epochs,
                out.report.wall_clock.as_secs_f64(),
                out.report.best_dev_f1,
                out.report.best_epoch,
                test.f1
            );
        }
        Command::Eval { checkpoint: ckpt, input, output } => {
            let ck = checkpoint::load(&ckpt)?;
            let examples = corpus::load(&input)?;
            let decoded = eval::predict(
                &ck.model,
                &ck.vocab,
                ck.config.template,
                examples.iter().map(|e| &e.sentence),
                ck.config.max_decode_len,
            )?;
            let preds: Vec<Prediction> = decoded.into_iter().map(|(_, p)| p).collect();
            if let Some(path) = output {
                let out: Vec<Example> = examples
                    .iter()
                    .zip(&preds)
                    .map(|(e, p)| Example::new(e.sentence.clone(), p.quads.clone()))
                    .collect();
                corpus::save(&path, &out)?;
            }
            let gold: Vec<_> = examples.iter().map(|e| e.quads.clone()).collect();
            let report = eval::score_predictions(&preds, &gold)?;
            eprintln!("{}", report.table());
            metrics.emit(&report)?;
        }
        Command::Encode { input, output, template: t } => {
            let kind = template(&t)?;
            let examples = corpus::load(&input)?;
            let mut text = String::new();
            for (i, ex) in examples.iter().enumerate() {
                let target = codec::render(&ex.quads, kind).with_context(|| format!("example {}", i + 1))?;
                text.push_str(&serde_json::to_string(&EncodedLine {
                    sentence: ex.sentence.clone(),
                    target: target.text,
                })?);
                text.push('\n');
            }
            write(&output, &text)?;
            metrics.emit(&serde_json::json!({"event": "encode", "examples": examples.len(), "template": kind.name()}))?;
        }
        Command::Decode { input, output, template: t } => {
            let kind = template(&t)?;
            let mut out = Vec::new();
            let mut diagnostics = 0;
            for (i, line) in read(&input)?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let rec: EncodedLine = serde_json::from_str(line).with_context(|| format!("{}:{}", input.display(), i + 1))?;
                let (quads, diags) = codec::parse(&rec.target, kind);
                for d in &diags {
                    eprintln!("{}:{}: unparseable chunk {:?}: {}", input.display(), i + 1, d.chunk, d.reason);
                }
                diagnostics += diags.len();
                out.push(Example::new(rec.sentence, quads));
            }
            corpus::save(&output, &out)?;
            metrics.emit(&serde_json::json!({"event": "decode", "examples": out.len(), "unparseable_chunks": diagnostics}))?;
        }
        Command::Score { pred, gold } => {
            let p = corpus::load_predictions(&pred)?;
            let g = corpus::load(&gold)?;
            let report = eval::score(
                &p.into_iter().map(|e| e.quads).collect::<Vec<_>>(),
                &g.into_iter().map(|e| e.quads).collect::<Vec<_>>(),
            )?;
            eprintln!("{}", report.table());
            metrics.emit(&report)?;
        }
        Command::GenData { out, train, dev, test } => {
            let spec = synth::SyntheticSpec::new(train, dev, test, seed.unwrap_or(42));
            let split = synth::generate(&spec)?;
            split.save_dir(&out)?;
            let vocab = corpus::Vocabulary::build(&split.train);
            metrics.emit(&serde_json::json!({
                "event": "gen-data",
                "train": split.train.len(),
                "dev": split.dev.len(),
                "test": split.test.len(),
                "vocab": vocab.len(),
                "vocab_hash": vocab.hash(),
            }))?;
        }
        Command::Ablate { data, seeds, cfg } => {
            let cfg = cfg.resolve(UaulConfig::default(), seed)?;
            if seeds.is_empty() {
                bail!("--seeds needs at least one seed");
            }
            let corpus = load_data(&data)?;
            let table = trainer::run_ablation_suite(&corpus, &cfg, &seeds);
            eprintln!("{}", table.table());
            metrics.emit(&table)?;
        }
        Command::LowResource { data, ratios, cfg } => {
            let cfg = cfg.resolve(UaulConfig::default(), seed)?;
            let corpus = load_data(&data)?;
            let ratios = ratios.unwrap_or_else(eval::default_ratios);
            let table = eval::low_resource_run(&corpus, &ratios, &cfg)?;
            eprintln!("{}", table.table());
            for row in &table.rows {
                metrics.emit(row)?;
            }
        }
        Command::InspectNegatives { checkpoint: ckpt, input, cfg } => {
            let ck = checkpoint::load(&ckpt)?;
            let cfg = cfg.resolve(ck.config.clone(), seed)?;
            let examples = corpus::load(&input)?;
            for rec in trainer::inspect_negatives(&ck.model, &ck.vocab, &cfg, &examples)? {
                metrics.emit(&rec)?;
            }
        }
    }
    metrics.0.flush()?;
    Ok(())
}

/// 3 for config violations, 4 for unreadable inputs, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || matches!(cause.downcast_ref::<TrainError>(), Some(TrainError::Config(_))) {
            return 3;
        }
        if cause.is::<io::Error>()
            || matches!(cause.downcast_ref::<corpus::CorpusError>(), Some(corpus::CorpusError::Io { .. }))
            || matches!(cause.downcast_ref::<checkpoint::CheckpointError>(), Some(checkpoint::CheckpointError::Io { .. }))
        {
            return 4;
        }
    }
    1
}

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

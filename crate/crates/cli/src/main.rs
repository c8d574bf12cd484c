use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use kiprompt::candidate::{format_candidates, CandidateMatcher, Scheme};
use kiprompt::corpus::{merge_predictions, Delimiters, Mention, StandardLibrary};
use kiprompt::harness::{
    ablate_knowledge, ablate_templates, collect_reports, evaluate_split, train, write_synthetic, Candidates,
    Checkpoint, DataBundle, ExperimentConfig, Shots, SyntheticConfig,
};
use kiprompt::kb::{KnowledgeBase, KnowledgeVocab};
use kiprompt::knowledge_encoder::KnowledgeStrategy;
use kiprompt::{Error, Result};

#[derive(Parser)]
#[command(name = "kiprompt", version, about = "Knowledge-injected prompt learning for biomedical entity normalization")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Factor {
    Knowledge,
    Template,
}

#[derive(clap::Args)]
struct ExperimentArgs {
    /// Experiment config (flat TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with library.txt, kb.tsv, train/dev/test.tsv and vector files.
    #[arg(long)]
    data_dir: PathBuf,
    /// Root of the `runs/<name>/<seed>/` layout.
    #[arg(long, default_value = "runs")]
    runs: PathBuf,
    /// Replace the configured seeds with S, S+1, ... (same count).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    shots: Option<String>,
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    knowledge_strategy: Option<String>,
    #[arg(long)]
    name: Option<String>,
}

impl ExperimentArgs {
    fn load(&self) -> Result<(ExperimentConfig, DataBundle)> {
        let mut config = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            config.seeds = (0..config.seeds.len() as u64).map(|i| s + i).collect();
        }
        if let Some(s) = &self.shots {
            config.shots = s.parse::<Shots>()?;
        }
        if let Some(t) = &self.template {
            config.template = t.clone();
        }
        if let Some(k) = &self.knowledge_strategy {
            config.knowledge_strategy = k.parse::<KnowledgeStrategy>()?;
        }
        if let Some(n) = &self.name {
            config.name = n.clone();
        }
        config.validate()?;
        let data = DataBundle::load_dir(&self.data_dir)?;
        Ok((config, data))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Flatten a triples TSV into a KB file and its vocabulary listing.
    KbBuild {
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Stage-1 Jaccard candidates as `part<TAB>rank<TAB>term<TAB>score`.
    Match {
        /// Dataset TSV (`mention<TAB>gold`) or one raw mention per line.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        library: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value = "unigram+bigram")]
        scheme: String,
    },
    /// Train every seed and write checkpoints and metrics.
    Train(ExperimentArgs),
    /// Re-score stored checkpoints on the test split.
    Evaluate(ExperimentArgs),
    /// Predict standard terms for raw mentions with a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        library: PathBuf,
        /// One raw mention per line (extra tab-separated columns ignored).
        #[arg(long)]
        input: PathBuf,
    },
    /// Paired runs over knowledge strategies or template presets.
    Ablate {
        #[arg(long, value_enum)]
        factor: Factor,
        #[command(flatten)]
        experiment: ExperimentArgs,
    },
    /// Aggregate `runs/*/metrics.json` into one CSV table.
    Report {
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded synthetic corpus into a data directory.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generator settings (flat TOML); defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Malformed(_) => 4,
        Error::Data(_) => 5,
        Error::Config(_) => 6,
        Error::TemplateParse { .. } => 7,
        Error::Render(_) => 8,
        Error::Conformance(_) => 9,
        Error::Divergence(_) => 10,
        Error::Checkpoint(_) => 11,
        Error::InvalidArgument(_) => 12,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write_stdout(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|()| out.flush())
        .map_err(|e| Error::io("<stdout>", e))
}

fn read_mentions(path: &Path) -> Result<Vec<Mention>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let delims = Delimiters::default();
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let raw = line.split('\t').next().unwrap_or("");
            Mention::parse(raw, &delims)
                .map_err(|e| Error::Malformed(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::KbBuild { triples, out_dir } => {
            let kb = KnowledgeBase::load(&triples)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            kb.write(out_dir.join("kb.tsv"))?;
            let vocab_path = out_dir.join("knowledge_vocab.tsv");
            std::fs::write(&vocab_path, KnowledgeVocab::build(&kb).listing()).map_err(|e| Error::io(&vocab_path, e))?;
            eprintln!("{} knowledge items written to {}", kb.len(), out_dir.display());
            Ok(())
        }
        Command::Match { data, library, k, scheme } => {
            let library = StandardLibrary::load(&library)?;
            let matcher = CandidateMatcher::new(library, scheme.parse::<Scheme>()?)?;
            let mut out = String::new();
            for mention in read_mentions(&data)? {
                out.push_str(&format_candidates(&matcher.candidates_for(&mention.parts, k)?));
            }
            write_stdout(&out)
        }
        Command::Train(args) => {
            let (config, data) = args.load()?;
            let report = train(&config, &data, Some(&args.runs))?;
            write_stdout(&format!(
                "{}: mean accuracy {:.4} over seeds {:?} ({:?}); recall@{} {:.4}\n",
                report.name, report.mean_accuracy, report.seeds, report.accuracies, report.k, report.recall_at_k
            ))
        }
        Command::Evaluate(args) => {
            let (config, data) = args.load()?;
            let candidates = Candidates::compute(&data, config.scheme, config.k_candidates)?;
            let mut out = String::new();
            for seed in &config.seeds {
                let path = args.runs.join(&config.name).join(seed.to_string()).join("checkpoint.json");
                let checkpoint = Checkpoint::load(&path)?;
                let (model, store) = checkpoint.restore()?;
                let acc = evaluate_split(&model, &store, &data.test, &candidates.test, &data.library)?;
                out.push_str(&format!(
                    "seed {seed}\ttest accuracy {acc:.6}\tstored {:.6}\n",
                    checkpoint.result.test_accuracy
                ));
            }
            write_stdout(&out)
        }
        Command::Predict { checkpoint, library, input } => {
            let checkpoint = Checkpoint::load(&checkpoint)?;
            let (model, store) = checkpoint.restore()?;
            let library = StandardLibrary::load(&library)?;
            let matcher = CandidateMatcher::new(library, checkpoint.config.scheme)?;
            let mut out = String::new();
            for mention in read_mentions(&input)? {
                let cands = matcher.candidates_for(&mention.parts, checkpoint.config.k_candidates)?;
                let predicted = model.predict(&store, &mention, &cands, matcher.library())?;
                let merged = if predicted.is_empty() {
                    String::new()
                } else {
                    merge_predictions(&predicted, matcher.library())?
                };
                out.push_str(&format!("{}\t{merged}\n", mention.raw));
            }
            write_stdout(&out)
        }
        Command::Ablate { factor, experiment } => {
            let (config, data) = experiment.load()?;
            let report = match factor {
                Factor::Knowledge => ablate_knowledge(&config, &data, Some(&experiment.runs))?,
                Factor::Template => ablate_templates(&config, &data, Some(&experiment.runs))?,
            };
            let lines: String = report
                .arms
                .iter()
                .map(|a| format!("{}\t{:.6}\n", a.arm, a.report.mean_accuracy))
                .collect();
            write_stdout(&lines)
        }
        Command::Report { runs, out } => {
            let table = collect_reports(&runs)?;
            match out {
                Some(p) => std::fs::write(&p, table).map_err(|e| Error::io(&p, e)),
                None => write_stdout(&table),
            }
        }
        Command::Synth { out_dir, seed, config } => {
            let config = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    SyntheticConfig::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => SyntheticConfig::default(),
            };
            let data = write_synthetic(&config, seed, &out_dir)?;
            eprintln!(
                "wrote {} train / {} dev / {} test mentions and {} terms to {}",
                data.train.len(),
                data.dev.len(),
                data.test.len(),
                data.library.len(),
                out_dir.display()
            );
            Ok(())
        }
    }
}

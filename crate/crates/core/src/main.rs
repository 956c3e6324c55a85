use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use mmrl::corpus::Split;
use mmrl::multitask::Modalities;
use mmrl::pipeline::{self, ExperimentConfig, FeatureKind, RunDir};
use mmrl::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "mmrl", version, about = "Multi-modal article popularity/reliability analysis")]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.max_epochs=2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Group tweets by article and fetch preview titles and images.
    Ingest {
        #[arg(long)]
        tweets: PathBuf,
        #[arg(long)]
        domains: PathBuf,
        /// Page cache directory; defaults to $MMRL_CACHE_DIR.
        #[arg(long)]
        html_cache: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        offline: bool,
    },
    /// Label, balance and split an ingested corpus; fit word embeddings.
    BuildDataset {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the multi-task classifier.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a classifier checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Zero out the inputs not listed, e.g. `image,title`.
        #[arg(long)]
        modalities: Option<String>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train a cross-modal embedder on one domain.
    EmbedTrain {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        domain: String,
        /// Use every article of the domain in this ingest directory instead
        /// of the labeled dataset.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// K-way retrieval accuracy of an embedder on a domain's test split.
    Retrieve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test_domain: String,
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Grad-CAM and SmoothGrad maps for one article.
    Saliency {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: String,
        #[arg(long)]
        task: String,
        #[arg(long)]
        class: String,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Tokens with the largest mean attention per class.
    TokenReport {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// MMD² against sample size within red and/or green articles. `--features`
    /// is a feature file or a dataset directory.
    Mmd {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        domain: Option<String>,
        #[arg(long)]
        kind: String,
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Markdown report over finished runs.
    Report {
        /// Run directories, or directories containing them. Defaults to the
        /// configured output directory.
        #[arg(long = "runs")]
        runs: Vec<PathBuf>,
    },
    /// Write offline ingest fixtures for a synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        articles: usize,
        #[arg(long, default_value_t = 0.2)]
        middle_fraction: f64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::BuildDataset { .. } => "build-dataset",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::EmbedTrain { .. } => "embed-train",
            Command::Retrieve { .. } => "retrieve",
            Command::Saliency { .. } => "saliency",
            Command::TokenReport { .. } => "token-report",
            Command::Mmd { .. } => "mmd",
            Command::Report { .. } => "report",
            Command::Synth { .. } => "synth",
        }
    }
}

fn execute(cmd: Command, mut config: ExperimentConfig, run: &mut RunDir) -> Result<Value> {
    match cmd {
        Command::Ingest { tweets, domains, html_cache, out, offline } => {
            let opts = pipeline::ingest_options(tweets, domains, html_cache, out, offline, &config.ingest)?;
            pipeline::ingest_command(&opts, run)
        }
        Command::BuildDataset { corpus, out } => {
            let corpus = corpus.or_else(|| config.paths.corpus.clone()).ok_or_else(|| Error::config("--corpus or paths.corpus is required"))?;
            pipeline::build_dataset_dir(&corpus, &out, &config, run)
        }
        Command::Train { dataset, out } => pipeline::train_command(&dataset, &out, &config, run),
        Command::Eval { ckpt, split, modalities, dataset } => {
            let split: Split = split.parse()?;
            let modalities: Option<Modalities> = modalities.map(|m| m.parse()).transpose()?;
            pipeline::eval_command(&ckpt, split, modalities, dataset.as_deref(), run)
        }
        Command::EmbedTrain { dataset, domain, corpus, out } => {
            let domain = pipeline::parse_domain(&domain)?;
            pipeline::embed_train_command(&dataset, domain, corpus.as_deref(), &out, &config, run)
        }
        Command::Retrieve { ckpt, test_domain, k, dataset } => {
            let domain = pipeline::parse_domain(&test_domain)?;
            let ks = k.unwrap_or_else(|| config.embed.retrieval.ks.clone());
            pipeline::retrieve_command(&ckpt, domain, &ks, dataset.as_deref(), &config, run)
        }
        Command::Saliency { ckpt, input, task, class, dataset } => {
            let target = pipeline::parse_target(&task, &class)?;
            pipeline::saliency_command(&ckpt, &input, target, dataset.as_deref(), &config, run)
        }
        Command::TokenReport { ckpt, split, dataset } => {
            let split: Split = split.parse()?;
            pipeline::token_report_command(&ckpt, split, dataset.as_deref(), &config, run)
        }
        Command::Mmd { features, domain, kind, n, repeats } => {
            let domain = domain.map(|d| pipeline::parse_domain(&d)).transpose()?;
            let kind: FeatureKind = kind.parse()?;
            if let Some(n) = n {
                config.homogeneity.sample_sizes = n;
            }
            if let Some(r) = repeats {
                config.homogeneity.repeats = r;
            }
            pipeline::mmd_command(&features, domain, kind, &config.homogeneity, run)
        }
        Command::Report { runs } => {
            let runs = if runs.is_empty() { vec![config.paths.output.clone()] } else { runs };
            pipeline::report_command(&runs, run)
        }
        Command::Synth { out, articles, middle_fraction } => {
            pipeline::synth_command(&out, articles, middle_fraction, config.seeds.data, run)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = (|| -> Result<PathBuf> {
        let config = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
        let name = cli.command.name();
        let mut run = RunDir::create(&config, name)?;
        match execute(cli.command, config, &mut run) {
            Ok(metrics) => run.finish(name, metrics),
            Err(e) => {
                let _ = run.abandon(&e);
                Err(e)
            }
        }
    })();
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}

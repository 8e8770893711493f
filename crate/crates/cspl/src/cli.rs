//! Command-line entry points.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use cspl_core::engine::gate;
use cspl_core::sim::{synthetic_suite, SuiteSizes, SyntheticConfig};
use cspl_core::{difficulty_score, rank_by_difficulty, split, DomainTag, ExternalScores, ScoredImage};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::jsonl::{read_dataset, read_detections, read_text, write_dataset, write_text};
use crate::pipeline::{evaluate, run_to_dir, sweep_k, Inputs};
use crate::report::eval_report_to_string;
use crate::serve::Server;
use crate::tables::{manifest_to_string, parse_scores, pr_to_string, scores_to_string, sweep_to_string};
use crate::{jsonl, voc};

#[derive(Debug, Parser)]
#[command(name = "cspl", version, about = "Curriculum self-paced learning for cross-domain object detection")]
pub struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for outputs.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Writes the run transcript, one JSON event per line.
    #[arg(long, global = true)]
    pub transcript: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InputFormat {
    Jsonl,
    Voc,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Domain {
    Source,
    Translated,
    Target,
    TargetTest,
}

impl From<Domain> for DomainTag {
    fn from(d: Domain) -> Self {
        match d {
            Domain::Source => DomainTag::Source,
            Domain::Translated => DomainTag::Translated,
            Domain::Target => DomainTag::Target,
            Domain::TargetTest => DomainTag::TargetTest,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Converts a VOC annotation directory or checks a dataset file, writing
    /// the canonical format.
    Ingest {
        input: PathBuf,
        /// Defaults to voc for directories and jsonl for files.
        #[arg(long, value_enum)]
        format: Option<InputFormat>,
        /// Domain tag for VOC images.
        #[arg(long, value_enum, default_value = "source")]
        domain: Domain,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Scores images from a detection file and lists them easiest first.
    ScoreDifficulty {
        #[arg(long)]
        detections: PathBuf,
        /// Detections below this score are ignored.
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Splits scored images into k batches and writes a manifest.
    Split {
        /// `image_id<TAB>score` file.
        #[arg(long)]
        scores: PathBuf,
        #[arg(short, long, default_value_t = 3)]
        k: usize,
        /// Requires a score for every image of this dataset and drops the rest.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Runs warm-up, self-paced stages, final prediction and evaluation.
    Run,
    /// Scores a detection file against a labelled dataset.
    Evaluate {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Writes `recall<TAB>precision` tables here, one per class.
        #[arg(long)]
        pr_dir: Option<PathBuf>,
    },
    /// Final mAP for a range of batch counts.
    SweepK {
        /// `A..B` (inclusive) or a comma-separated list.
        #[arg(long, default_value = "1..10")]
        k_range: String,
        /// Runs the values of k concurrently.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Writes a seeded synthetic source/translated/target/test suite.
    SimulateDataset {
        #[arg(long, default_value_t = 300)]
        source: usize,
        #[arg(long, default_value_t = 300)]
        target: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
    },
    /// Serves the configured simulator over the stdio backend protocol.
    #[command(hide = true)]
    ServeSim,
}

pub fn parse_k_range(text: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("invalid k range {text:?}"));
    let ks: Vec<usize> = if let Some((a, b)) = text.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
    };
    if ks.is_empty() {
        return Err(bad());
    }
    if ks.contains(&0) {
        return Err(Error::Config("k range contains 0; k must be at least 1".into()));
    }
    Ok(ks)
}

/// `--output`, else `<out-dir>/<default_name>`, else stdout.
fn emit(text: &str, output: Option<&Path>, out_dir: Option<&Path>, default_name: &str) -> Result<()> {
    match (output, out_dir) {
        (Some(p), _) => write_text(p, text),
        (None, Some(dir)) => write_text(&dir.join(default_name), text),
        (None, None) => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli.config.as_deref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.engine.seed = seed;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let out_dir = cli.out_dir.as_deref();
    match &cli.command {
        Command::Ingest { input, format, domain, output } => {
            let format = format.unwrap_or(if input.is_dir() { InputFormat::Voc } else { InputFormat::Jsonl });
            let ds = match format {
                InputFormat::Voc => voc::read_voc_dir(input, (*domain).into())?,
                InputFormat::Jsonl => read_dataset(input)?,
            };
            log::info!("{} images, classes {:?}", ds.len(), ds.class_vocabulary());
            match (output, out_dir) {
                (Some(p), _) => write_dataset(p, &ds),
                (None, Some(dir)) => write_dataset(&dir.join(format!("{}.jsonl", ds.name())), &ds),
                (None, None) => emit(&jsonl::dataset_to_string(&ds), None, None, ""),
            }
        }
        Command::ScoreDifficulty { detections, threshold, output } => {
            let dets = read_detections(detections)?;
            let scored: Vec<ScoredImage> = dets
                .iter()
                .map(|(id, d)| ScoredImage::new(id.clone(), difficulty_score(&gate(d, *threshold))))
                .collect();
            let ranked = rank_by_difficulty(scored)?;
            emit(&scores_to_string(&ranked), output.as_deref(), out_dir, "difficulty.tsv")
        }
        Command::Split { scores, k, dataset, output } => {
            let pairs = parse_scores(&read_text(scores)?).map_err(|e| jsonl::in_file(scores, e))?;
            let scored = match dataset {
                Some(d) => {
                    let ext = ExternalScores::from_pairs(pairs, &read_dataset(d)?)?;
                    if ext.ignored_extra > 0 {
                        log::warn!("ignored {} scores for images outside {}", ext.ignored_extra, d.display());
                    }
                    ext.scored
                }
                None => pairs
                    .into_iter()
                    .map(|(id, v)| {
                        let score = if v == f64::INFINITY {
                            cspl_core::DifficultyScore::Infinite
                        } else {
                            cspl_core::DifficultyScore::finite(v)?
                        };
                        Ok(ScoredImage::new(id, score))
                    })
                    .collect::<Result<_>>()?,
            };
            let batches = split(&rank_by_difficulty(scored)?, *k)?;
            emit(&manifest_to_string(&batches), output.as_deref(), out_dir, "split.tsv")
        }
        Command::Run => {
            let cfg = load_config(&cli)?;
            let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("run"));
            let report = run_to_dir(&cfg, &dir, cli.transcript.as_deref())?;
            if let Some(m) = &report.final_metrics {
                println!("mAP {}", m.mean_ap);
            }
            log::info!("run written to {}", dir.display());
            Ok(())
        }
        Command::Evaluate { detections, ground_truth, output, pr_dir } => {
            let dets = read_detections(detections)?;
            let gt = read_dataset(ground_truth)?;
            let (result, curves) = evaluate(&dets, &gt)?;
            emit(&eval_report_to_string(&result), output.as_deref(), out_dir, "eval_report.jsonl")?;
            if let Some(dir) = pr_dir {
                for c in &curves {
                    write_text(&dir.join(format!("{}.tsv", c.class_name)), &pr_to_string(c))?;
                }
            }
            Ok(())
        }
        Command::SweepK { k_range, parallel, output } => {
            let ks = parse_k_range(k_range)?;
            let cfg = load_config(&cli)?;
            let rows = sweep_k(&cfg, &ks, *parallel)?;
            emit(&sweep_to_string(&rows), output.as_deref(), out_dir, "sweep_k.tsv")
        }
        Command::SimulateDataset { source, target, test } => {
            let dir = out_dir.ok_or_else(|| Error::Config("--out-dir is required".into()))?;
            let seed = cli.seed.unwrap_or(0);
            let sizes = SuiteSizes { source: *source, target: *target, target_test: *test };
            let suite = synthetic_suite(seed, sizes, &SyntheticConfig::default())?;
            write_dataset(&dir.join("source.jsonl"), &suite.source)?;
            write_dataset(&dir.join("translated.jsonl"), &suite.translated)?;
            write_dataset(&dir.join("target.jsonl"), &suite.target.without_annotations())?;
            write_dataset(&dir.join("target_gt.jsonl"), &suite.target)?;
            write_dataset(&dir.join("target_test.jsonl"), &suite.target_test)
        }
        Command::ServeSim => {
            let cfg = load_config(&cli)?;
            let inputs = Inputs::load(&cfg)?;
            let world = inputs.simulator_world()?;
            let sim = inputs.simulator(&cfg)?;
            let mut server = Server::new(sim, &[&world]);
            server
                .serve(io::stdin().lock(), io::stdout().lock())
                .map_err(|e| Error::io("<stdio>", e))
        }
    }
}

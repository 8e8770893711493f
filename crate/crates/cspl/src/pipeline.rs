//! Running configured pipelines and writing run directories.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cspl_core::engine::{PipelineInputs, PseudoLabelSet, TranscriptEvent};
use cspl_core::eval::{match_detections, pr_curve, PrCurve, DEFAULT_IOU_THRESHOLD};
use cspl_core::{
    mean_ap, ApResult, Backend, Dataset, DifficultySource, Engine, ImageRecord, Predictions, RunReport, ScoredImage,
    SimDetector,
};

use crate::config::{BackendConfig, PipelineConfig};
use crate::error::{Error, Result};
use crate::jsonl::{dataset_to_string, detections_to_string, read_dataset, write_text};
use crate::protocol::{ProcessBackend, ProcessOptions};
use crate::report::{eval_report_to_string, run_report_to_string, transcript_to_string};
use crate::tables::{load_external_scores, manifest_to_string, pr_to_string};

/// Every dataset a configuration refers to.
pub struct Inputs {
    pub source: Dataset,
    pub translated: Option<Dataset>,
    pub target: Dataset,
    pub test: Option<Dataset>,
    pub validation: Option<Dataset>,
    pub oracle: Vec<Dataset>,
    pub external_scores: Option<Vec<ScoredImage>>,
}

impl Inputs {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let read = |p: &Path| read_dataset(&cfg.resolve(p));
        let read_opt = |p: &Option<PathBuf>| p.as_deref().map(read).transpose();
        let target = read(&cfg.data.target)?;
        let external_scores = match (&cfg.data.external_scores, cfg.engine.difficulty_source) {
            (Some(p), DifficultySource::ExternalFile) => Some(load_external_scores(&cfg.resolve(p), &target)?.scored),
            (None, DifficultySource::ExternalFile) => {
                return Err(Error::Config("difficulty_source is external_file but data.external_scores is not set".into()))
            }
            _ => None,
        };
        Ok(Self {
            source: read(&cfg.data.source)?,
            translated: read_opt(&cfg.data.translated)?,
            target,
            test: read_opt(&cfg.data.target_test)?,
            validation: read_opt(&cfg.data.validation)?,
            oracle: cfg.simulator.oracle.iter().map(|p| read(p)).collect::<Result<_>>()?,
            external_scores,
        })
    }

    /// One dataset holding every image the simulator may be asked about.
    /// Oracle files come first, so their labelled copies win over the
    /// unlabelled target images with the same ids.
    pub fn simulator_world(&self) -> Result<Dataset> {
        let mut seen = BTreeSet::new();
        let mut images: Vec<ImageRecord> = Vec::new();
        let mut vocabulary: Vec<String> = Vec::new();
        let pipeline = [Some(&self.source), self.translated.as_ref(), Some(&self.target), self.test.as_ref(), self.validation.as_ref()];
        for ds in self.oracle.iter().chain(pipeline.into_iter().flatten()) {
            for c in ds.class_vocabulary() {
                if !vocabulary.contains(c) {
                    vocabulary.push(c.clone());
                }
            }
            for img in ds.images() {
                if seen.insert(img.image_id.clone()) {
                    images.push(img.clone());
                }
            }
        }
        Ok(Dataset::new("world", images, Some(vocabulary))?)
    }

    pub fn simulator(&self, cfg: &PipelineConfig) -> Result<SimDetector> {
        let world = self.simulator_world()?;
        Ok(SimDetector::new(cfg.simulator.params.clone(), cfg.engine.seed, &[&world])?)
    }
}

/// What a run produced, whether or not it finished.
pub struct Execution {
    pub report: RunReport,
    pub transcript: Vec<TranscriptEvent>,
    pub generations: Vec<PseudoLabelSet>,
    pub final_detections: Predictions,
    /// Why the run stopped early.
    pub failure: Option<Error>,
}

/// Runs the configured pipeline in memory. Errors before the engine
/// starts are returned directly; a run that aborts comes back as an
/// [`Execution`] with `failure` set.
pub fn execute(cfg: &PipelineConfig, inputs: &Inputs, wire_log: Option<&Path>) -> Result<Execution> {
    cfg.validate()?;
    match &cfg.backend {
        BackendConfig::Simulator {} => {
            let mut sim = inputs.simulator(cfg)?;
            drive(cfg, inputs, &mut sim)
        }
        BackendConfig::Process { command, args, .. } => {
            let wire_log: Option<Box<dyn Write + Send>> = match wire_log {
                Some(p) => Some(Box::new(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?))),
                None => None,
            };
            let options = ProcessOptions {
                timeout: cfg.timeout(),
                wire_log,
                ..ProcessOptions::default()
            };
            let mut backend = ProcessBackend::spawn(command, args, options)?;
            let out = drive(cfg, inputs, &mut backend);
            backend.shutdown();
            out
        }
    }
}

fn drive(cfg: &PipelineConfig, inputs: &Inputs, backend: &mut dyn Backend) -> Result<Execution> {
    let mut engine = Engine::new(backend, cfg.engine.clone())?.with_fingerprint(cfg.fingerprint());
    if let Some(scores) = &inputs.external_scores {
        engine = engine.with_external_scores(scores);
    }
    let result = engine.run(PipelineInputs {
        source: &inputs.source,
        translated: inputs.translated.as_ref(),
        target: &inputs.target,
        test: inputs.test.as_ref(),
        validation: inputs.validation.as_ref(),
    });
    let transcript = engine.take_transcript();
    let generations = engine.label_generations().to_vec();
    Ok(match result {
        Ok(outcome) => Execution {
            report: outcome.report,
            transcript,
            generations,
            final_detections: outcome.final_detections,
            failure: None,
        },
        Err(aborted) => Execution {
            report: (*aborted.report).clone(),
            transcript,
            generations,
            final_detections: Predictions::new(),
            failure: Some(Error::Aborted(aborted)),
        },
    })
}

/// Per-class AP plus the PR curve of every class with ground truth.
pub fn evaluate(detections: &Predictions, ground_truth: &Dataset) -> Result<(ApResult, Vec<PrCurve>)> {
    let gt = ground_truth.ground_truth();
    let result = mean_ap(detections, &gt, ground_truth.class_vocabulary())?;
    let mut curves = Vec::new();
    for (class, ap) in &result.per_class {
        if ap.is_none() {
            continue;
        }
        let matches = match_detections(detections, &gt, class, DEFAULT_IOU_THRESHOLD)?;
        let num_gt = gt.values().flatten().filter(|g| &g.class_name == class).count();
        curves.push(pr_curve(&matches, num_gt, class)?);
    }
    Ok((result, curves))
}

/// Writes the evaluation report and, when `pr_dir` is given, one
/// `<class>.tsv` PR table per class.
pub fn write_evaluation(report_path: &Path, pr_dir: Option<&Path>, result: &ApResult, curves: &[PrCurve]) -> Result<()> {
    write_text(report_path, &eval_report_to_string(result))?;
    if let Some(dir) = pr_dir {
        for c in curves {
            write_text(&dir.join(format!("{}.tsv", c.class_name)), &pr_to_string(c))?;
        }
    }
    Ok(())
}

fn labels_dataset(set: &PseudoLabelSet, target: &Dataset) -> Result<Dataset> {
    let images = target
        .images()
        .iter()
        .filter_map(|img| {
            set.labels
                .get(&img.image_id)
                .map(|dets| img.clone().with_annotations(dets.iter().map(|d| d.to_label()).collect()))
        })
        .collect();
    Ok(Dataset::new(format!("generation-{:03}", set.generation_index), images, None)?)
}

/// Writes everything needed to audit and replay a run into `out_dir`.
pub fn write_run_dir(out_dir: &Path, cfg: &PipelineConfig, inputs: &Inputs, run: &Execution) -> Result<()> {
    write_text(&out_dir.join("config.toml"), &cfg.to_toml())?;
    write_text(&out_dir.join("fingerprint"), &format!("{}\n", run.report.config_fingerprint))?;
    write_text(&out_dir.join("seed"), &format!("{}\n", run.report.seed))?;
    write_text(&out_dir.join("run_report.json"), &run_report_to_string(&run.report))?;
    for event in &run.transcript {
        if let TranscriptEvent::Split { stage, batches } = event {
            write_text(&out_dir.join("splits").join(format!("stage-{stage}.tsv")), &manifest_to_string(batches))?;
        }
    }
    for set in &run.generations {
        let ds = labels_dataset(set, &inputs.target)?;
        write_text(&out_dir.join("labels").join(format!("{}.jsonl", ds.name())), &dataset_to_string(&ds))?;
    }
    if let Some(test) = &inputs.test {
        if run.failure.is_none() {
            write_text(&out_dir.join("detections.jsonl"), &detections_to_string(&run.final_detections, test))?;
            if run.report.final_metrics.is_some() {
                let (result, curves) = evaluate(&run.final_detections, test)?;
                write_evaluation(&out_dir.join("eval_report.jsonl"), Some(&out_dir.join("pr")), &result, &curves)?;
            }
        }
    }
    Ok(())
}

/// `cspl run`: executes, writes the run directory and the transcript, and
/// returns the report or the abort reason.
pub fn run_to_dir(cfg: &PipelineConfig, out_dir: &Path, transcript: Option<&Path>) -> Result<RunReport> {
    cfg.validate()?;
    let inputs = Inputs::load(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let wire = matches!(cfg.backend, BackendConfig::Process { .. }).then(|| out_dir.join("backend_wire.log"));
    let run = execute(cfg, &inputs, wire.as_deref())?;
    write_run_dir(out_dir, cfg, &inputs, &run)?;
    if let Some(path) = transcript {
        write_text(path, &transcript_to_string(&run.transcript))?;
    }
    match run.failure {
        Some(e) => Err(e),
        None => Ok(run.report),
    }
}

/// Final mAP for each `k`, sharing every other setting. Runs in parallel
/// when `parallel` is set.
pub fn sweep_k(cfg: &PipelineConfig, ks: &[usize], parallel: bool) -> Result<Vec<(usize, f64)>> {
    if !matches!(cfg.backend, BackendConfig::Simulator {}) {
        return Err(Error::Config("sweep-k needs the simulator backend".into()));
    }
    if let Some(k) = ks.iter().find(|&&k| k == 0) {
        return Err(Error::Config(format!("k = {k} is not allowed; k must be at least 1")));
    }
    let inputs = Inputs::load(cfg)?;
    let one = |k: usize| -> Result<(usize, f64)> {
        let mut c = cfg.clone();
        c.engine.k = k;
        let run = execute(&c, &inputs, None)?;
        if let Some(e) = run.failure {
            return Err(e);
        }
        let metric = run
            .report
            .final_metrics
            .ok_or_else(|| Error::Config("sweep-k needs a labelled target_test set".into()))?
            .mean_ap;
        Ok((k, metric))
    };
    if !parallel {
        return ks.iter().map(|&k| one(k)).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = ks.iter().map(|&k| s.spawn(move || one(k))).collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    })
}

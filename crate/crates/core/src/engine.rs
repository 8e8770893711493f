//! The self-paced training loop.
//!
//! A run has three phases. Warm-up trains the detector on labelled source
//! images and their target-styled translations. Self-paced learning then
//! proceeds in `k` stages: at the start of stage `i` the detector labels
//! every target image, the gated labels are scored for difficulty, the
//! target set is split into `k` batches and the detector trains on batches
//! `1..=i`. Labels of the unlocked pool are refreshed every
//! `relabel_every` iterations. Finally the detector predicts the test set.
//!
//! One iteration is one train request carrying one image. Every request
//! and decision is appended to a transcript so that runs can be audited
//! and replayed.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{Backend, LabelSource, Predictions, TrainingExample};
use crate::curriculum::{split, stage_plan, stage_pool, CurriculumBatch};
use crate::difficulty::{difficulty_score, rank_by_difficulty, DifficultyScore, ScoredImage};
use crate::error::{config_err, validation, Error, Result};
use crate::eval::{mean_ap, ApResult};
use crate::model::{Dataset, Detection, DomainTag, ImageRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupMode {
    /// Sample uniformly from source and translated images together.
    #[default]
    Union,
    /// Source images first, then translated images.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultySource {
    /// Score gated pseudo-labels by object count over mean box area.
    #[default]
    Eq1,
    /// Fixed scores supplied with [`Engine::with_external_scores`].
    ExternalFile,
}

/// Algorithm settings. Defaults follow the reference schedule: three
/// batches, 500 self-paced iterations with 50 each for the first two
/// stages, relabelling every 100 iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub k: usize,
    pub total_spl_iterations: u64,
    pub early_stage_iterations: u64,
    pub relabel_every: u64,
    /// Detections with a score at or above this are kept as pseudo-labels.
    pub confidence_threshold: f64,
    pub warmup_enabled: bool,
    pub warmup_iterations: u64,
    pub warmup_mode: WarmupMode,
    /// Include translated images in warm-up.
    pub warmup_use_translated: bool,
    /// Share of warm-up iterations spent on source images in sequential mode.
    pub sequential_source_fraction: f64,
    pub spl_enabled: bool,
    pub resplit_each_stage: bool,
    /// When false, batches are random partitions instead of difficulty
    /// ordered ones.
    pub curriculum_enabled: bool,
    pub difficulty_source: DifficultySource,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            k: 3,
            total_spl_iterations: 500,
            early_stage_iterations: 50,
            relabel_every: 100,
            confidence_threshold: 0.8,
            warmup_enabled: true,
            warmup_iterations: 50_000,
            warmup_mode: WarmupMode::Union,
            warmup_use_translated: true,
            sequential_source_fraction: 0.5,
            spl_enabled: true,
            resplit_each_stage: true,
            curriculum_enabled: true,
            difficulty_source: DifficultySource::Eq1,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        stage_plan(self.k, self.total_spl_iterations, self.early_stage_iterations)?;
        if self.relabel_every == 0 {
            return Err(config_err!("relabel_every must be positive"));
        }
        check_threshold(self.confidence_threshold)?;
        if self.warmup_enabled && self.warmup_iterations == 0 {
            return Err(config_err!("warmup_iterations must be positive"));
        }
        if !(0.0..=1.0).contains(&self.sequential_source_fraction) {
            return Err(config_err!(
                "sequential_source_fraction {} outside [0, 1]",
                self.sequential_source_fraction
            ));
        }
        Ok(())
    }

    /// A stable `key=value;` rendering of every field.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "k={};total_spl_iterations={};early_stage_iterations={};relabel_every={};\
             confidence_threshold={:?};warmup_enabled={};warmup_iterations={};warmup_mode={:?};\
             warmup_use_translated={};sequential_source_fraction={:?};spl_enabled={};\
             resplit_each_stage={};curriculum_enabled={};difficulty_source={:?};seed={};",
            self.k,
            self.total_spl_iterations,
            self.early_stage_iterations,
            self.relabel_every,
            self.confidence_threshold,
            self.warmup_enabled,
            self.warmup_iterations,
            self.warmup_mode,
            self.warmup_use_translated,
            self.sequential_source_fraction,
            self.spl_enabled,
            self.resplit_each_stage,
            self.curriculum_enabled,
            self.difficulty_source,
            self.seed,
        );
        s
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(self.canonical_string().as_bytes())
    }
}

/// Hex SHA-256 of `bytes`.
pub fn fingerprint(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(out, "{b:02x}");
    }
    out
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(config_err!("confidence threshold {threshold} outside (0, 1)"))
    }
}

/// Keeps detections scoring at least `threshold`.
pub fn gate(detections: &[Detection], threshold: f64) -> Vec<Detection> {
    detections
        .iter()
        .filter(|d| d.score() >= threshold)
        .cloned()
        .collect()
}

/// One generation of gated pseudo-labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub generation_index: u64,
    pub labels: BTreeMap<String, Vec<Detection>>,
    pub confidence_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    SelfPaced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictPurpose {
    PseudoLabel,
    Validation,
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelingKind {
    StageStart,
    Relabel,
}

/// An entry in the run transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TranscriptEvent {
    Train {
        phase: Phase,
        /// 1-based within the phase.
        iteration: u64,
        stage: Option<usize>,
        image_ids: Vec<String>,
        label_source: LabelSource,
        /// Pseudo-label generation the labels came from.
        generation: Option<u64>,
    },
    Predict {
        purpose: PredictPurpose,
        image_ids: Vec<String>,
        detections: usize,
    },
    Labels {
        kind: LabelingKind,
        generation: u64,
        stage: usize,
        /// Self-paced iterations completed when the labels were made.
        at_iteration: u64,
        image_count: usize,
        retained: usize,
    },
    Split {
        stage: usize,
        batches: Vec<CurriculumBatch>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupAck {
    pub iterations_run: u64,
    pub distinct_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage_index: usize,
    pub iterations_run: u64,
    pub pool_size: usize,
    /// Global self-paced iterations after which labels were refreshed.
    pub relabel_events: Vec<u64>,
    pub evaluation: Option<ApResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_fingerprint: String,
    pub seed: u64,
    pub warmup: Option<WarmupAck>,
    /// One record per stage; empty when self-paced learning is disabled.
    pub stages: Vec<StageRecord>,
    pub final_metrics: Option<ApResult>,
    pub complete: bool,
    pub error: Option<String>,
}

/// A run that stopped early, with everything recorded up to the failure.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("run aborted: {error}")]
pub struct RunAborted {
    pub report: Box<RunReport>,
    pub error: Error,
}

/// Datasets for a full run. `target` must be unlabelled.
#[derive(Debug, Clone, Copy)]
pub struct PipelineInputs<'a> {
    pub source: &'a Dataset,
    pub translated: Option<&'a Dataset>,
    pub target: &'a Dataset,
    pub test: Option<&'a Dataset>,
    pub validation: Option<&'a Dataset>,
}

pub struct PipelineOutcome {
    pub report: RunReport,
    pub final_detections: Predictions,
}

/// Drives a [`Backend`] through warm-up, self-paced stages and final
/// prediction.
pub struct Engine<B> {
    backend: B,
    config: EngineConfig,
    rng: ChaCha8Rng,
    transcript: Vec<TranscriptEvent>,
    fingerprint: String,
    external: Option<BTreeMap<String, DifficultyScore>>,
    next_generation: u64,
    generations: Vec<PseudoLabelSet>,
}

impl<B: Backend> Engine<B> {
    pub fn new(backend: B, config: EngineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            backend,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            fingerprint: config.fingerprint(),
            config,
            transcript: Vec::new(),
            external: None,
            next_generation: 0,
            generations: Vec::new(),
        })
    }

    /// Replaces the engine-config fingerprint, e.g. with one covering
    /// dataset paths and backend settings too.
    pub fn with_fingerprint(mut self, fingerprint: impl Into<String>) -> Self {
        self.fingerprint = fingerprint.into();
        self
    }

    /// Fixed difficulty scores used when `difficulty_source` is
    /// `external_file`.
    pub fn with_external_scores(mut self, scores: &[ScoredImage]) -> Self {
        self.external = Some(
            scores
                .iter()
                .map(|s| (s.image_id.clone(), s.score))
                .collect(),
        );
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn into_backend(self) -> B {
        self.backend
    }

    pub fn transcript(&self) -> &[TranscriptEvent] {
        &self.transcript
    }

    pub fn take_transcript(&mut self) -> Vec<TranscriptEvent> {
        core::mem::take(&mut self.transcript)
    }

    /// Every pseudo-label generation made so far, oldest first.
    pub fn label_generations(&self) -> &[PseudoLabelSet] {
        &self.generations
    }

    fn train_one(
        &mut self,
        phase: Phase,
        iteration: u64,
        stage: Option<usize>,
        example: TrainingExample,
        generation: Option<u64>,
    ) -> Result<()> {
        self.transcript.push(TranscriptEvent::Train {
            phase,
            iteration,
            stage,
            image_ids: alloc::vec![example.image.image_id.clone()],
            label_source: example.label_source,
            generation,
        });
        self.backend.train(core::slice::from_ref(&example))
    }

    fn predict_one(&mut self, image: &ImageRecord, purpose: PredictPurpose) -> Result<Vec<Detection>> {
        let mut reply = self.backend.predict(core::slice::from_ref(image))?;
        let dets = reply.remove(&image.image_id).ok_or_else(|| {
            Error::Backend(format!("prediction reply is missing image {}", image.image_id))
        })?;
        self.transcript.push(TranscriptEvent::Predict {
            purpose,
            image_ids: alloc::vec![image.image_id.clone()],
            detections: dets.len(),
        });
        Ok(dets)
    }

    /// Trains on labelled source images, plus translated images when the
    /// config allows, for `warmup_iterations` single-image requests.
    pub fn warmup(&mut self, source: &Dataset, translated: Option<&Dataset>) -> Result<WarmupAck> {
        let iterations = self.config.warmup_iterations;
        if iterations == 0 {
            return Err(config_err!("warmup_iterations must be positive"));
        }
        let translated = translated.filter(|_| self.config.warmup_use_translated);
        if let Some(tr) = translated {
            for img in tr.images() {
                if img.domain_tag != DomainTag::Translated {
                    return Err(validation!("image {} in the translated set is tagged {}", img.image_id, img.domain_tag.as_str()));
                }
                if img.annotations.is_empty() {
                    return Err(validation!("translated image {} has no inherited annotations", img.image_id));
                }
            }
        }
        let src: Vec<&ImageRecord> = source.images().iter().collect();
        let tr: Vec<&ImageRecord> = translated.map(|t| t.images().iter().collect()).unwrap_or_default();
        if src.is_empty() && tr.is_empty() {
            return Err(validation!("warm-up needs at least one labelled image"));
        }

        let mut seen = alloc::collections::BTreeSet::new();
        let source_steps = match self.config.warmup_mode {
            WarmupMode::Union => 0,
            WarmupMode::Sequential if tr.is_empty() => iterations,
            WarmupMode::Sequential if src.is_empty() => 0,
            WarmupMode::Sequential => {
                libm::round(iterations as f64 * self.config.sequential_source_fraction) as u64
            }
        };
        for it in 1..=iterations {
            let image = match self.config.warmup_mode {
                WarmupMode::Union => {
                    let i = self.rng.random_range(0..src.len() + tr.len());
                    if i < src.len() { src[i] } else { tr[i - src.len()] }
                }
                WarmupMode::Sequential if it <= source_steps => src[self.rng.random_range(0..src.len())],
                WarmupMode::Sequential => tr[self.rng.random_range(0..tr.len())],
            };
            seen.insert(image.image_id.clone());
            let example = TrainingExample::from_annotated(image);
            self.train_one(Phase::Warmup, it, None, example, None)?;
        }
        Ok(WarmupAck {
            iterations_run: iterations,
            distinct_images: seen.len(),
        })
    }

    /// Predicts every image in `pool`, one request each, and keeps
    /// detections scoring at least `threshold`.
    pub fn generate_pseudo_labels(
        &mut self,
        pool: &[&ImageRecord],
        threshold: f64,
    ) -> Result<PseudoLabelSet> {
        check_threshold(threshold)?;
        let mut labels = BTreeMap::new();
        for img in pool {
            let dets = self.predict_one(img, PredictPurpose::PseudoLabel)?;
            labels.insert(img.image_id.clone(), gate(&dets, threshold));
        }
        let generation_index = self.next_generation;
        self.next_generation += 1;
        let set = PseudoLabelSet {
            generation_index,
            labels,
            confidence_threshold: threshold,
        };
        self.generations.push(set.clone());
        Ok(set)
    }

    fn rank(&mut self, target: &Dataset, labels: &BTreeMap<String, Vec<Detection>>) -> Result<Vec<ScoredImage>> {
        let scored: Vec<ScoredImage> = match self.config.difficulty_source {
            DifficultySource::Eq1 => target
                .images()
                .iter()
                .map(|img| {
                    let dets = labels.get(&img.image_id).map(Vec::as_slice).unwrap_or(&[]);
                    ScoredImage::new(img.image_id.clone(), difficulty_score(dets))
                })
                .collect(),
            DifficultySource::ExternalFile => {
                let ext = self
                    .external
                    .as_ref()
                    .ok_or_else(|| config_err!("difficulty_source is external_file but no scores were loaded"))?;
                target
                    .images()
                    .iter()
                    .map(|img| {
                        ext.get(&img.image_id)
                            .map(|&s| ScoredImage::new(img.image_id.clone(), s))
                            .ok_or_else(|| validation!("no external score for image {}", img.image_id))
                    })
                    .collect::<Result<_>>()?
            }
        };
        let mut ranked = rank_by_difficulty(scored)?;
        if !self.config.curriculum_enabled {
            ranked.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            ranked.shuffle(&mut self.rng);
        }
        Ok(ranked)
    }

    fn evaluate(&mut self, dataset: &Dataset) -> Result<Option<ApResult>> {
        if dataset.class_vocabulary().is_empty() || !dataset.has_annotations() {
            return Ok(None);
        }
        let mut preds = BTreeMap::new();
        for img in dataset.images() {
            let dets = self.predict_one(img, PredictPurpose::Validation)?;
            preds.insert(img.image_id.clone(), dets);
        }
        mean_ap(&preds, &dataset.ground_truth(), dataset.class_vocabulary()).map(Some)
    }

    fn empty_report(&self) -> RunReport {
        RunReport {
            config_fingerprint: self.fingerprint.clone(),
            seed: self.config.seed,
            warmup: None,
            stages: Vec::new(),
            final_metrics: None,
            complete: false,
            error: None,
        }
    }

    /// The `k`-stage self-paced loop over the unlabelled `target` set.
    pub fn run_curriculum_spl(
        &mut self,
        target: &Dataset,
        validation: Option<&Dataset>,
    ) -> Result<RunReport, RunAborted> {
        let mut report = self.empty_report();
        match self.spl_stages(target, validation, &mut report.stages) {
            Ok(()) => {
                report.complete = true;
                Ok(report)
            }
            Err(error) => {
                report.error = Some(format!("{error}"));
                Err(RunAborted {
                    report: Box::new(report),
                    error,
                })
            }
        }
    }

    fn spl_stages(
        &mut self,
        target: &Dataset,
        validation: Option<&Dataset>,
        records: &mut Vec<StageRecord>,
    ) -> Result<()> {
        if let Some(img) = target.images().iter().find(|img| !img.annotations.is_empty()) {
            return Err(validation!("target image {} carries annotations; target data must be unlabelled", img.image_id));
        }
        let cfg = self.config.clone();
        let plan = stage_plan(cfg.k, cfg.total_spl_iterations, cfg.early_stage_iterations)?;
        if target.len() < cfg.k {
            return Err(validation!("cannot split {} target images into {} batches", target.len(), cfg.k));
        }
        let all: Vec<&ImageRecord> = target.images().iter().collect();
        let mut labels: BTreeMap<String, Vec<Detection>>;
        let mut label_generation: BTreeMap<String, u64> = BTreeMap::new();
        let mut batches: Option<Vec<CurriculumBatch>> = None;
        let mut global = 0u64;

        for stage in &plan {
            let i = stage.stage_index;
            let set = self.generate_pseudo_labels(&all, cfg.confidence_threshold)?;
            self.transcript.push(TranscriptEvent::Labels {
                kind: LabelingKind::StageStart,
                generation: set.generation_index,
                stage: i,
                at_iteration: global,
                image_count: all.len(),
                retained: set.labels.values().map(Vec::len).sum(),
            });
            for id in set.labels.keys() {
                label_generation.insert(id.clone(), set.generation_index);
            }
            labels = set.labels;

            if cfg.resplit_each_stage || batches.is_none() {
                let ranked = self.rank(target, &labels)?;
                let b = split(&ranked, cfg.k)?;
                self.transcript.push(TranscriptEvent::Split {
                    stage: i,
                    batches: b.clone(),
                });
                batches = Some(b);
            }
            let pool_ids = stage_pool(batches.as_deref().unwrap_or_default(), i);
            let pool: Vec<&ImageRecord> = pool_ids
                .iter()
                .map(|id| target.get(id).ok_or_else(|| validation!("unknown image {id}")))
                .collect::<Result<_>>()?;

            let mut record = StageRecord {
                stage_index: i,
                iterations_run: 0,
                pool_size: pool.len(),
                relabel_events: Vec::new(),
                evaluation: None,
            };
            let mut order: Vec<usize> = Vec::new();
            let mut cursor = 0;
            for _ in 0..stage.iterations {
                if cursor == order.len() {
                    order = (0..pool.len()).collect();
                    order.shuffle(&mut self.rng);
                    cursor = 0;
                }
                let image = pool[order[cursor]];
                cursor += 1;
                let dets = labels.get(&image.image_id).map(Vec::as_slice).unwrap_or(&[]);
                let example = TrainingExample::pseudo(image, dets);
                let generation = label_generation.get(&image.image_id).copied();
                global += 1;
                let res = self.train_one(Phase::SelfPaced, global, Some(i), example, generation);
                if let Err(e) = res {
                    records.push(record);
                    return Err(e);
                }
                record.iterations_run += 1;

                if global.is_multiple_of(cfg.relabel_every) && global < cfg.total_spl_iterations {
                    let refreshed = match self.generate_pseudo_labels(&pool, cfg.confidence_threshold) {
                        Ok(set) => set,
                        Err(e) => {
                            records.push(record);
                            return Err(e);
                        }
                    };
                    self.transcript.push(TranscriptEvent::Labels {
                        kind: LabelingKind::Relabel,
                        generation: refreshed.generation_index,
                        stage: i,
                        at_iteration: global,
                        image_count: pool.len(),
                        retained: refreshed.labels.values().map(Vec::len).sum(),
                    });
                    for (id, dets) in refreshed.labels {
                        label_generation.insert(id.clone(), refreshed.generation_index);
                        labels.insert(id, dets);
                    }
                    record.relabel_events.push(global);
                }
            }
            if let Some(val) = validation {
                match self.evaluate(val) {
                    Ok(ev) => record.evaluation = ev,
                    Err(e) => {
                        records.push(record);
                        return Err(e);
                    }
                }
            }
            records.push(record);
        }
        Ok(())
    }

    /// Ungated detections for every test image, one request each.
    pub fn final_predict(&mut self, test: &Dataset) -> Result<Predictions> {
        if let Some(img) = test.images().iter().find(|i| i.domain_tag != DomainTag::TargetTest) {
            return Err(validation!("test image {} is tagged {}, expected target_test", img.image_id, img.domain_tag.as_str()));
        }
        let mut out = BTreeMap::new();
        for img in test.images() {
            let dets = self.predict_one(img, PredictPurpose::Final)?;
            out.insert(img.image_id.clone(), dets);
        }
        Ok(out)
    }

    /// Warm-up, self-paced stages and final prediction with evaluation, as
    /// switched on in the config.
    pub fn run(&mut self, inputs: PipelineInputs<'_>) -> Result<PipelineOutcome, RunAborted> {
        let mut report = self.empty_report();
        let abort = |mut report: RunReport, error: Error| {
            report.error = Some(format!("{error}"));
            RunAborted {
                report: Box::new(report),
                error,
            }
        };
        if self.config.warmup_enabled {
            match self.warmup(inputs.source, inputs.translated) {
                Ok(ack) => report.warmup = Some(ack),
                Err(e) => return Err(abort(report, e)),
            }
        }
        if self.config.spl_enabled {
            match self.run_curriculum_spl(inputs.target, inputs.validation) {
                Ok(spl) => report.stages = spl.stages,
                Err(aborted) => {
                    report.stages = aborted.report.stages;
                    return Err(abort(report, aborted.error));
                }
            }
        }
        let mut final_detections = BTreeMap::new();
        if let Some(test) = inputs.test {
            final_detections = match self.final_predict(test) {
                Ok(p) => p,
                Err(e) => return Err(abort(report, e)),
            };
            if test.has_annotations() && !test.class_vocabulary().is_empty() {
                match mean_ap(&final_detections, &test.ground_truth(), test.class_vocabulary()) {
                    Ok(m) => report.final_metrics = Some(m),
                    Err(e) => return Err(abort(report, e)),
                }
            }
        }
        report.complete = true;
        Ok(PipelineOutcome {
            report,
            final_detections,
        })
    }
}

/// Splits a labelled set into `k` difficulty batches using gated
/// `predictions` and reports the AP of those predictions on each batch.
pub fn per_batch_ap(
    predictions: &Predictions,
    labelled: &Dataset,
    k: usize,
    threshold: f64,
) -> Result<Vec<(CurriculumBatch, ApResult)>> {
    check_threshold(threshold)?;
    let scored = labelled
        .images()
        .iter()
        .map(|img| {
            let dets = predictions.get(&img.image_id).map(Vec::as_slice).unwrap_or(&[]);
            ScoredImage::new(img.image_id.clone(), difficulty_score(&gate(dets, threshold)))
        })
        .collect();
    let batches = split(&rank_by_difficulty(scored)?, k)?;
    batches
        .into_iter()
        .map(|batch| {
            let subset = labelled.subset(labelled.name(), &batch.image_ids)?;
            let preds: Predictions = batch
                .image_ids
                .iter()
                .map(|id| (id.clone(), predictions.get(id).cloned().unwrap_or_default()))
                .collect();
            let ap = mean_ap(&preds, &subset.ground_truth(), labelled.class_vocabulary())?;
            Ok((batch, ap))
        })
        .collect()
}

//! A seeded simulated detector and synthetic datasets.
//!
//! The simulator holds the ground truth of every image it may be asked
//! about and a scalar skill per domain. Its errors are coupled to image
//! difficulty: objects in hard images are missed more often and found with
//! lower confidence, while spurious boxes in hard images score higher.
//! Training moves skill up in proportion to the fraction of supplied labels
//! that are correct and down in proportion to the wrong ones, so learning
//! from noisy pseudo-labels hurts.
//!
//! Randomness: every prediction draws from a ChaCha8 stream keyed by the
//! detector seed, the number of train calls so far and the image id. Draws
//! are taken in a fixed order: for each ground-truth object a detection
//! uniform, four jitter normals and a score normal (always drawn, used
//! only if the object is emitted); then the false-positive count, and for
//! each false positive class, reference object, area, aspect ratio, position
//! and score.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{Backend, Predictions, TrainingExample};
use crate::difficulty::{difficulty_of_boxes, rank_by_difficulty, ScoredImage};
use crate::engine::{
    Engine, EngineConfig, PipelineInputs, PipelineOutcome, RunAborted, RunReport, TranscriptEvent,
};
use crate::error::{validation, Result};
use crate::geom::{iou, BoundingBox};
use crate::model::{Dataset, Detection, DomainTag, GroundTruthObject, ImageRecord};

/// Simulator knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    /// How strongly normalised difficulty suppresses detection.
    pub miss_coupling: f64,
    /// Box corruption scale as a fraction of box size, at zero skill.
    pub jitter: f64,
    /// Expected spurious boxes per image at zero skill.
    pub fp_rate: f64,
    pub learn_rate: f64,
    /// Skill lost per unit of wrong-label fraction.
    pub noise_penalty: f64,
    /// Initial target-skill deficit relative to source skill.
    pub domain_gap: f64,
    pub initial_skill: f64,
    /// Learning-rate multiplier for target skill from source images.
    pub source_transfer: f64,
    /// Learning-rate multiplier for target skill from translated images.
    pub translated_discount: f64,
    /// Standard deviation of detection scores.
    pub score_noise: f64,
    /// Mean score of a true detection is
    /// `score_base + score_skill_gain * skill - score_difficulty_drop * d`.
    pub score_base: f64,
    pub score_skill_gain: f64,
    pub score_difficulty_drop: f64,
    /// Mean score of a spurious box is
    /// `fp_score_base + fp_score_difficulty_gain * d`.
    pub fp_score_base: f64,
    pub fp_score_difficulty_gain: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            miss_coupling: 0.5,
            jitter: 0.3,
            fp_rate: 3.0,
            learn_rate: 0.004,
            noise_penalty: 0.006,
            domain_gap: 0.25,
            initial_skill: 0.5,
            source_transfer: 0.5,
            translated_discount: 0.8,
            score_noise: 0.1,
            score_base: 0.6,
            score_skill_gain: 0.4,
            score_difficulty_drop: 0.25,
            fp_score_base: 0.35,
            fp_score_difficulty_gain: 0.35,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("miss_coupling", self.miss_coupling),
            ("jitter", self.jitter),
            ("fp_rate", self.fp_rate),
            ("noise_penalty", self.noise_penalty),
            ("source_transfer", self.source_transfer),
            ("translated_discount", self.translated_discount),
            ("score_noise", self.score_noise),
            ("score_skill_gain", self.score_skill_gain),
            ("score_difficulty_drop", self.score_difficulty_drop),
            ("fp_score_difficulty_gain", self.fp_score_difficulty_gain),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(validation!("sim parameter {name} = {v} must be >= 0"));
            }
        }
        if !(self.learn_rate.is_finite() && self.learn_rate > 0.0) {
            return Err(validation!("sim parameter learn_rate = {} must be > 0", self.learn_rate));
        }
        for (name, v) in [("domain_gap", self.domain_gap), ("initial_skill", self.initial_skill)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(validation!("sim parameter {name} = {v} must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Skills {
    pub source: f64,
    pub target: f64,
}

#[derive(Debug, Clone)]
struct OracleImage {
    domain: DomainTag,
    width: u32,
    height: u32,
    objects: Vec<GroundTruthObject>,
    /// Rank percentile of ground-truth difficulty within the domain, 0 = easiest.
    difficulty: f64,
}

/// Deterministic simulated detector.
#[derive(Debug, Clone)]
pub struct SimDetector {
    params: SimParams,
    seed: u64,
    skills: Skills,
    train_calls: u64,
    classes: Vec<String>,
    oracle: BTreeMap<String, OracleImage>,
}

fn domain_group(tag: DomainTag) -> u8 {
    match tag {
        DomainTag::Source | DomainTag::Translated => 0,
        DomainTag::Target | DomainTag::TargetTest => 1,
    }
}

impl SimDetector {
    /// Builds a detector that knows the ground truth of every image in
    /// `datasets`. Image ids must be unique across them.
    pub fn new(params: SimParams, seed: u64, datasets: &[&Dataset]) -> Result<Self> {
        params.validate()?;
        let mut oracle = BTreeMap::new();
        let mut classes: Vec<String> = Vec::new();
        for ds in datasets {
            for c in ds.class_vocabulary() {
                if !classes.contains(c) {
                    classes.push(c.clone());
                }
            }
            for img in ds.images() {
                let entry = OracleImage {
                    domain: img.domain_tag,
                    width: img.width,
                    height: img.height,
                    objects: img.annotations.clone(),
                    difficulty: 0.0,
                };
                if oracle.insert(img.image_id.clone(), entry).is_some() {
                    return Err(validation!("image {} appears twice in the simulator oracle", img.image_id));
                }
            }
        }
        if classes.is_empty() {
            classes.push("object".into());
        }
        for group in [0u8, 1] {
            let scored: Vec<ScoredImage> = oracle
                .iter()
                .filter(|(_, o)| domain_group(o.domain) == group)
                .map(|(id, o)| ScoredImage::new(id.clone(), difficulty_of_boxes(o.objects.iter().map(|g| &g.bbox))))
                .collect();
            let m = scored.len();
            for (rank, s) in rank_by_difficulty(scored)?.into_iter().enumerate() {
                let pct = if m > 1 { rank as f64 / (m - 1) as f64 } else { 0.0 };
                if let Some(o) = oracle.get_mut(&s.image_id) {
                    o.difficulty = pct;
                }
            }
        }
        let skills = Skills {
            source: params.initial_skill,
            target: params.initial_skill * (1.0 - params.domain_gap),
        };
        Ok(Self {
            params,
            seed,
            skills,
            train_calls: 0,
            classes,
            oracle,
        })
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn skills(&self) -> Skills {
        self.skills
    }

    pub fn set_skills(&mut self, skills: Skills) {
        self.skills = Skills {
            source: skills.source.clamp(0.0, 1.0),
            target: skills.target.clamp(0.0, 1.0),
        };
    }

    pub fn train_calls(&self) -> u64 {
        self.train_calls
    }

    /// Normalised ground-truth difficulty of an image in `[0, 1]`.
    pub fn normalized_difficulty(&self, image_id: &str) -> Option<f64> {
        self.oracle.get(image_id).map(|o| o.difficulty)
    }

    fn skill_for(&self, domain: DomainTag) -> f64 {
        match domain {
            DomainTag::Source => self.skills.source,
            _ => self.skills.target,
        }
    }

    fn stream(&self, image_id: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(self.train_calls.to_le_bytes());
        h.update(image_id.as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }

    /// Detections for one image under the current skill.
    pub fn sim_predict(&self, image_id: &str) -> Result<Vec<Detection>> {
        let img = self
            .oracle
            .get(image_id)
            .ok_or_else(|| validation!("simulator has no ground truth for image {image_id}"))?;
        let p = &self.params;
        let skill = self.skill_for(img.domain);
        let d = img.difficulty;
        let mut rng = self.stream(image_id);
        let (width, height) = (f64::from(img.width), f64::from(img.height));

        let detect_prob = (skill * (1.0 - p.miss_coupling * d)).clamp(0.0, 1.0);
        let spread = (1.0 - skill) * p.jitter;
        let tp_mean = p.score_base + p.score_skill_gain * skill - p.score_difficulty_drop * d;
        let mut out = Vec::new();
        for obj in &img.objects {
            let u: f64 = rng.random();
            let jit: [f64; 4] = [
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ];
            let z: f64 = StandardNormal.sample(&mut rng);
            if u >= detect_prob {
                continue;
            }
            let b = obj.bbox;
            let w = (b.w() * (1.0 + spread * jit[2])).max(1.0);
            let h = (b.h() * (1.0 + spread * jit[3])).max(1.0);
            let cx = b.x() + b.w() / 2.0 + spread * jit[0] * b.w();
            let cy = b.y() + b.h() / 2.0 + spread * jit[1] * b.h();
            let Some(bbox) = clip_box(cx - w / 2.0, cy - h / 2.0, w, h, width, height) else {
                continue;
            };
            let score = (tp_mean + p.score_noise * z).clamp(0.0, 1.0);
            out.push(Detection::new(obj.class_name.clone(), bbox, score)?);
        }

        let fp_mean = p.fp_rate * (1.0 - skill);
        let fp_count = if fp_mean > 0.0 {
            let poisson = Poisson::new(fp_mean).map_err(|e| validation!("poisson mean {fp_mean}: {e}"))?;
            poisson.sample(&mut rng) as usize
        } else {
            0
        };
        let fp_score_mean = p.fp_score_base + p.fp_score_difficulty_gain * d;
        for _ in 0..fp_count {
            let class = &self.classes[rng.random_range(0..self.classes.len())];
            // spurious boxes look like the image's own objects
            let pick = rng.random_range(0..img.objects.len().max(1));
            let area = match img.objects.get(pick) {
                Some(o) => o.bbox.area() * log_uniform(&mut rng, 0.5, 2.0),
                None => log_uniform(&mut rng, 256.0, 25_600.0),
            };
            let aspect = log_uniform(&mut rng, 0.5, 2.0);
            let w = libm::sqrt(area * aspect).min(width);
            let h = (area / w).min(height);
            let x = rng.random::<f64>() * (width - w);
            let y = rng.random::<f64>() * (height - h);
            let z: f64 = StandardNormal.sample(&mut rng);
            let Some(bbox) = clip_box(x, y, w, h, width, height) else {
                continue;
            };
            let score = (fp_score_mean + p.score_noise * z).clamp(0.0, 1.0);
            out.push(Detection::new(class.clone(), bbox, score)?);
        }
        Ok(out)
    }

    /// Fraction of labels that match an unused ground-truth object of the
    /// same class at IoU >= 0.5, or `None` when there are no labels.
    pub fn label_precision(&self, image_id: &str, labels: &[GroundTruthObject]) -> Result<Option<f64>> {
        let (correct, total) = self.count_correct(image_id, labels)?;
        Ok((total > 0).then(|| correct as f64 / total as f64))
    }

    fn count_correct(&self, image_id: &str, labels: &[GroundTruthObject]) -> Result<(usize, usize)> {
        let img = self
            .oracle
            .get(image_id)
            .ok_or_else(|| validation!("simulator has no ground truth for image {image_id}"))?;
        let mut used = vec![false; img.objects.len()];
        let mut correct = 0;
        for label in labels {
            let best = img
                .objects
                .iter()
                .enumerate()
                .filter(|(g, gt)| !used[*g] && gt.class_name == label.class_name)
                .map(|(g, gt)| (g, iou(&label.bbox, &gt.bbox)))
                .fold(None, |acc: Option<(usize, f64)>, (g, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((g, v)),
                });
            if let Some((g, v)) = best {
                if v >= 0.5 {
                    used[g] = true;
                    correct += 1;
                }
            }
        }
        Ok((correct, labels.len()))
    }

    fn step(&self, skill: f64, q: f64, rate_scale: f64, ceiling: f64) -> f64 {
        let p = &self.params;
        let gain = p.learn_rate * rate_scale * q * (ceiling - skill).max(0.0);
        let loss = p.noise_penalty * rate_scale * (1.0 - q) * skill;
        (skill + gain - loss).clamp(0.0, 1.0)
    }

    /// Updates skill from one batch of examples.
    ///
    /// With `q` the fraction of correct labels, in-domain skill moves by
    /// `learn_rate * q * (1 - skill) - noise_penalty * (1 - q) * skill`.
    /// Source images also teach target skill at `source_transfer` up to a
    /// ceiling of `1 - domain_gap`; translated images teach target skill at
    /// `translated_discount` up to `1 - domain_gap / 2`. Examples without
    /// labels leave skill unchanged.
    pub fn sim_train(&mut self, examples: &[TrainingExample]) -> Result<()> {
        if examples.is_empty() {
            return Err(validation!("training request with no examples"));
        }
        // per domain: (correct, total)
        let mut tally = [(0usize, 0usize); 3];
        for ex in examples {
            let (c, t) = self.count_correct(&ex.image.image_id, &ex.labels)?;
            let domain = self.oracle[&ex.image.image_id].domain;
            let slot = match domain {
                DomainTag::Source => 0,
                DomainTag::Translated => 1,
                DomainTag::Target | DomainTag::TargetTest => 2,
            };
            tally[slot].0 += c;
            tally[slot].1 += t;
        }
        let gap = self.params.domain_gap;
        let q = |(c, t): (usize, usize)| (t > 0).then(|| c as f64 / t as f64);
        if let Some(q) = q(tally[0]) {
            self.skills.source = self.step(self.skills.source, q, 1.0, 1.0);
            self.skills.target = self.step(self.skills.target, q, self.params.source_transfer, 1.0 - gap);
        }
        if let Some(q) = q(tally[1]) {
            self.skills.target =
                self.step(self.skills.target, q, self.params.translated_discount, 1.0 - gap / 2.0);
        }
        if let Some(q) = q(tally[2]) {
            self.skills.target = self.step(self.skills.target, q, 1.0, 1.0);
        }
        self.train_calls += 1;
        Ok(())
    }
}

impl Backend for SimDetector {
    fn train(&mut self, examples: &[TrainingExample]) -> Result<()> {
        self.sim_train(examples)
    }

    fn predict(&mut self, images: &[ImageRecord]) -> Result<Predictions> {
        images
            .iter()
            .map(|img| Ok((img.image_id.clone(), self.sim_predict(&img.image_id)?)))
            .collect()
    }
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    let t: f64 = rng.random();
    libm::exp(libm::log(lo) + t * (libm::log(hi) - libm::log(lo)))
}

fn clip_box(x: f64, y: f64, w: f64, h: f64, width: f64, height: f64) -> Option<BoundingBox> {
    let x0 = x.clamp(0.0, width);
    let y0 = y.clamp(0.0, height);
    let x1 = (x + w).clamp(0.0, width);
    let y1 = (y + h).clamp(0.0, height);
    if x1 - x0 < 1.0 || y1 - y0 < 1.0 {
        return None;
    }
    BoundingBox::new(x0, y0, x1 - x0, y1 - y0).ok()
}

/// Shape of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub width: u32,
    pub height: u32,
    pub classes: Vec<String>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Scene scales are log-uniform between these, in square pixels.
    pub min_area: f64,
    pub max_area: f64,
    /// Object areas vary by up to this factor around the scene scale.
    pub scene_spread: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            classes: vec!["car".into()],
            min_objects: 1,
            max_objects: 12,
            min_area: 256.0,
            max_area: 25_600.0,
            scene_spread: 2.0,
        }
    }
}

/// Generates `count` annotated images with ids `{prefix}{index:05}`.
pub fn synthetic_dataset(
    name: &str,
    prefix: &str,
    domain: DomainTag,
    count: usize,
    cfg: &SyntheticConfig,
    rng: &mut impl Rng,
) -> Result<Dataset> {
    if cfg.classes.is_empty() || cfg.min_objects > cfg.max_objects || cfg.min_area <= 0.0 || cfg.max_area < cfg.min_area || cfg.scene_spread < 1.0 {
        return Err(validation!("invalid synthetic dataset configuration"));
    }
    let (width, height) = (f64::from(cfg.width), f64::from(cfg.height));
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("{prefix}{i:05}");
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
        // objects in one scene share a scale
        let scene_area = log_uniform(rng, cfg.min_area, cfg.max_area);
        let mut objects = Vec::with_capacity(n);
        for _ in 0..n {
            let class = &cfg.classes[rng.random_range(0..cfg.classes.len())];
            let spread = log_uniform(rng, 1.0 / cfg.scene_spread, cfg.scene_spread);
            let area = (scene_area * spread).clamp(cfg.min_area, cfg.max_area);
            let aspect = log_uniform(rng, 0.5, 2.0);
            let w = libm::round(libm::sqrt(area * aspect)).clamp(2.0, width);
            let h = libm::round(area / w).clamp(2.0, height);
            let x = libm::floor(rng.random::<f64>() * (width - w + 1.0)).min(width - w);
            let y = libm::floor(rng.random::<f64>() * (height - h + 1.0)).min(height - h);
            objects.push(GroundTruthObject::new(class.clone(), BoundingBox::new(x, y, w, h)?)?);
        }
        let path = format!("{}/{id}.jpg", domain.as_str());
        images.push(ImageRecord::new(id, cfg.width, cfg.height, path, domain).with_annotations(objects));
    }
    Dataset::new(name, images, Some(cfg.classes.clone()))
}

/// Source, translated, target and test sets for a simulated run. The
/// target set keeps its annotations here; strip them before handing it to
/// the engine.
#[derive(Debug, Clone)]
pub struct SyntheticSuite {
    pub source: Dataset,
    pub translated: Dataset,
    pub target: Dataset,
    pub target_test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSizes {
    pub source: usize,
    pub target: usize,
    pub target_test: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        Self {
            source: 300,
            target: 300,
            target_test: 200,
        }
    }
}

pub fn synthetic_suite(seed: u64, sizes: SuiteSizes, cfg: &SyntheticConfig) -> Result<SyntheticSuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = synthetic_dataset("source", "src", DomainTag::Source, sizes.source, cfg, &mut rng)?;
    let target = synthetic_dataset("target", "tgt", DomainTag::Target, sizes.target, cfg, &mut rng)?;
    let target_test = synthetic_dataset("target_test", "test", DomainTag::TargetTest, sizes.target_test, cfg, &mut rng)?;
    let translated = translate(&source)?;
    Ok(SyntheticSuite {
        source,
        translated,
        target,
        target_test,
    })
}

/// Stand-in for image translation: same boxes, new ids, translated tag.
pub fn translate(source: &Dataset) -> Result<Dataset> {
    let images = source
        .images()
        .iter()
        .map(|img| {
            let id = format!("tr-{}", img.image_id);
            ImageRecord::new(id.clone(), img.width, img.height, format!("translated/{id}.jpg"), DomainTag::Translated)
                .with_annotations(img.annotations.clone())
        })
        .collect();
    Dataset::new("translated", images, Some(source.class_vocabulary().to_vec()))
}

/// Runs the whole pipeline against a fresh simulator built from `suite`.
/// The simulator shares the engine seed.
pub fn run_simulated(
    suite: &SyntheticSuite,
    params: &SimParams,
    config: EngineConfig,
) -> core::result::Result<(PipelineOutcome, Vec<TranscriptEvent>, Skills), RunAborted> {
    let seed = config.seed;
    let to_abort = |error: crate::Error| RunAborted {
        report: alloc::boxed::Box::new(RunReport {
            config_fingerprint: config.fingerprint(),
            seed,
            warmup: None,
            stages: Vec::new(),
            final_metrics: None,
            complete: false,
            error: Some(format!("{error}")),
        }),
        error,
    };
    let mut sim = SimDetector::new(
        params.clone(),
        seed,
        &[&suite.source, &suite.translated, &suite.target, &suite.target_test],
    )
    .map_err(to_abort)?;
    let target = suite.target.without_annotations();
    let mut engine = Engine::new(&mut sim, config.clone()).map_err(to_abort)?;
    let outcome = engine.run(PipelineInputs {
        source: &suite.source,
        translated: Some(&suite.translated),
        target: &target,
        test: Some(&suite.target_test),
        validation: None,
    })?;
    let transcript = engine.take_transcript();
    drop(engine);
    Ok((outcome, transcript, sim.skills()))
}

//! Seeded simulation: synthetic scenes with planted defects, stochastic
//! stand-ins for every backend, and the episode / training / ablation
//! harness for the iteration controller.
//!
//! RNG streams (ChaCha8, `set_stream`): scenes 0, defect planting 1,
//! supervisor 2, boxgen 3, verifier 4, controller exploration 5,
//! density mix 6. Backend draws use a fresh generator per call, keyed by
//! the image handle and a per-role call counter, so results do not depend
//! on how crops are scheduled across threads.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{
    parts, BackendRequest, BackendResponse, ModelBackend, Role, RoleSet, Usage, VerifierScorer, VerifierSettings,
};
use crate::airc::{
    lock, shared, Action, AdaptiveController, ControllerMode, DensityThresholds, FixedPasses, Hyperparams,
    IterationBounds, IterationController, QTable,
};
use crate::context::{Captioner, CoarseDetector};
use crate::error::{BackendError, Error, Result};
use crate::geometry::{rasterize, BinaryMask, BoundingBox, ImageRef};
use crate::guidelines::{ingest, Guideline};
use crate::metrics::CostLedger;
use crate::pipeline::crop_loop::{run_crop, CropInputs, CropTrace, LoopSettings};
use crate::protocol::{
    boxgen_output_json, parse_worker_output, worker_output_json, CandidateBox, CandidateRef, FalseId,
    FalsePositive, MissingId, MissingObject, Refinement, SegmenterPrompt, Segmenter, SubjectId, SubjectInstance,
    SupervisorReport,
};

pub const STREAM_SCENE: u64 = 0;
pub const STREAM_PLANT: u64 = 1;
pub const STREAM_SUPERVISOR: u64 = 2;
pub const STREAM_BOXGEN: u64 = 3;
pub const STREAM_VERIFIER: u64 = 4;
pub const STREAM_POLICY: u64 = 5;
pub const STREAM_MIX: u64 = 6;

pub const SCENE_WIDTH: u32 = 960;
pub const SCENE_HEIGHT: u32 = 540;

/// Built-in pedestrian labeling rules used by simulated runs.
pub const BUILTIN_GUIDELINES: &str = include_str!("../data/pedestrian_guidelines.json");

pub fn builtin_guidelines() -> Vec<Guideline> {
    ingest(BUILTIN_GUIDELINES).expect("built-in corpus is valid")
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One Bernoulli trial; always consumes exactly one draw.
pub fn bernoulli(rng: &mut impl RngCore, p: f64) -> bool {
    rng.random::<f64>() < p
}

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Generator for the `counter`-th backend call of one kind on `image_key`.
pub fn call_rng(seed: u64, stream: u64, image_key: &str, counter: u64) -> ChaCha8Rng {
    let mixed = seed ^ fnv1a(image_key).rotate_left(17) ^ counter.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    rng_for(mixed, stream)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    Few,
    Medium,
    Crowd,
}

impl Density {
    pub const ALL: [Density; 3] = [Density::Few, Density::Medium, Density::Crowd];

    pub fn object_range(self) -> std::ops::RangeInclusive<u32> {
        match self {
            Density::Few => 1..=2,
            Density::Medium => 3..=7,
            Density::Crowd => 8..=15,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Density::Few => "few",
            Density::Medium => "medium",
            Density::Crowd => "crowd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub label: String,
    pub box_2d: BoundingBox,
}

/// Worker box that is off enough to need a refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitteredBox {
    pub object: usize,
    pub box_2d: BoundingBox,
}

/// Defects the simulated Worker makes on its first pass. Indices refer to
/// `objects` (misses, jitter) and `distractors` (false positives).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DefectLedger {
    pub misses: Vec<usize>,
    pub false_positives: Vec<usize>,
    pub jittered: Vec<JitteredBox>,
}

impl DefectLedger {
    pub fn violation_count(&self) -> usize {
        self.misses.len() + self.false_positives.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub density: Density,
    /// Ground truth: every object the guidelines include.
    pub objects: Vec<SceneObject>,
    /// Look-alikes the guidelines exclude.
    pub distractors: Vec<SceneObject>,
    #[serde(default)]
    pub defects: DefectLedger,
}

const GT_LABELS: [&str; 4] = ["pedestrian", "umbrella", "handbag", "sign"];
const DISTRACTOR_LABELS: [&str; 3] = ["mannequin", "statue", "poster"];

fn place_box(rng: &mut ChaCha8Rng, taken: &[BoundingBox], width: u32, height: u32) -> BoundingBox {
    let mut candidate = None;
    for _ in 0..20 {
        let w = rng.random_range(80..=140);
        let h = rng.random_range(120..=240);
        let x = rng.random_range(0..=width - w);
        let y = rng.random_range(0..=height - h);
        let b = BoundingBox::new(y, x, y + h, x + w).expect("positive size");
        let clear = taken.iter().all(|t| t.iou(&b) < 0.3);
        candidate = Some(b);
        if clear {
            break;
        }
    }
    candidate.expect("at least one attempt")
}

impl SyntheticScene {
    pub fn image(&self) -> ImageRef {
        ImageRef::new(self.name.clone(), self.width, self.height)
    }

    /// Ground-truth class mask (union of object boxes).
    pub fn gt_mask(&self) -> BinaryMask {
        let mut m = BinaryMask::new(self.width, self.height);
        for o in &self.objects {
            m.union_in_place(&rasterize(&o.box_2d, self.width, self.height).expect("object in bounds"))
                .expect("same shape");
        }
        m
    }

    /// Worker output of the first pass implied by the defect ledger:
    /// detected objects in order, then the planted false positives.
    pub fn worker_detections(&self) -> Vec<(String, BoundingBox)> {
        let mut out = Vec::new();
        for (i, o) in self.objects.iter().enumerate() {
            if self.defects.misses.contains(&i) {
                continue;
            }
            let b = self
                .defects
                .jittered
                .iter()
                .find(|j| j.object == i)
                .map_or(o.box_2d, |j| j.box_2d);
            out.push((o.label.clone(), b));
        }
        for &d in &self.defects.false_positives {
            out.push(("pedestrian".to_string(), self.distractors[d].box_2d));
        }
        out
    }
}

/// Scene layout for `seed` and `density`, without defects.
pub fn generate_scene(seed: u64, density: Density) -> SyntheticScene {
    let mut rng = rng_for(seed, STREAM_SCENE);
    let (w, h) = (SCENE_WIDTH, SCENE_HEIGHT);
    let n = rng.random_range(density.object_range());
    let mut taken = Vec::new();
    let mut objects = Vec::new();
    for _ in 0..n {
        let label = if bernoulli(&mut rng, 0.8) {
            GT_LABELS[0]
        } else {
            GT_LABELS[rng.random_range(1..GT_LABELS.len())]
        };
        let b = place_box(&mut rng, &taken, w, h);
        taken.push(b);
        objects.push(SceneObject {
            label: label.to_string(),
            box_2d: b,
        });
    }
    let mut distractors = Vec::new();
    for _ in 0..1 + n / 4 {
        let label = DISTRACTOR_LABELS[rng.random_range(0..DISTRACTOR_LABELS.len())];
        let b = place_box(&mut rng, &taken, w, h);
        taken.push(b);
        distractors.push(SceneObject {
            label: label.to_string(),
            box_2d: b,
        });
    }
    SyntheticScene {
        name: format!("scene-{}-{seed}", density.as_str()),
        width: w,
        height: h,
        density,
        objects,
        distractors,
        defects: DefectLedger::default(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErrorModel {
    pub worker_miss_rate: f64,
    pub worker_false_rate: f64,
    /// Maximum per-edge offset of first-pass Worker boxes.
    pub worker_jitter_px: u32,
    pub supervisor_detect_prob: f64,
    pub fix_success_prob: f64,
    pub boxgen_drop_rate: f64,
    pub verifier_noise: f64,
    /// Chance per correct subject and critique of a needless refinement.
    pub spurious_refinement_rate: f64,
}

impl Default for ErrorModel {
    fn default() -> Self {
        Self {
            worker_miss_rate: 0.15,
            worker_false_rate: 0.3,
            worker_jitter_px: 2,
            supervisor_detect_prob: 0.97,
            fix_success_prob: 0.7,
            boxgen_drop_rate: 0.1,
            verifier_noise: 0.05,
            spurious_refinement_rate: 0.0,
        }
    }
}

impl ErrorModel {
    /// No defects and perfect critics.
    pub fn perfect() -> Self {
        Self {
            worker_miss_rate: 0.0,
            worker_false_rate: 0.0,
            worker_jitter_px: 0,
            supervisor_detect_prob: 1.0,
            fix_success_prob: 1.0,
            boxgen_drop_rate: 0.0,
            verifier_noise: 0.0,
            spurious_refinement_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("worker_miss_rate", self.worker_miss_rate),
            ("worker_false_rate", self.worker_false_rate),
            ("supervisor_detect_prob", self.supervisor_detect_prob),
            ("fix_success_prob", self.fix_success_prob),
            ("boxgen_drop_rate", self.boxgen_drop_rate),
            ("verifier_noise", self.verifier_noise),
            ("spurious_refinement_rate", self.spurious_refinement_rate),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Validation(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

fn jitter(rng: &mut impl RngCore, b: &BoundingBox, px: u32, width: u32, height: u32) -> BoundingBox {
    let j = px as i64;
    let mut d = [0i64; 4];
    for v in &mut d {
        *v = rng.random_range(-j..=j);
    }
    let c = b.to_array();
    BoundingBox::from_f64_clipped(
        [
            (c[0] as i64 + d[0]) as f64,
            (c[1] as i64 + d[1]) as f64,
            (c[2] as i64 + d[2]) as f64,
            (c[3] as i64 + d[3]) as f64,
        ],
        width,
        height,
    )
    .unwrap_or(*b)
}

/// IoU below which a matched Worker box needs a refinement.
pub const REFINE_IOU: f64 = 0.9;
/// IoU needed to match a Worker box to a scene entity.
pub const MATCH_IOU: f64 = 0.5;

/// Plants first-pass Worker defects. Draw order on the planting stream:
/// one miss draw per object, one false-positive draw per distractor, then
/// four edge-offset draws per detected object (only when jitter > 0).
pub fn plant_defects(mut scene: SyntheticScene, model: &ErrorModel, seed: u64) -> SyntheticScene {
    let mut rng = rng_for(seed, STREAM_PLANT);
    let misses: Vec<usize> = (0..scene.objects.len())
        .filter(|_| bernoulli(&mut rng, model.worker_miss_rate))
        .collect();
    let false_positives: Vec<usize> = (0..scene.distractors.len())
        .filter(|_| bernoulli(&mut rng, model.worker_false_rate))
        .collect();
    let mut jittered = Vec::new();
    if model.worker_jitter_px > 0 {
        for (i, o) in scene.objects.iter().enumerate() {
            if misses.contains(&i) {
                continue;
            }
            let b = jitter(&mut rng, &o.box_2d, model.worker_jitter_px, scene.width, scene.height);
            if b.iou(&o.box_2d) < REFINE_IOU {
                jittered.push(JitteredBox { object: i, box_2d: b });
            }
        }
    }
    scene.defects = DefectLedger {
        misses,
        false_positives,
        jittered,
    };
    scene
}

pub fn generate_scene_with(seed: u64, density: Density, model: &ErrorModel) -> SyntheticScene {
    plant_defects(generate_scene(seed, density), model, seed)
}

/// What the last critique of an image meant, so boxgen can locate it.
#[derive(Debug, Clone, Default)]
struct Critique {
    missing: BTreeMap<MissingId, usize>,
    false_positives: BTreeMap<FalseId, (SubjectId, Option<usize>)>,
}

/// Scene entity as seen inside a crop.
#[derive(Debug, Clone)]
struct Local {
    label: String,
    box_2d: BoundingBox,
}

/// Stand-in for every backend, answering from the ground truth of known
/// scenes with the error model's noise.
pub struct SimulatedBackend {
    scenes: HashMap<String, Arc<SyntheticScene>>,
    model: ErrorModel,
    seed: u64,
    pub erosion_px: u32,
    pub usage: Usage,
    pub latency_ms: u64,
    counters: Mutex<HashMap<(String, u64), u64>>,
    critiques: Mutex<HashMap<String, Critique>>,
}

impl SimulatedBackend {
    pub fn new(model: ErrorModel, seed: u64) -> Self {
        Self {
            scenes: HashMap::new(),
            model,
            seed,
            erosion_px: 1,
            usage: Usage {
                input_tokens: 2000,
                output_tokens: 200,
            },
            latency_ms: 1100,
            counters: Mutex::new(HashMap::new()),
            critiques: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_scene(mut self, scene: SyntheticScene) -> Self {
        self.add_scene(scene);
        self
    }

    pub fn add_scene(&mut self, scene: SyntheticScene) {
        self.scenes.insert(scene.name.clone(), Arc::new(scene));
    }

    pub fn model(&self) -> &ErrorModel {
        &self.model
    }

    fn scene(&self, image: &ImageRef) -> Result<&SyntheticScene, BackendError> {
        self.scenes
            .get(&image.source)
            .map(Arc::as_ref)
            .ok_or_else(|| BackendError::Unavailable(format!("unknown simulated image {}", image.source)))
    }

    fn next_rng(&self, stream: u64, image: &ImageRef) -> ChaCha8Rng {
        let key = image.to_string();
        let mut counters = self.counters.lock().unwrap_or_else(|p| p.into_inner());
        let c = counters.entry((key.clone(), stream)).or_insert(0);
        let rng = call_rng(self.seed, stream, &key, *c);
        *c += 1;
        rng
    }

    /// Entities clipped into the crop's frame; the flag marks ground truth.
    fn locals(&self, image: &ImageRef) -> Result<(Vec<Local>, Vec<Local>), BackendError> {
        let scene = self.scene(image)?;
        let region = image.region_or_full();
        let map = |objs: &[SceneObject]| {
            objs.iter()
                .filter_map(|o| {
                    let inside = o.box_2d.intersection(&region.bounds())?;
                    // objects mostly outside the crop belong to the other crop
                    if (inside.area() as f64) < 0.5 * o.box_2d.area() as f64 {
                        return None;
                    }
                    Some(Local {
                        label: o.label.clone(),
                        box_2d: region.to_local(&o.box_2d).ok()?,
                    })
                })
                .collect::<Vec<_>>()
        };
        Ok((map(&scene.objects), map(&scene.distractors)))
    }

    fn respond(&self, text: String) -> BackendResponse {
        BackendResponse {
            text,
            usage: self.usage,
            latency_ms: Some(self.latency_ms),
        }
    }

    fn worker(&self, image: &ImageRef) -> Result<String, BackendError> {
        let scene = self.scene(image)?;
        let region = image.region_or_full();
        let mut subjects = Vec::new();
        for (label, b) in scene.worker_detections() {
            let Some(inside) = b.intersection(&region.bounds()) else { continue };
            if (inside.area() as f64) < 0.5 * b.area() as f64 {
                continue;
            }
            subjects.push(SubjectInstance {
                id: SubjectId(subjects.len() as u32),
                label,
                box_2d: region.to_local(&b).map_err(|e| BackendError::Malformed(e.to_string()))?,
                mask: None,
            });
        }
        Ok(worker_output_json(&subjects))
    }

    fn request_subjects(&self, req: &BackendRequest, image: &ImageRef) -> Result<Vec<SubjectInstance>, BackendError> {
        let text = req
            .text(parts::SUBJECTS)
            .ok_or_else(|| BackendError::Malformed("request lacks subjects".into()))?;
        parse_worker_output(text, image.width, image.height)
            .map(|p| p.value)
            .map_err(|e| BackendError::Malformed(e.to_string()))
    }

    fn worker_refine(&self, req: &BackendRequest, image: &ImageRef) -> Result<String, BackendError> {
        let subjects = self.request_subjects(req, image)?;
        let refinements: Vec<Refinement> = req
            .text(parts::REFINEMENTS)
            .map(serde_json::from_str)
            .transpose()
            .map_err(|e| BackendError::Malformed(e.to_string()))?
            .unwrap_or_default();
        let (gt, _) = self.locals(image)?;
        let mut out = Vec::new();
        for r in refinements.iter().filter(|r| r.replacement_box.is_none()) {
            let Some(s) = subjects.iter().find(|s| s.id == r.box_id) else { continue };
            let best = gt
                .iter()
                .map(|g| (g.box_2d.iou(&s.box_2d), g))
                .filter(|(iou, _)| *iou >= MATCH_IOU)
                .max_by(|a, b| a.0.total_cmp(&b.0));
            let box_2d = best.map_or(s.box_2d, |(_, g)| g.box_2d);
            out.push(SubjectInstance {
                box_2d,
                ..s.clone()
            });
        }
        Ok(worker_output_json(&out))
    }

    fn supervisor_eval(&self, req: &BackendRequest, image: &ImageRef) -> Result<String, BackendError> {
        let subjects = self.request_subjects(req, image)?;
        let (gt, distractors) = self.locals(image)?;
        let m = &self.model;
        let mut rng = self.next_rng(STREAM_SUPERVISOR, image);

        // greedy one-to-one matching by IoU
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (si, s) in subjects.iter().enumerate() {
            for (gi, g) in gt.iter().enumerate() {
                let iou = s.box_2d.iou(&g.box_2d);
                if iou >= MATCH_IOU {
                    pairs.push((iou, si, gi));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut subject_match = vec![None; subjects.len()];
        let mut gt_taken = vec![false; gt.len()];
        for (iou, si, gi) in pairs {
            if subject_match[si].is_none() && !gt_taken[gi] {
                subject_match[si] = Some((gi, iou));
                gt_taken[gi] = true;
            }
        }

        let cite = |label: &str| cite_guideline(&req.system, label);
        let mut report = SupervisorReport::default();
        let mut critique = Critique::default();

        for (gi, g) in gt.iter().enumerate() {
            if !gt_taken[gi] && bernoulli(&mut rng, m.supervisor_detect_prob) {
                let id = MissingId(report.missing_objects.len() as u32);
                report.missing_objects.push(MissingObject {
                    missing_object_id: id,
                    label: g.label.clone(),
                    reason: format!("Unlabeled {} must be included{}", g.label, cite(&g.label)),
                });
                critique.missing.insert(id, gi);
            }
        }
        for (si, s) in subjects.iter().enumerate() {
            if subject_match[si].is_some() || !bernoulli(&mut rng, m.supervisor_detect_prob) {
                continue;
            }
            let lookalike = distractors
                .iter()
                .enumerate()
                .filter(|(_, d)| d.box_2d.iou(&s.box_2d) >= MATCH_IOU)
                .max_by(|a, b| a.1.box_2d.iou(&s.box_2d).total_cmp(&b.1.box_2d.iou(&s.box_2d)))
                .map(|(i, _)| i);
            let label = lookalike.map_or(s.label.clone(), |d| distractors[d].label.clone());
            let id = FalseId(report.false_positives.len() as u32);
            report.false_positives.push(FalsePositive {
                id,
                label: label.clone(),
                subject_ref: Some(s.id),
                reason: match lookalike {
                    Some(_) => format!("A {label} is not a target object{}", cite(&label)),
                    None => format!("{} does not cover a target object{}", s.id, cite(&s.label)),
                },
            });
            critique.false_positives.insert(id, (s.id, lookalike));
        }
        for (si, s) in subjects.iter().enumerate() {
            let Some((gi, iou)) = subject_match[si] else { continue };
            if iou < REFINE_IOU {
                if !bernoulli(&mut rng, m.supervisor_detect_prob) {
                    continue;
                }
                let target = gt[gi].box_2d;
                let replacement = if bernoulli(&mut rng, m.fix_success_prob) {
                    target
                } else {
                    jitter(&mut rng, &target, m.worker_jitter_px.max(1), image.width, image.height)
                };
                report.refinements.push(Refinement {
                    box_id: s.id,
                    instruction: format!("align the box edges with the {} outline", s.label),
                    replacement_box: Some(replacement),
                });
            } else if bernoulli(&mut rng, m.spurious_refinement_rate) {
                report.refinements.push(Refinement {
                    box_id: s.id,
                    instruction: "tighten the box slightly".into(),
                    replacement_box: Some(s.box_2d),
                });
            }
        }
        self.critiques
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(image.to_string(), critique);
        Ok(serde_json::to_string(&report).expect("report serializes"))
    }

    fn boxgen(&self, req: &BackendRequest, image: &ImageRef) -> Result<String, BackendError> {
        let report: SupervisorReport = req
            .text(parts::REPORT)
            .map(serde_json::from_str)
            .transpose()
            .map_err(|e| BackendError::Malformed(e.to_string()))?
            .ok_or_else(|| BackendError::Malformed("request lacks a report".into()))?;
        let subjects = self.request_subjects(req, image)?;
        let (gt, distractors) = self.locals(image)?;
        let critique = self
            .critiques
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .get(&image.to_string())
            .cloned()
            .unwrap_or_default();
        let m = &self.model;
        let mut rng = self.next_rng(STREAM_BOXGEN, image);
        let (w, h) = (image.width, image.height);
        let mut out = Vec::new();

        let mut propose = |rng: &mut ChaCha8Rng, id: CandidateRef, label: &str, target: BoundingBox| {
            if bernoulli(rng, m.boxgen_drop_rate) {
                return;
            }
            let box_2d = if bernoulli(rng, m.fix_success_prob) {
                target
            } else {
                misplace(&target, w, h)
            };
            out.push(CandidateBox {
                box_id: id,
                label: label.to_string(),
                box_2d,
                verified: false,
                score: None,
            });
        };
        for mo in &report.missing_objects {
            if let Some(&gi) = critique.missing.get(&mo.missing_object_id) {
                propose(&mut rng, CandidateRef::Missing(mo.missing_object_id), &mo.label, gt[gi].box_2d);
            }
        }
        for fp in &report.false_positives {
            let Some(&(sid, lookalike)) = critique.false_positives.get(&fp.id) else { continue };
            let target = match lookalike {
                Some(d) => distractors[d].box_2d,
                None => match subjects.iter().find(|s| s.id == sid) {
                    Some(s) => s.box_2d,
                    None => continue,
                },
            };
            propose(&mut rng, CandidateRef::False(fp.id), &fp.label, target);
        }
        Ok(boxgen_output_json(&out))
    }
}

/// The box moved sideways by its own width, so it no longer overlaps the
/// object it was meant for.
fn misplace(b: &BoundingBox, width: u32, height: u32) -> BoundingBox {
    let dx = b.width() as i64;
    let right = b.x_max() as i64 + dx <= width as i64;
    b.translate_clipped(0, if right { dx } else { -dx }, width, height)
        .unwrap_or(*b)
}

fn cite_guideline(system: &str, label: &str) -> String {
    let needle = label.to_lowercase();
    system
        .lines()
        .filter_map(|l| l.split_once(": "))
        .filter(|(id, _)| id.starts_with('G') && id[1..].bytes().all(|b| b.is_ascii_digit()) && id.len() > 1)
        .find(|(_, text)| text.to_lowercase().contains(&needle))
        .map_or(String::new(), |(id, _)| format!(" per {id}"))
}

impl ModelBackend for SimulatedBackend {
    fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let image = req
            .image()
            .ok_or_else(|| BackendError::Malformed("request has no image".into()))?;
        let text = match req.role {
            Role::Worker => self.worker(image)?,
            Role::WorkerRefine => self.worker_refine(req, image)?,
            Role::SupervisorEval => self.supervisor_eval(req, image)?,
            Role::SupervisorBoxgen => self.boxgen(req, image)?,
        };
        Ok(self.respond(text))
    }
}

impl Segmenter for SimulatedBackend {
    fn segment(&self, image: &ImageRef, prompt: &SegmenterPrompt) -> Result<BinaryMask, BackendError> {
        match prompt {
            SegmenterPrompt::BoxPositive { box_2d } => {
                let b = box_2d.erode(self.erosion_px).unwrap_or(*box_2d);
                rasterize(&b, image.width, image.height).map_err(|e| BackendError::Malformed(e.to_string()))
            }
            SegmenterPrompt::BoxWithNegativePoint { .. } => Ok(BinaryMask::new(image.width, image.height)),
        }
    }
}

/// Logit magnitude returned by the simulated verifier.
pub const SIM_LOGIT: f64 = 3.0;

impl VerifierScorer for SimulatedBackend {
    fn score(&self, image: &ImageRef, crop: &BoundingBox, label: &str) -> Result<f64, BackendError> {
        let (gt, distractors) = self.locals(image)?;
        let hit = gt
            .iter()
            .chain(&distractors)
            .any(|e| e.label.eq_ignore_ascii_case(label) && e.box_2d.iou(crop) >= MATCH_IOU);
        let mut rng = self.next_rng(STREAM_VERIFIER, image);
        let flip = bernoulli(&mut rng, self.model.verifier_noise);
        Ok(if hit != flip { SIM_LOGIT } else { -SIM_LOGIT })
    }
}

impl Captioner for SimulatedBackend {
    fn caption(&self, image: &ImageRef, _: &str) -> Result<String, BackendError> {
        let scene = self.scene(image)?;
        Ok(format!(
            "a street scene with {} people and {} look-alike figures",
            scene.objects.len(),
            scene.distractors.len()
        ))
    }
}

impl CoarseDetector for SimulatedBackend {
    fn detect(&self, image: &ImageRef, _: &str, scale: f64) -> Result<Vec<BoundingBox>, BackendError> {
        let scene = self.scene(image)?;
        let (w, h) = (
            (image.width as f64 * scale).round() as u32,
            (image.height as f64 * scale).round() as u32,
        );
        Ok(scene
            .objects
            .iter()
            .chain(&scene.distractors)
            .filter_map(|o| {
                let c = o.box_2d.to_array().map(|v| v as f64 * scale);
                BoundingBox::from_f64_clipped([c[0].ceil(), c[1].ceil(), c[2].floor(), c[3].floor()], w, h)
            })
            .collect())
    }
}

/// Fixed parts of a simulated episode.
#[derive(Debug, Clone)]
pub struct SimEnv {
    pub model: ErrorModel,
    pub bounds: IterationBounds,
    pub hyperparams: Hyperparams,
    pub density: DensityThresholds,
    pub guidelines: Vec<Guideline>,
    pub roles: RoleSet,
    pub prompt: String,
}

impl SimEnv {
    pub fn new(model: ErrorModel, bounds: IterationBounds) -> Self {
        Self {
            model,
            bounds,
            hyperparams: Hyperparams::default(),
            density: DensityThresholds::default(),
            guidelines: builtin_guidelines(),
            roles: RoleSet::default(),
            prompt: "Pedestrian".into(),
        }
    }

    pub fn settings(&self) -> LoopSettings {
        LoopSettings {
            hyperparams: self.hyperparams,
            density: self.density,
            bounds: self.bounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub iteration: u32,
    pub issue_score: f64,
    pub state: usize,
    pub action: Action,
    pub forced: bool,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub scene: String,
    pub density: Density,
    pub steps: Vec<EpisodeStep>,
    pub terminal: bool,
    pub issues_resolved: f64,
    pub passes: u32,
    pub planted_violations: usize,
}

impl EpisodeTrace {
    fn from_crop(scene: &SyntheticScene, trace: &CropTrace) -> Self {
        let steps = trace
            .iterations
            .iter()
            .map(|r| EpisodeStep {
                iteration: r.iteration,
                issue_score: r.issue_score,
                state: r.state,
                action: r.action.unwrap_or(Action::Stop),
                forced: r.forced,
                reward: r.reward.unwrap_or(0.0),
            })
            .collect();
        Self {
            scene: scene.name.clone(),
            density: scene.density,
            steps,
            terminal: trace.error.is_none(),
            issues_resolved: trace.issues_resolved,
            passes: trace.passes(),
            planted_violations: scene.defects.violation_count(),
        }
    }
}

/// Runs one scene as a single full-image crop.
pub fn run_episode(
    scene: &SyntheticScene,
    env: &SimEnv,
    policy: &mut dyn IterationController,
    seed: u64,
) -> (EpisodeTrace, CropTrace) {
    let backend = SimulatedBackend::new(env.model, seed).with_scene(scene.clone());
    let ledger = CostLedger::new();
    let agents = crate::agents::Agents {
        model: &backend,
        segmenter: &backend,
        scorer: &backend,
        ledger: &ledger,
        roles: &env.roles,
        verifier: VerifierSettings::default(),
    };
    let inputs = CropInputs {
        agents: &agents,
        image: scene.image(),
        prompt: &env.prompt,
        guidelines: &env.guidelines,
    };
    let outcome = run_crop(&inputs, policy, &env.settings());
    (EpisodeTrace::from_crop(scene, &outcome.trace), outcome.trace)
}

/// Relative weights of the density classes when sampling scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityMix {
    pub few: f64,
    pub medium: f64,
    pub crowd: f64,
}

impl Default for DensityMix {
    fn default() -> Self {
        Self {
            few: 1.0,
            medium: 1.0,
            crowd: 1.0,
        }
    }
}

impl DensityMix {
    pub fn sample(&self, rng: &mut impl RngCore) -> Density {
        let total = self.few + self.medium + self.crowd;
        let u = rng.random::<f64>() * total;
        if u < self.few {
            Density::Few
        } else if u < self.few + self.medium {
            Density::Medium
        } else {
            Density::Crowd
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.few, self.medium, self.crowd];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Validation("density mix weights must be >= 0 with a positive sum".into()));
        }
        Ok(())
    }
}

/// Scene seed for episode `i` of a run seeded with `seed`.
pub fn episode_seed(seed: u64, i: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i)
}

/// Sequence of (scene seed, density) pairs used by training and ablation.
pub fn scene_schedule(seed: u64, n: u64, mix: &DensityMix) -> Vec<(u64, Density)> {
    let mut rng = rng_for(seed, STREAM_MIX);
    (0..n).map(|i| (episode_seed(seed, i), mix.sample(&mut rng))).collect()
}

/// One line of a training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub scene: String,
    pub density: Density,
    pub passes: u32,
    pub issues_resolved: f64,
    /// Sum of the rewards the controller learned from in this episode.
    pub reward: f64,
    pub cumulative_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub table: QTable,
    pub episodes: Vec<EpisodeRecord>,
    pub mean_passes: f64,
}

impl TrainingRun {
    pub fn cumulative_rewards(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.cumulative_reward).collect()
    }
}

pub fn train_controller(
    episodes: u64,
    env: &SimEnv,
    mix: &DensityMix,
    seed: u64,
    initial: Option<QTable>,
) -> Result<TrainingRun> {
    if episodes == 0 {
        return Err(Error::Validation("training needs at least one episode".into()));
    }
    env.model.validate()?;
    env.bounds.validate()?;
    mix.validate()?;
    let table = shared(initial.unwrap_or_else(|| QTable::new(env.hyperparams, env.density)));
    let mut controller = AdaptiveController::new(table.clone(), ControllerMode::Train, rng_for(seed, STREAM_POLICY));
    let mut records = Vec::with_capacity(episodes as usize);
    let mut total = 0.0;
    let mut passes = 0u64;
    for (i, (scene_seed, density)) in scene_schedule(seed, episodes, mix).into_iter().enumerate() {
        let scene = generate_scene_with(scene_seed, density, &env.model);
        let (trace, _) = run_episode(&scene, env, &mut controller, scene_seed);
        // a forced stop at the iteration cap is not learned from
        let reward = trace
            .steps
            .iter()
            .filter(|s| !(s.action == Action::Stop && s.iteration >= env.bounds.max_iters))
            .map(|s| s.reward)
            .sum::<f64>();
        total += reward;
        passes += trace.passes as u64;
        records.push(EpisodeRecord {
            episode: i as u64,
            scene: scene.name,
            density,
            passes: trace.passes,
            issues_resolved: trace.issues_resolved,
            reward,
            cumulative_reward: total,
        });
    }
    drop(controller);
    let table = lock(&table).clone();
    Ok(TrainingRun {
        table,
        episodes: records,
        mean_passes: passes as f64 / episodes as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyStats {
    pub issues_resolved_per_crop: f64,
    pub mean_passes: f64,
    pub extra_pass_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityComparison {
    pub density: Density,
    pub crops: usize,
    pub adaptive_resolved: f64,
    pub fixed_resolved: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub scenes: usize,
    pub fixed_passes: u32,
    pub adaptive: PolicyStats,
    pub fixed: PolicyStats,
    /// Adaptive issues resolved divided by the fixed baseline's.
    pub ratio: f64,
    pub per_density: Vec<DensityComparison>,
}

/// Paired comparison of the greedy learned policy and a fixed number of
/// passes on the same scenes and the same simulator draws.
pub fn ablate_policies(
    env: &SimEnv,
    table: &QTable,
    n_scenes: u64,
    seed: u64,
    mix: &DensityMix,
    fixed_passes: u32,
) -> Result<AblationReport> {
    if n_scenes == 0 {
        return Err(Error::Validation("ablation needs at least one scene".into()));
    }
    env.model.validate()?;
    let frozen = shared(table.clone());
    let mut adaptive = AdaptiveController::new(frozen, ControllerMode::Greedy, rng_for(seed, STREAM_POLICY));
    let mut fixed = FixedPasses(fixed_passes);
    let mut rows: Vec<(Density, EpisodeTrace, EpisodeTrace)> = Vec::new();
    for (scene_seed, density) in scene_schedule(seed, n_scenes, mix) {
        let scene = generate_scene_with(scene_seed, density, &env.model);
        let (a, _) = run_episode(&scene, env, &mut adaptive, scene_seed);
        let (f, _) = run_episode(&scene, env, &mut fixed, scene_seed);
        rows.push((density, a, f));
    }
    let n = rows.len() as f64;
    let stats = |pick: fn(&(Density, EpisodeTrace, EpisodeTrace)) -> &EpisodeTrace| PolicyStats {
        issues_resolved_per_crop: rows.iter().map(|r| pick(r).issues_resolved).sum::<f64>() / n,
        mean_passes: rows.iter().map(|r| pick(r).passes as f64).sum::<f64>() / n,
        extra_pass_fraction: rows
            .iter()
            .filter(|r| pick(r).passes > env.bounds.min_iters)
            .count() as f64
            / n,
    };
    let adaptive_stats = stats(|r| &r.1);
    let fixed_stats = stats(|r| &r.2);
    let per_density = Density::ALL
        .iter()
        .filter_map(|&d| {
            let sel: Vec<_> = rows.iter().filter(|r| r.0 == d).collect();
            if sel.is_empty() {
                return None;
            }
            let k = sel.len() as f64;
            let a = sel.iter().map(|r| r.1.issues_resolved).sum::<f64>() / k;
            let f = sel.iter().map(|r| r.2.issues_resolved).sum::<f64>() / k;
            Some(DensityComparison {
                density: d,
                crops: sel.len(),
                adaptive_resolved: a,
                fixed_resolved: f,
                gain: a - f,
            })
        })
        .collect();
    let ratio = if fixed_stats.issues_resolved_per_crop > 0.0 {
        adaptive_stats.issues_resolved_per_crop / fixed_stats.issues_resolved_per_crop
    } else if adaptive_stats.issues_resolved_per_crop > 0.0 {
        f64::INFINITY
    } else {
        1.0
    };
    Ok(AblationReport {
        scenes: rows.len(),
        fixed_passes,
        adaptive: adaptive_stats,
        fixed: fixed_stats,
        ratio,
        per_density,
    })
}

impl AblationReport {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["group", "crops", "adaptive_resolved", "fixed_resolved", "gain"])?;
        w.write_record([
            "all".to_string(),
            self.scenes.to_string(),
            self.adaptive.issues_resolved_per_crop.to_string(),
            self.fixed.issues_resolved_per_crop.to_string(),
            (self.adaptive.issues_resolved_per_crop - self.fixed.issues_resolved_per_crop).to_string(),
        ])?;
        for d in &self.per_density {
            w.write_record([
                d.density.as_str().to_string(),
                d.crops.to_string(),
                d.adaptive_resolved.to_string(),
                d.fixed_resolved.to_string(),
                d.gain.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Simulation config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub error_model: ErrorModel,
    pub bounds: IterationBounds,
    pub density_mix: DensityMix,
    pub episodes: u64,
    pub seed: u64,
    pub hyperparams: Hyperparams,
    pub density_thresholds: DensityThresholds,
    /// Scenes used by the ablation, drawn from their own seed so they do
    /// not repeat the training scenes.
    pub ablation_scenes: u64,
    pub ablation_seed: u64,
    pub fixed_passes: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            error_model: ErrorModel::default(),
            bounds: IterationBounds::default(),
            density_mix: DensityMix::default(),
            episodes: 5000,
            seed: 42,
            hyperparams: Hyperparams::default(),
            density_thresholds: DensityThresholds::default(),
            ablation_scenes: 600,
            ablation_seed: 7,
            fixed_passes: 2,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.error_model.validate()?;
        self.bounds.validate()?;
        self.density_mix.validate()?;
        self.hyperparams.validate()
    }

    pub fn env(&self) -> SimEnv {
        SimEnv {
            hyperparams: self.hyperparams,
            density: self.density_thresholds,
            ..SimEnv::new(self.error_model, self.bounds)
        }
    }
}

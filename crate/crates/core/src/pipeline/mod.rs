//! End-to-end run over one image: context, per-crop loops, merge.

pub mod crop_loop;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::agents::remote::{
    EndpointConfig, HttpEndpoint, RemoteCaptioner, RemoteDetector, RemoteEmbedder, RemoteModel, RemoteScorer,
    RemoteSegmenter,
};
use crate::agents::{Agents, ModelBackend, Role, RoleSet, VerifierScorer, VerifierSettings};
use crate::airc::{
    AdaptiveController, ControllerMode, IterationBounds, IterationController, SharedQTable,
};
use crate::context::{
    construct_context, Captioner, CoarseDetector, ContextBackends, CropPlan, CropSettings, NoCaption, NoDetections,
};
use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, BoundingBox, ImageRef};
use crate::guidelines::{Embedder, Guideline, GuidelineIndex, HashEmbedder, DEFAULT_TOP_K};
use crate::metrics::{ledger_summary, CostLedger, LedgerEntry, LedgerSummary, PriceConfig};
use crate::protocol::{Segmenter, SubjectInstance};
use crate::sim::{rng_for, ErrorModel, SimulatedBackend, STREAM_POLICY};

use crop_loop::{drive, CropInputs, CropTrace, LoopSettings};

/// Whether each crop runs its own loop or all crops of an image share one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerScope {
    #[default]
    PerCrop,
    PerImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Temperatures {
    pub worker: f64,
    pub supervisor_eval: f64,
    pub supervisor_boxgen: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            worker: 0.5,
            supervisor_eval: 0.3,
            supervisor_boxgen: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEndpoints {
    pub model: EndpointConfig,
    pub segmenter: EndpointConfig,
    pub scorer: EndpointConfig,
    #[serde(default)]
    pub captioner: Option<EndpointConfig>,
    #[serde(default)]
    pub detector: Option<EndpointConfig>,
    /// Without one, guidelines are embedded with the built-in hash embedder.
    #[serde(default)]
    pub embedder: Option<EndpointConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    /// Images are synthetic scene files answered by the simulator.
    Simulated {
        #[serde(default)]
        error_model: ErrorModel,
        #[serde(default)]
        seed: u64,
    },
    Remote(Box<RemoteEndpoints>),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Simulated {
            error_model: ErrorModel::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub prompt: String,
    /// Guideline corpus; the built-in pedestrian rules when absent.
    pub corpus: Option<PathBuf>,
    /// Prebuilt index for `corpus`; built on the fly when absent.
    pub index: Option<PathBuf>,
    pub k: usize,
    pub crop: CropSettings,
    pub temperatures: Temperatures,
    pub verifier: VerifierSettings,
    pub bounds: IterationBounds,
    pub controller_mode: ControllerMode,
    pub controller_scope: ControllerScope,
    pub backend: BackendConfig,
    pub prices: PriceConfig,
    /// Directory of prompt templates overriding the built-in ones.
    pub prompts_dir: Option<PathBuf>,
    /// Seed for exploration when training online.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            prompt: "Pedestrian".into(),
            corpus: None,
            index: None,
            k: DEFAULT_TOP_K,
            crop: CropSettings::default(),
            temperatures: Temperatures::default(),
            verifier: VerifierSettings::default(),
            bounds: IterationBounds::default(),
            controller_mode: ControllerMode::Greedy,
            controller_scope: ControllerScope::PerCrop,
            backend: BackendConfig::default(),
            prices: PriceConfig::default(),
            prompts_dir: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.trim().is_empty() {
            return Err(Error::Validation("prompt is empty".into()));
        }
        if self.k == 0 {
            return Err(Error::Validation("k must be at least 1".into()));
        }
        if !(self.crop.downscale > 0.0 && self.crop.downscale <= 1.0) {
            return Err(Error::Validation(format!(
                "downscale {} is outside (0, 1]",
                self.crop.downscale
            )));
        }
        let t = self.temperatures;
        for (name, v) in [
            ("worker", t.worker),
            ("supervisor_eval", t.supervisor_eval),
            ("supervisor_boxgen", t.supervisor_boxgen),
        ] {
            if !(0.0..=2.0).contains(&v) {
                return Err(Error::Validation(format!("{name} temperature {v} is outside [0, 2]")));
            }
        }
        self.verifier.validate()?;
        self.bounds.validate()?;
        if let BackendConfig::Simulated { error_model, .. } = &self.backend {
            error_model.validate()?;
        }
        Ok(())
    }

    pub fn roles(&self) -> Result<RoleSet> {
        let mut roles = match &self.prompts_dir {
            Some(dir) => RoleSet::from_dir(dir)?,
            None => RoleSet::default(),
        };
        let t = self.temperatures;
        roles.set_temperature(Role::Worker, t.worker);
        roles.set_temperature(Role::WorkerRefine, t.worker);
        roles.set_temperature(Role::SupervisorEval, t.supervisor_eval);
        roles.set_temperature(Role::SupervisorBoxgen, t.supervisor_boxgen);
        roles.validate()?;
        Ok(roles)
    }
}

/// Concrete backends for a run.
pub struct Backends {
    pub model: Box<dyn ModelBackend>,
    pub segmenter: Box<dyn Segmenter>,
    pub scorer: Box<dyn VerifierScorer>,
    pub captioner: Box<dyn Captioner>,
    pub detector: Box<dyn CoarseDetector>,
    pub embedder: Box<dyn Embedder>,
}

/// Adapter so one shared simulator can fill every slot.
struct Shared(std::sync::Arc<SimulatedBackend>);

impl ModelBackend for Shared {
    fn complete(
        &self,
        request: &crate::agents::BackendRequest,
    ) -> std::result::Result<crate::agents::BackendResponse, crate::BackendError> {
        self.0.complete(request)
    }
}

impl Segmenter for Shared {
    fn segment(
        &self,
        image: &ImageRef,
        prompt: &crate::protocol::SegmenterPrompt,
    ) -> std::result::Result<BinaryMask, crate::BackendError> {
        self.0.segment(image, prompt)
    }
}

impl VerifierScorer for Shared {
    fn score(&self, image: &ImageRef, crop: &BoundingBox, label: &str) -> std::result::Result<f64, crate::BackendError> {
        self.0.score(image, crop, label)
    }
}

impl Captioner for Shared {
    fn caption(&self, image: &ImageRef, prompt: &str) -> std::result::Result<String, crate::BackendError> {
        self.0.caption(image, prompt)
    }
}

impl CoarseDetector for Shared {
    fn detect(
        &self,
        image: &ImageRef,
        prompt: &str,
        scale: f64,
    ) -> std::result::Result<Vec<BoundingBox>, crate::BackendError> {
        self.0.detect(image, prompt, scale)
    }
}

impl Backends {
    pub fn simulated(backend: SimulatedBackend) -> Self {
        let b = std::sync::Arc::new(backend);
        Self {
            model: Box::new(Shared(b.clone())),
            segmenter: Box::new(Shared(b.clone())),
            scorer: Box::new(Shared(b.clone())),
            captioner: Box::new(Shared(b.clone())),
            detector: Box::new(Shared(b)),
            embedder: Box::new(HashEmbedder::default()),
        }
    }

    pub fn remote(endpoints: &RemoteEndpoints) -> Self {
        let ep = |c: &EndpointConfig| HttpEndpoint::new(c.clone());
        Self {
            model: Box::new(RemoteModel(ep(&endpoints.model))),
            segmenter: Box::new(RemoteSegmenter(ep(&endpoints.segmenter))),
            scorer: Box::new(RemoteScorer(ep(&endpoints.scorer))),
            captioner: match &endpoints.captioner {
                Some(c) => Box::new(RemoteCaptioner(ep(c))),
                None => Box::new(NoCaption),
            },
            detector: match &endpoints.detector {
                Some(c) => Box::new(RemoteDetector(ep(c))),
                None => Box::new(NoDetections),
            },
            embedder: match &endpoints.embedder {
                Some(c) => Box::new(RemoteEmbedder {
                    endpoint: ep(c),
                    tag: format!("remote:{}", c.url),
                }),
                None => Box::new(HashEmbedder::default()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub query: String,
    pub guidelines: Vec<(String, f64)>,
    pub coarse_boxes: Vec<BoundingBox>,
    pub crop_plan: CropPlan,
    pub warnings: Vec<String>,
}

/// Everything logged about one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub prompt: String,
    pub scope: ControllerScope,
    pub context: ContextRecord,
    pub crops: Vec<CropTrace>,
    /// Final subjects in image coordinates, masks omitted.
    pub subjects: Vec<SubjectInstance>,
    pub merged_duplicates: usize,
    pub calls: Vec<LedgerEntry>,
    pub summary: LedgerSummary,
}

pub struct ImageRun {
    pub mask: BinaryMask,
    pub trace: RunTrace,
}

/// IoU at which same-label subjects from different crops are one object.
pub const MERGE_IOU: f64 = 0.5;

/// Segments `prompt` in `image`. Backend failures of individual crops are
/// recorded in the trace and leave that crop empty.
pub fn run_image(
    image: &ImageRef,
    config: &RunConfig,
    roles: &RoleSet,
    backends: &Backends,
    index: &GuidelineIndex,
    table: &SharedQTable,
) -> Result<ImageRun> {
    config.validate()?;
    let context = construct_context(
        image,
        &config.prompt,
        index,
        &ContextBackends {
            captioner: backends.captioner.as_ref(),
            detector: backends.detector.as_ref(),
            embedder: backends.embedder.as_ref(),
        },
        config.k,
        &config.crop,
    )?;
    let guidelines: Vec<Guideline> = context.guideline_list();
    let ledger = CostLedger::new();
    let agents = Agents {
        model: backends.model.as_ref(),
        segmenter: backends.segmenter.as_ref(),
        scorer: backends.scorer.as_ref(),
        ledger: &ledger,
        roles,
        verifier: config.verifier,
    };
    let (hyperparams, density) = {
        let t = crate::airc::lock(table);
        (t.hyperparams, t.density_thresholds)
    };
    let settings = LoopSettings {
        hyperparams,
        density,
        bounds: config.bounds,
    };
    let inputs: Vec<CropInputs<'_>> = context
        .crop_plan
        .crops
        .iter()
        .map(|&region| CropInputs {
            agents: &agents,
            image: if region.is_full() { image.clone() } else { image.crop(region) },
            prompt: &config.prompt,
            guidelines: &guidelines,
        })
        .collect();
    let controller = |i: usize| {
        AdaptiveController::new(
            table.clone(),
            config.controller_mode,
            rng_for(config.seed.wrapping_add(i as u64), STREAM_POLICY),
        )
    };

    let outcomes = match config.controller_scope {
        ControllerScope::PerImage => drive(&inputs, &mut controller(0), &settings),
        ControllerScope::PerCrop => std::thread::scope(|s| {
            let handles: Vec<_> = inputs
                .iter()
                .enumerate()
                .map(|(i, inp)| {
                    let mut c = controller(i);
                    let settings = &settings;
                    s.spawn(move || {
                        let c: &mut dyn IterationController = &mut c;
                        crop_loop::run_crop(inp, c, settings)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("crop thread panicked"))
                .collect()
        }),
    };

    let mut mask = BinaryMask::new(image.width, image.height);
    let mut subjects: Vec<SubjectInstance> = Vec::new();
    let mut merged = 0;
    let mut crops = Vec::new();
    for outcome in outcomes {
        let region = outcome.trace.crop;
        if let Some(registry) = &outcome.registry {
            let local = registry.class_mask(region.width(), region.height())?;
            mask.paste(&local, &region)?;
            for s in registry.iter() {
                let box_2d = region.to_parent(&s.box_2d)?;
                let dup = subjects
                    .iter()
                    .any(|o| o.label.eq_ignore_ascii_case(&s.label) && o.box_2d.iou(&box_2d) >= MERGE_IOU);
                if dup {
                    merged += 1;
                    continue;
                }
                subjects.push(SubjectInstance {
                    id: crate::protocol::SubjectId(subjects.len() as u32),
                    label: s.label.clone(),
                    box_2d,
                    mask: None,
                });
            }
        }
        crops.push(outcome.trace);
    }
    let calls = ledger.entries();
    let summary = ledger_summary(&calls, &config.prices);
    Ok(ImageRun {
        mask,
        trace: RunTrace {
            image: image.source.clone(),
            width: image.width,
            height: image.height,
            prompt: config.prompt.clone(),
            scope: config.controller_scope,
            context: ContextRecord {
                query: context.query,
                guidelines: context.guidelines.iter().map(|(g, s)| (g.id.to_string(), *s)).collect(),
                coarse_boxes: context.coarse_boxes,
                crop_plan: context.crop_plan,
                warnings: context.warnings,
            },
            crops,
            subjects,
            merged_duplicates: merged,
            calls,
            summary,
        },
    })
}

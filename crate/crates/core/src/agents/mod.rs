//! Backend contracts and the three agent roles: Worker, Supervisor_eval and
//! Supervisor_boxgen, plus the verifier gate.

pub mod remote;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{BackendError, Error, Result};
use crate::geometry::{BoundingBox, ImageRef};
use crate::guidelines::Guideline;
use crate::metrics::{CostLedger, LedgerEntry};
use crate::protocol::{
    parse_boxgen_output, parse_supervisor_eval, parse_worker_output, worker_output_json, CandidateBox,
    Refinement, SegmenterPrompt, Segmenter, SubjectId, SubjectInstance, SubjectRegistry, SupervisorReport,
};

/// Text part names shared by the prompt builders and the simulated backend.
pub mod parts {
    pub const IMAGE: &str = "image";
    pub const TASK: &str = "task";
    pub const SUBJECTS: &str = "worker_output_json";
    pub const REPORT: &str = "supervisor_report_json";
    pub const REFINEMENTS: &str = "refinements_json";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Worker,
    WorkerRefine,
    SupervisorEval,
    SupervisorBoxgen,
}

impl Role {
    pub const ALL: [Role; 4] = [
        Role::Worker,
        Role::WorkerRefine,
        Role::SupervisorEval,
        Role::SupervisorBoxgen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Worker => "worker",
            Role::WorkerRefine => "worker_refine",
            Role::SupervisorEval => "supervisor_eval",
            Role::SupervisorBoxgen => "supervisor_boxgen",
        }
    }

    fn builtin_template(self) -> &'static str {
        match self {
            Role::Worker => include_str!("../../data/prompts/worker.txt"),
            Role::WorkerRefine => include_str!("../../data/prompts/worker_refine.txt"),
            Role::SupervisorEval => include_str!("../../data/prompts/supervisor_eval.txt"),
            Role::SupervisorBoxgen => include_str!("../../data/prompts/supervisor_boxgen.txt"),
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleConfig {
    pub role: Role,
    pub template: String,
    pub temperature: f64,
    /// Passed through to adapters that support an extended reasoning mode.
    pub thinking_mode: bool,
    pub response_schema: bool,
}

impl RoleConfig {
    pub fn builtin(role: Role) -> Self {
        let (temperature, thinking_mode, response_schema) = match role {
            Role::Worker | Role::WorkerRefine => (0.5, false, false),
            Role::SupervisorEval => (0.3, true, true),
            Role::SupervisorBoxgen => (0.5, false, false),
        };
        Self {
            role,
            template: role.builtin_template().to_string(),
            temperature,
            thinking_mode,
            response_schema,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::Validation(format!(
                "{} temperature {} is outside [0, 2]",
                self.role, self.temperature
            )));
        }
        if self.response_schema && self.role != Role::SupervisorEval {
            return Err(Error::Validation(format!(
                "{} cannot use a response schema",
                self.role
            )));
        }
        Ok(())
    }

    /// Fills `{PROMPT}`, `{GUIDELINES}` and `{SUBJECTS}`.
    pub fn render(&self, prompt: &str, guidelines: &[Guideline], subjects: &str) -> String {
        self.template
            .replace("{PROMPT}", prompt)
            .replace("{GUIDELINES}", &render_guidelines(guidelines))
            .replace("{SUBJECTS}", subjects)
    }
}

pub fn render_guidelines(guidelines: &[Guideline]) -> String {
    if guidelines.is_empty() {
        return "(none)".to_string();
    }
    guidelines
        .iter()
        .map(|g| format!("{}: {}", g.id, g.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Per-role settings used by the agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleSet {
    pub roles: BTreeMap<Role, RoleConfig>,
}

impl Default for RoleSet {
    fn default() -> Self {
        Self {
            roles: Role::ALL.iter().map(|&r| (r, RoleConfig::builtin(r))).collect(),
        }
    }
}

impl RoleSet {
    /// Built-in settings with templates overridden by `<dir>/<role>.txt`
    /// where such files exist.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut set = Self::default();
        for role in Role::ALL {
            let path = dir.join(format!("{}.txt", role.as_str()));
            if path.exists() {
                set.roles.get_mut(&role).expect("all roles present").template = std::fs::read_to_string(&path)?;
            }
        }
        Ok(set)
    }

    pub fn get(&self, role: Role) -> &RoleConfig {
        &self.roles[&role]
    }

    pub fn set_temperature(&mut self, role: Role, t: f64) {
        if let Some(r) = self.roles.get_mut(&role) {
            r.temperature = t;
        }
    }

    pub fn validate(&self) -> Result<()> {
        for role in Role::ALL {
            self.roles
                .get(&role)
                .ok_or_else(|| Error::Validation(format!("no settings for role {role}")))?
                .validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Part {
    Text { name: String, text: String },
    ImageRef { name: String, image: ImageRef },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub role: Role,
    pub system: String,
    pub parts: Vec<Part>,
    pub temperature: f64,
    pub thinking_mode: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_schema: Option<Value>,
}

impl BackendRequest {
    pub fn text(&self, name: &str) -> Option<&str> {
        self.parts.iter().find_map(|p| match p {
            Part::Text { name: n, text } if n == name => Some(text.as_str()),
            _ => None,
        })
    }

    pub fn image(&self) -> Option<&ImageRef> {
        self.parts.iter().find_map(|p| match p {
            Part::ImageRef { image, .. } => Some(image),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub text: String,
    pub usage: Usage,
    /// Wall time reported by the backend; when absent the caller measures.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

/// A text-in, text-out model endpoint serving every agent role.
pub trait ModelBackend: Send + Sync {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError>;
}

/// Image-text match scorer used by the verifier gate. `crop` is in the
/// frame of `image`.
pub trait VerifierScorer: Send + Sync {
    fn score(&self, image: &ImageRef, crop: &BoundingBox, label: &str) -> Result<f64, BackendError>;
}

/// JSON schema requested from Supervisor_eval.
pub fn supervisor_report_schema() -> Value {
    let string = json!({"type": "string"});
    let bbox = json!({"type": "array", "items": {"type": "integer"}, "minItems": 4, "maxItems": 4});
    json!({
        "type": "object",
        "required": ["missing_objects", "false_positives", "refinements"],
        "properties": {
            "missing_objects": {"type": "array", "items": {
                "type": "object",
                "required": ["missing_object_id", "label", "reason"],
                "properties": {"missing_object_id": string, "label": string, "reason": string}
            }},
            "false_positives": {"type": "array", "items": {
                "type": "object",
                "required": ["id", "label", "reason"],
                "properties": {"id": string, "label": string, "subject_ref": string, "reason": string}
            }},
            "refinements": {"type": "array", "items": {
                "type": "object",
                "required": ["box_id", "instruction"],
                "properties": {"box_id": string, "instruction": string, "replacement_box": bbox}
            }}
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifierSettings {
    /// Fraction of the box height/width added on each side of the crop.
    pub buffer_frac: f64,
    pub threshold: f64,
}

impl Default for VerifierSettings {
    fn default() -> Self {
        Self {
            buffer_frac: 0.1,
            threshold: 0.5,
        }
    }
}

impl VerifierSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) || !(self.buffer_frac >= 0.0 && self.buffer_frac.is_finite()) {
            return Err(Error::Validation(
                "verifier threshold must be in [0, 1] and buffer >= 0".into(),
            ));
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scores every candidate and marks those at or above the threshold as
/// verified. Candidates whose scoring fails are rejected with a warning.
pub fn verify_candidates(
    candidates: &[CandidateBox],
    image: &ImageRef,
    scorer: &dyn VerifierScorer,
    settings: &VerifierSettings,
) -> (Vec<CandidateBox>, Vec<String>) {
    let mut warnings = Vec::new();
    let out = candidates
        .iter()
        .map(|c| {
            let crop = c.box_2d.expand_frac(settings.buffer_frac, image.width, image.height);
            let mut c = c.clone();
            match scorer.score(image, &crop, &c.label) {
                Ok(logit) => {
                    let p = sigmoid(logit);
                    c.score = Some(p);
                    c.verified = p >= settings.threshold;
                }
                Err(e) => {
                    warnings.push(format!("scoring {} failed: {e}; rejected", c.box_id));
                    c.score = None;
                    c.verified = false;
                }
            }
            c
        })
        .collect();
    (out, warnings)
}

pub fn segment(segmenter: &dyn Segmenter, image: &ImageRef, prompt: &SegmenterPrompt) -> Result<crate::geometry::BinaryMask> {
    prompt.validate()?;
    Ok(segmenter.segment(image, prompt)?)
}

/// Backends and settings shared by all agent calls of a run.
pub struct Agents<'a> {
    pub model: &'a dyn ModelBackend,
    pub segmenter: &'a dyn Segmenter,
    pub scorer: &'a dyn VerifierScorer,
    pub ledger: &'a CostLedger,
    pub roles: &'a RoleSet,
    pub verifier: VerifierSettings,
}

impl Agents<'_> {
    /// Sends one request, retrying once on failure. Every attempt is
    /// recorded in the ledger; failed attempts carry zero tokens.
    pub fn call(&self, role: Role, system: String, parts: Vec<Part>) -> Result<BackendResponse, BackendError> {
        let cfg = self.roles.get(role);
        let request = BackendRequest {
            role,
            system,
            parts,
            temperature: cfg.temperature,
            thinking_mode: cfg.thinking_mode,
            response_schema: cfg.response_schema.then(supervisor_report_schema),
        };
        let mut last = None;
        for _ in 0..2 {
            let started = Instant::now();
            let result = self.model.complete(&request);
            let measured = started.elapsed().as_millis() as u64;
            match result {
                Ok(resp) => {
                    self.ledger.record(LedgerEntry {
                        role: role.as_str().to_string(),
                        input_tokens: resp.usage.input_tokens,
                        output_tokens: resp.usage.output_tokens,
                        latency_ms: resp.latency_ms.unwrap_or(measured),
                        ok: true,
                    });
                    return Ok(resp);
                }
                Err(e) => {
                    self.ledger.record(LedgerEntry {
                        role: role.as_str().to_string(),
                        input_tokens: 0,
                        output_tokens: 0,
                        latency_ms: measured,
                        ok: false,
                    });
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

fn image_part(image: &ImageRef) -> Part {
    Part::ImageRef {
        name: parts::IMAGE.into(),
        image: image.clone(),
    }
}

fn text_part(name: &str, text: String) -> Part {
    Part::Text {
        name: name.into(),
        text,
    }
}

/// Outcome of an agent step: the value plus anything worth logging.
#[derive(Debug, Clone, PartialEq)]
pub struct Step<T> {
    pub value: T,
    pub warnings: Vec<String>,
    /// Raw model text that could not be parsed, kept for the trace.
    pub raw_unparsed: Option<String>,
}

impl<T> Step<T> {
    fn ok(value: T, warnings: Vec<String>) -> Self {
        Self {
            value,
            warnings,
            raw_unparsed: None,
        }
    }
}

/// First Worker pass: detect subjects and segment each one.
pub fn worker_detect(
    agents: &Agents<'_>,
    image: &ImageRef,
    prompt: &str,
    guidelines: &[Guideline],
) -> Result<Step<SubjectRegistry>, BackendError> {
    let system = agents.roles.get(Role::Worker).render(prompt, guidelines, "[]");
    let resp = agents.call(
        Role::Worker,
        system,
        vec![image_part(image), text_part(parts::TASK, prompt.to_string())],
    )?;
    let parsed = match parse_worker_output(&resp.text, image.width, image.height) {
        Ok(p) => p,
        Err(e) => {
            return Ok(Step {
                value: SubjectRegistry::new(),
                warnings: vec![format!("worker output unusable, starting empty: {e}")],
                raw_unparsed: Some(resp.text),
            })
        }
    };
    let mut warnings = parsed.warnings;
    let mut instances = parsed.value;
    for inst in &mut instances {
        match agents
            .segmenter
            .segment(image, &SegmenterPrompt::BoxPositive { box_2d: inst.box_2d })
        {
            Ok(mask) => inst.mask = Some(mask),
            Err(e) => warnings.push(format!("segmenter failed for {}: {e}", inst.id)),
        }
    }
    let registry = SubjectRegistry::from_instances(instances).expect("parser yields unique ids");
    Ok(Step::ok(registry, warnings))
}

/// Later Worker pass: turns refinements into replacement boxes. Refinements
/// that already carry a box are kept as they are.
pub fn worker_refine(
    agents: &Agents<'_>,
    image: &ImageRef,
    prompt: &str,
    guidelines: &[Guideline],
    registry: &SubjectRegistry,
    refinements: &[Refinement],
) -> Result<Step<Vec<Refinement>>, BackendError> {
    let subjects = worker_output_json(&registry.to_instances());
    let system = agents.roles.get(Role::WorkerRefine).render(prompt, guidelines, &subjects);
    let resp = agents.call(
        Role::WorkerRefine,
        system,
        vec![
            image_part(image),
            text_part(parts::SUBJECTS, subjects),
            text_part(
                parts::REFINEMENTS,
                serde_json::to_string(refinements).expect("refinements serialize"),
            ),
        ],
    )?;
    let mut out = refinements.to_vec();
    if out.iter().all(|r| r.replacement_box.is_some()) {
        return Ok(Step::ok(out, Vec::new()));
    }
    let parsed = match parse_worker_output(&resp.text, image.width, image.height) {
        Ok(p) => p,
        Err(e) => {
            return Ok(Step {
                value: out,
                warnings: vec![format!("worker refinement output unusable: {e}")],
                raw_unparsed: Some(resp.text),
            })
        }
    };
    let boxes: BTreeMap<SubjectId, BoundingBox> = parsed.value.iter().map(|s| (s.id, s.box_2d)).collect();
    for r in out.iter_mut().filter(|r| r.replacement_box.is_none()) {
        r.replacement_box = boxes.get(&r.box_id).copied();
    }
    Ok(Step::ok(out, parsed.warnings))
}

/// Supervisor critique. An unparseable answer counts as a clean report so
/// that issues are never invented.
pub fn supervisor_evaluate(
    agents: &Agents<'_>,
    image: &ImageRef,
    prompt: &str,
    guidelines: &[Guideline],
    registry: &SubjectRegistry,
) -> Result<Step<SupervisorReport>, BackendError> {
    let subjects = worker_output_json(&registry.to_instances());
    let system = agents.roles.get(Role::SupervisorEval).render(prompt, guidelines, &subjects);
    let resp = agents.call(
        Role::SupervisorEval,
        system,
        vec![image_part(image), text_part(parts::SUBJECTS, subjects)],
    )?;
    match parse_supervisor_eval(&resp.text) {
        Ok(p) => Ok(Step::ok(p.value, p.warnings)),
        Err(e) => Ok(Step {
            value: SupervisorReport::default(),
            warnings: vec![format!("SUPERVISOR REPORT UNPARSEABLE, treated as clean: {e}")],
            raw_unparsed: Some(resp.text),
        }),
    }
}

/// Candidate boxes for the report's missing and false entries. Returns
/// `None` without calling the backend when there is nothing to locate.
pub fn supervisor_boxgen(
    agents: &Agents<'_>,
    image: &ImageRef,
    prompt: &str,
    guidelines: &[Guideline],
    registry: &SubjectRegistry,
    report: &SupervisorReport,
) -> Result<Option<Step<Vec<CandidateBox>>>, BackendError> {
    if !report.needs_boxes() {
        return Ok(None);
    }
    let subjects = worker_output_json(&registry.to_instances());
    let system = agents.roles.get(Role::SupervisorBoxgen).render(prompt, guidelines, &subjects);
    let resp = agents.call(
        Role::SupervisorBoxgen,
        system,
        vec![
            image_part(image),
            text_part(parts::SUBJECTS, subjects),
            text_part(parts::REPORT, serde_json::to_string(report).expect("report serializes")),
        ],
    )?;
    Ok(Some(
        match parse_boxgen_output(&resp.text, report, image.width, image.height) {
            Ok(p) => Step::ok(p.value, p.warnings),
            Err(e) => Step {
                value: Vec::new(),
                warnings: vec![format!("boxgen output unusable, no candidates: {e}")],
                raw_unparsed: Some(resp.text),
            },
        },
    ))
}

/// Instances without masks, for compact trace snapshots.
pub fn snapshot(registry: &SubjectRegistry) -> Vec<SubjectInstance> {
    registry
        .iter()
        .map(|s| SubjectInstance {
            mask: None,
            ..s.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BinaryMask;
    use std::sync::Mutex;

    struct Scripted {
        replies: Mutex<Vec<Result<String, BackendError>>>,
        seen: Mutex<Vec<BackendRequest>>,
    }

    impl Scripted {
        fn new(replies: Vec<Result<&str, BackendError>>) -> Self {
            Self {
                replies: Mutex::new(replies.into_iter().rev().map(|r| r.map(String::from)).collect()),
                seen: Mutex::new(Vec::new()),
            }
        }
    }

    impl ModelBackend for Scripted {
        fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
            self.seen.lock().unwrap().push(request.clone());
            let text = self.replies.lock().unwrap().pop().expect("scripted reply")?;
            Ok(BackendResponse {
                text,
                usage: Usage {
                    input_tokens: 2000,
                    output_tokens: 200,
                },
                latency_ms: Some(1100),
            })
        }
    }

    struct BoxSeg;
    impl Segmenter for BoxSeg {
        fn segment(&self, image: &ImageRef, p: &SegmenterPrompt) -> Result<BinaryMask, BackendError> {
            Ok(match p {
                SegmenterPrompt::BoxPositive { box_2d } => crate::geometry::rasterize(box_2d, image.width, image.height).unwrap(),
                _ => BinaryMask::new(image.width, image.height),
            })
        }
    }

    struct Logit(f64);
    impl VerifierScorer for Logit {
        fn score(&self, _: &ImageRef, _: &BoundingBox, _: &str) -> Result<f64, BackendError> {
            Ok(self.0)
        }
    }

    fn with_agents<T>(model: &dyn ModelBackend, f: impl FnOnce(&Agents<'_>, &CostLedger) -> T) -> T {
        let ledger = CostLedger::new();
        let roles = RoleSet::default();
        let agents = Agents {
            model,
            segmenter: &BoxSeg,
            scorer: &Logit(0.0),
            ledger: &ledger,
            roles: &roles,
            verifier: VerifierSettings::default(),
        };
        f(&agents, &ledger)
    }

    #[test]
    fn role_defaults() {
        let roles = RoleSet::default();
        roles.validate().unwrap();
        assert_eq!(roles.get(Role::Worker).temperature, 0.5);
        assert_eq!(roles.get(Role::SupervisorEval).temperature, 0.3);
        assert_eq!(roles.get(Role::SupervisorBoxgen).temperature, 0.5);
        assert!(roles.get(Role::SupervisorEval).response_schema);
        let mut bad = RoleConfig::builtin(Role::Worker);
        bad.response_schema = true;
        assert!(bad.validate().is_err());
        bad = RoleConfig::builtin(Role::Worker);
        bad.temperature = 2.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn templates_render_placeholders() {
        let g = Guideline {
            id: crate::guidelines::GuidelineId(3),
            text: "Riders count.".into(),
            summary: String::new(),
        };
        let text = RoleConfig::builtin(Role::SupervisorEval).render("Pedestrian", &[g], "{\"instances\":[]}");
        assert!(text.contains("Target class: Pedestrian"));
        assert!(text.contains("G3: Riders count."));
        assert!(!text.contains("{PROMPT}") && !text.contains("{GUIDELINES}") && !text.contains("{SUBJECTS}"));
    }

    #[test]
    fn retry_then_fail_records_every_attempt() {
        let model = Scripted::new(vec![
            Err(BackendError::Transport("reset".into())),
            Ok(r#"{"instances":[{"id":"sub_0","label":"pedestrian","box_2d":[1,1,5,5]}]}"#),
        ]);
        with_agents(&model, |agents, ledger| {
            let image = ImageRef::new("a", 10, 10);
            let step = worker_detect(agents, &image, "Pedestrian", &[]).unwrap();
            assert_eq!(step.value.len(), 1);
            assert_eq!(step.value.get(SubjectId(0)).unwrap().mask.as_ref().unwrap().count(), 16);
            let e = ledger.entries();
            assert_eq!(e.len(), 2);
            assert_eq!((e[0].ok, e[0].input_tokens), (false, 0));
            assert_eq!((e[1].ok, e[1].input_tokens, e[1].latency_ms), (true, 2000, 1100));
        });
        let model = Scripted::new(vec![
            Err(BackendError::Transport("reset".into())),
            Err(BackendError::Transport("reset".into())),
        ]);
        with_agents(&model, |agents, ledger| {
            assert!(worker_detect(agents, &ImageRef::new("a", 10, 10), "P", &[]).is_err());
            assert_eq!(ledger.len(), 2);
        });
    }

    #[test]
    fn unparseable_outputs_degrade() {
        let model = Scripted::new(vec![Ok("sorry"), Ok("not json either")]);
        with_agents(&model, |agents, _| {
            let image = ImageRef::new("a", 10, 10);
            let reg = worker_detect(agents, &image, "P", &[]).unwrap();
            assert!(reg.value.is_empty());
            assert_eq!(reg.raw_unparsed.as_deref(), Some("sorry"));
            let rep = supervisor_evaluate(agents, &image, "P", &[], &reg.value).unwrap();
            assert!(rep.value.is_clean());
            assert!(rep.warnings[0].contains("UNPARSEABLE"));
        });
    }

    #[test]
    fn supervisor_request_shape() {
        let model = Scripted::new(vec![Ok(r#"{"missing_objects":[],"false_positives":[],"refinements":[]}"#)]);
        with_agents(&model, |agents, _| {
            let image = ImageRef::new("a", 10, 10);
            supervisor_evaluate(agents, &image, "P", &[], &SubjectRegistry::new()).unwrap();
        });
        let req = &model.seen.lock().unwrap()[0];
        assert_eq!(req.role, Role::SupervisorEval);
        assert_eq!(req.temperature, 0.3);
        assert!(req.thinking_mode);
        assert!(req.response_schema.is_some());
        assert_eq!(req.text(parts::SUBJECTS), Some(r#"{"instances":[]}"#));
        assert_eq!(req.image().unwrap().source, "a");
    }

    #[test]
    fn boxgen_skipped_on_clean_report() {
        let model = Scripted::new(vec![]);
        with_agents(&model, |agents, ledger| {
            let image = ImageRef::new("a", 10, 10);
            let r = supervisor_boxgen(agents, &image, "P", &[], &SubjectRegistry::new(), &SupervisorReport::default()).unwrap();
            assert!(r.is_none());
            assert!(ledger.is_empty());
        });
    }

    #[test]
    fn verifier_threshold_is_inclusive() {
        let image = ImageRef::new("a", 100, 100);
        let c = CandidateBox {
            box_id: "m_0".parse().unwrap(),
            label: "umbrella".into(),
            box_2d: BoundingBox::new(0, 0, 10, 10).unwrap(),
            verified: false,
            score: None,
        };
        let s = VerifierSettings::default();
        let (v, _) = verify_candidates(std::slice::from_ref(&c), &image, &Logit(0.0), &s);
        assert!(v[0].verified);
        assert_eq!(v[0].score, Some(0.5));
        let (v, _) = verify_candidates(&[c], &image, &Logit(-1.0), &s);
        assert!(!v[0].verified);
        assert!((v[0].score.unwrap() - 0.2689414213699951).abs() < 1e-12);
    }

    #[test]
    fn refine_fills_missing_boxes() {
        let model = Scripted::new(vec![Ok(
            r#"{"instances":[{"id":"sub_0","label":"pedestrian","box_2d":[150,150,250,250]}]}"#,
        )]);
        with_agents(&model, |agents, _| {
            let image = ImageRef::new("a", 400, 400);
            let mut reg = SubjectRegistry::new();
            reg.insert_new("pedestrian".into(), BoundingBox::new(100, 100, 200, 200).unwrap(), None);
            let refs = vec![Refinement {
                box_id: SubjectId(0),
                instruction: "move down and right".into(),
                replacement_box: None,
            }];
            let out = worker_refine(agents, &image, "P", &[], &reg, &refs).unwrap();
            assert_eq!(out.value[0].replacement_box.unwrap().to_array(), [150, 150, 250, 250]);
        });
    }
}

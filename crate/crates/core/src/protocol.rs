//! Agent wire protocol: message types, tolerant parsing, the subject
//! registry and application of verified supervisor actions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{BackendError, Error, Result};
use crate::geometry::{BinaryMask, BoundingBox, ImageRef};

macro_rules! prefixed_id {
    ($(#[$doc:meta])* $name:ident, $prefix:literal) => {
        $(#[$doc])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(pub u32);

        impl $name {
            pub const PREFIX: &'static str = $prefix;
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}{}", $prefix, self.0)
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                s.strip_prefix($prefix)
                    .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
                    .and_then(|d| d.parse().ok())
                    .map($name)
                    .ok_or_else(|| {
                        Error::Validation(format!("{s:?} does not match {}<n>", $prefix))
                    })
            }
        }

        impl TryFrom<String> for $name {
            type Error = Error;
            fn try_from(s: String) -> Result<Self> {
                s.parse()
            }
        }

        impl From<$name> for String {
            fn from(id: $name) -> String {
                id.to_string()
            }
        }
    };
}

prefixed_id!(
    /// Worker subject id, `sub_<n>`.
    SubjectId,
    "sub_"
);
prefixed_id!(
    /// Supervisor missing-object id, `m_<n>`.
    MissingId,
    "m_"
);
prefixed_id!(
    /// Supervisor false-positive id, `e_<n>`.
    FalseId,
    "e_"
);

/// Id of a box proposed by Supervisor_boxgen: refers to a missing object
/// or a false positive of the report it answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CandidateRef {
    Missing(MissingId),
    False(FalseId),
}

impl fmt::Display for CandidateRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CandidateRef::Missing(id) => id.fmt(f),
            CandidateRef::False(id) => id.fmt(f),
        }
    }
}

impl FromStr for CandidateRef {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.starts_with(MissingId::PREFIX) {
            s.parse().map(CandidateRef::Missing)
        } else {
            s.parse().map(CandidateRef::False)
        }
    }
}

impl TryFrom<String> for CandidateRef {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CandidateRef> for String {
    fn from(id: CandidateRef) -> String {
        id.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectInstance {
    pub id: SubjectId,
    pub label: String,
    pub box_2d: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<BinaryMask>,
}

/// Value parsed from model text together with non-fatal problems found
/// along the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub value: T,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingObject {
    pub missing_object_id: MissingId,
    pub label: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FalsePositive {
    #[serde(alias = "false_positive_id")]
    pub id: FalseId,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_ref: Option<SubjectId>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Refinement {
    pub box_id: SubjectId,
    #[serde(alias = "reason")]
    pub instruction: String,
    #[serde(
        default,
        alias = "box_2d",
        skip_serializing_if = "Option::is_none",
        deserialize_with = "lenient_box_opt"
    )]
    pub replacement_box: Option<BoundingBox>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisorReport {
    pub missing_objects: Vec<MissingObject>,
    pub false_positives: Vec<FalsePositive>,
    pub refinements: Vec<Refinement>,
}

impl SupervisorReport {
    pub fn is_clean(&self) -> bool {
        self.missing_objects.is_empty() && self.false_positives.is_empty() && self.refinements.is_empty()
    }

    /// True when there is anything for Supervisor_boxgen to locate.
    pub fn needs_boxes(&self) -> bool {
        !self.missing_objects.is_empty() || !self.false_positives.is_empty()
    }

    pub fn label_of(&self, id: CandidateRef) -> Option<&str> {
        match id {
            CandidateRef::Missing(m) => self
                .missing_objects
                .iter()
                .find(|o| o.missing_object_id == m)
                .map(|o| o.label.as_str()),
            CandidateRef::False(e) => self
                .false_positives
                .iter()
                .find(|o| o.id == e)
                .map(|o| o.label.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateBox {
    pub box_id: CandidateRef,
    pub label: String,
    pub box_2d: BoundingBox,
    #[serde(default)]
    pub verified: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

fn lenient_box_opt<'de, D>(de: D) -> std::result::Result<Option<BoundingBox>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    let raw: Option<[f64; 4]> = Option::deserialize(de)?;
    match raw {
        None => Ok(None),
        Some(c) => BoundingBox::from_f64_clipped(c, u32::MAX, u32::MAX)
            .map(Some)
            .ok_or_else(|| serde::de::Error::custom(format!("degenerate box {c:?}"))),
    }
}

/// Finds the first JSON value in free-form model text. Code fences and
/// surrounding prose are skipped; a bare `"key": [...]` fragment is
/// accepted by wrapping it in braces.
pub fn extract_json(text: &str) -> Option<Value> {
    // bare `"key": value, ...` fragments are read as one object
    let trimmed = text.trim().trim_end_matches(',');
    if trimmed.starts_with('"') {
        if let Ok(v) = serde_json::from_str::<Value>(&format!("{{{trimmed}}}")) {
            return Some(v);
        }
    }
    for (start, ch) in text.char_indices() {
        if ch != '{' && ch != '[' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        if let Some(Ok(v)) = stream.next() {
            if v.is_object() || v.is_array() {
                return Some(v);
            }
        }
    }
    None
}

fn instances_of(v: Value, raw: &str) -> Result<Vec<Value>> {
    match v {
        Value::Array(items) => Ok(items),
        Value::Object(mut map) => match map.remove("instances") {
            Some(Value::Array(items)) => Ok(items),
            Some(_) => Err(Error::protocol("\"instances\" is not a list", raw)),
            None => Err(Error::protocol("missing \"instances\" field", raw)),
        },
        _ => Err(Error::protocol("expected an object with \"instances\"", raw)),
    }
}

#[derive(Deserialize)]
struct WireInstance {
    id: Option<String>,
    label: String,
    box_2d: [f64; 4],
}

/// Parses Worker output. Boxes are clipped to `width x height`; entries
/// with a malformed shape, id or an empty box are dropped with a warning.
/// Missing ids are assigned after the largest id present.
pub fn parse_worker_output(text: &str, width: u32, height: u32) -> Result<Parsed<Vec<SubjectInstance>>> {
    let value = extract_json(text).ok_or_else(|| Error::protocol("no JSON found in worker output", text))?;
    let items = instances_of(value, text)?;
    let mut warnings = Vec::new();
    let mut out: Vec<SubjectInstance> = Vec::new();
    let mut unnamed = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, item) in items.into_iter().enumerate() {
        let wire: WireInstance = match serde_json::from_value(item) {
            Ok(w) => w,
            Err(e) => {
                warnings.push(format!("instance {i} dropped: {e}"));
                continue;
            }
        };
        let id = match wire.id.as_deref().map(SubjectId::from_str) {
            Some(Ok(id)) if seen.insert(id) => Some(id),
            Some(Ok(id)) => {
                warnings.push(format!("duplicate id {id}; a fresh id is assigned"));
                None
            }
            Some(Err(e)) => {
                warnings.push(format!("instance {i}: {e}; a fresh id is assigned"));
                None
            }
            None => None,
        };
        let Some(box_2d) = BoundingBox::from_f64_clipped(wire.box_2d, width, height) else {
            warnings.push(format!("instance {i} dropped: empty box {:?}", wire.box_2d));
            continue;
        };
        let inst = SubjectInstance {
            id: id.unwrap_or(SubjectId(0)),
            label: wire.label,
            box_2d,
            mask: None,
        };
        if id.is_none() {
            unnamed.push(out.len());
        }
        out.push(inst);
    }
    let first_free = seen.iter().next_back().map_or(0, |id| id.0 + 1);
    for (next, i) in (first_free..).zip(unnamed) {
        out[i].id = SubjectId(next);
    }
    Ok(Parsed { value: out, warnings })
}

fn mentions_guideline(reason: &str) -> bool {
    reason.match_indices('G').any(|(i, _)| {
        let rest = reason[i + 1..].trim_start_matches('_');
        rest.starts_with(|c: char| c.is_ascii_digit() || c == '<')
    })
}

/// Parses a Supervisor_eval report. All three lists must be present.
pub fn parse_supervisor_eval(text: &str) -> Result<Parsed<SupervisorReport>> {
    let value = extract_json(text).ok_or_else(|| Error::protocol("no JSON found in supervisor report", text))?;
    let Value::Object(map) = &value else {
        return Err(Error::protocol("supervisor report is not an object", text));
    };
    for field in ["missing_objects", "false_positives", "refinements"] {
        match map.get(field) {
            Some(Value::Array(_)) => {}
            Some(_) => return Err(Error::protocol(format!("\"{field}\" is not a list"), text)),
            None => return Err(Error::protocol(format!("missing \"{field}\" field"), text)),
        }
    }
    let list = |field: &str| map[field].as_array().expect("checked above").clone();
    let mut warnings = Vec::new();

    let mut missing_objects = Vec::new();
    for (i, item) in list("missing_objects").into_iter().enumerate() {
        let m: MissingObject = serde_json::from_value(item)
            .map_err(|e| Error::protocol(format!("missing_objects[{i}]: {e}"), text))?;
        missing_objects.push(m);
    }
    let mut false_positives = Vec::new();
    for (i, item) in list("false_positives").into_iter().enumerate() {
        let f: FalsePositive = serde_json::from_value(item)
            .map_err(|e| Error::protocol(format!("false_positives[{i}]: {e}"), text))?;
        false_positives.push(f);
    }
    let mut refinements = Vec::new();
    for (i, item) in list("refinements").into_iter().enumerate() {
        let r: Refinement = serde_json::from_value(item)
            .map_err(|e| Error::protocol(format!("refinements[{i}]: {e}"), text))?;
        refinements.push(r);
    }

    let mut ids = BTreeSet::new();
    for m in &missing_objects {
        if !ids.insert(m.missing_object_id.to_string()) {
            return Err(Error::protocol(format!("duplicate id {}", m.missing_object_id), text));
        }
        check_reason(&m.reason, &m.missing_object_id.to_string(), text, &mut warnings)?;
    }
    for f in &false_positives {
        if !ids.insert(f.id.to_string()) {
            return Err(Error::protocol(format!("duplicate id {}", f.id), text));
        }
        check_reason(&f.reason, &f.id.to_string(), text, &mut warnings)?;
    }
    let mut refined = BTreeSet::new();
    for r in &refinements {
        if !refined.insert(r.box_id) {
            return Err(Error::protocol(format!("duplicate refinement for {}", r.box_id), text));
        }
        if r.instruction.trim().is_empty() {
            return Err(Error::protocol(format!("empty instruction for {}", r.box_id), text));
        }
    }
    Ok(Parsed {
        value: SupervisorReport {
            missing_objects,
            false_positives,
            refinements,
        },
        warnings,
    })
}

fn check_reason(reason: &str, id: &str, raw: &str, warnings: &mut Vec<String>) -> Result<()> {
    if reason.trim().is_empty() {
        return Err(Error::protocol(format!("empty reason for {id}"), raw));
    }
    if !mentions_guideline(reason) {
        warnings.push(format!("reason for {id} cites no guideline id"));
    }
    Ok(())
}

#[derive(Deserialize)]
struct WireCandidate {
    box_id: String,
    #[serde(default)]
    label: Option<String>,
    box_2d: [f64; 4],
}

/// Parses Supervisor_boxgen output against the report it answers. Ids not
/// in the report, duplicates and empty boxes are dropped with a warning.
pub fn parse_boxgen_output(
    text: &str,
    report: &SupervisorReport,
    width: u32,
    height: u32,
) -> Result<Parsed<Vec<CandidateBox>>> {
    let value = extract_json(text).ok_or_else(|| Error::protocol("no JSON found in boxgen output", text))?;
    let items = instances_of(value, text)?;
    let mut warnings = Vec::new();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, item) in items.into_iter().enumerate() {
        let wire: WireCandidate = match serde_json::from_value(item) {
            Ok(w) => w,
            Err(e) => {
                warnings.push(format!("candidate {i} dropped: {e}"));
                continue;
            }
        };
        let id = match wire.box_id.parse::<CandidateRef>() {
            Ok(id) => id,
            Err(e) => {
                warnings.push(format!("candidate {i} dropped: {e}"));
                continue;
            }
        };
        let Some(report_label) = report.label_of(id) else {
            warnings.push(format!("candidate {id} dropped: not in the report"));
            continue;
        };
        if !seen.insert(id) {
            warnings.push(format!("candidate {id} dropped: duplicate"));
            continue;
        }
        let Some(box_2d) = BoundingBox::from_f64_clipped(wire.box_2d, width, height) else {
            warnings.push(format!("candidate {id} dropped: empty box {:?}", wire.box_2d));
            continue;
        };
        out.push(CandidateBox {
            box_id: id,
            label: wire.label.unwrap_or_else(|| report_label.to_string()),
            box_2d,
            verified: false,
            score: None,
        });
    }
    Ok(Parsed { value: out, warnings })
}

/// Serializes Worker-style output (`{"instances": [...]}`) without masks.
pub fn worker_output_json(subjects: &[SubjectInstance]) -> String {
    #[derive(Serialize)]
    struct Wire<'a> {
        id: SubjectId,
        label: &'a str,
        box_2d: BoundingBox,
    }
    #[derive(Serialize)]
    struct Out<'a> {
        instances: Vec<Wire<'a>>,
    }
    let out = Out {
        instances: subjects
            .iter()
            .map(|s| Wire {
                id: s.id,
                label: &s.label,
                box_2d: s.box_2d,
            })
            .collect(),
    };
    serde_json::to_string(&out).expect("plain data serializes")
}

pub fn boxgen_output_json(candidates: &[CandidateBox]) -> String {
    #[derive(Serialize)]
    struct Wire<'a> {
        box_id: CandidateRef,
        label: &'a str,
        box_2d: BoundingBox,
    }
    #[derive(Serialize)]
    struct Out<'a> {
        instances: Vec<Wire<'a>>,
    }
    let out = Out {
        instances: candidates
            .iter()
            .map(|c| Wire {
                box_id: c.box_id,
                label: &c.label,
                box_2d: c.box_2d,
            })
            .collect(),
    };
    serde_json::to_string(&out).expect("plain data serializes")
}

/// The Worker's live set of subjects. Ids are never reused within a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubjectRegistry {
    subjects: BTreeMap<u32, SubjectInstance>,
    next_id: u32,
}

impl SubjectRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Seeds a registry from parsed Worker instances, keeping their ids.
    pub fn from_instances(instances: Vec<SubjectInstance>) -> Result<Self> {
        let mut reg = Self::new();
        for inst in instances {
            if reg.subjects.contains_key(&inst.id.0) {
                return Err(Error::Validation(format!("duplicate subject id {}", inst.id)));
            }
            reg.next_id = reg.next_id.max(inst.id.0 + 1);
            reg.subjects.insert(inst.id.0, inst);
        }
        Ok(reg)
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn next_id(&self) -> SubjectId {
        SubjectId(self.next_id)
    }

    pub fn get(&self, id: SubjectId) -> Option<&SubjectInstance> {
        self.subjects.get(&id.0)
    }

    pub fn get_mut(&mut self, id: SubjectId) -> Option<&mut SubjectInstance> {
        self.subjects.get_mut(&id.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SubjectInstance> {
        self.subjects.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut SubjectInstance> {
        self.subjects.values_mut()
    }

    pub fn ids(&self) -> Vec<SubjectId> {
        self.subjects.keys().map(|&k| SubjectId(k)).collect()
    }

    pub fn insert_new(&mut self, label: String, box_2d: BoundingBox, mask: Option<BinaryMask>) -> SubjectId {
        let id = SubjectId(self.next_id);
        self.next_id += 1;
        self.subjects.insert(
            id.0,
            SubjectInstance {
                id,
                label,
                box_2d,
                mask,
            },
        );
        id
    }

    pub fn remove(&mut self, id: SubjectId) -> Option<SubjectInstance> {
        self.subjects.remove(&id.0)
    }

    /// Subject whose box overlaps `b` most, if that IoU reaches `min_iou`.
    pub fn best_match(&self, b: &BoundingBox, min_iou: f64) -> Option<SubjectId> {
        let mut best: Option<(SubjectId, f64)> = None;
        for s in self.subjects.values() {
            let iou = s.box_2d.iou(b);
            if iou >= min_iou && best.is_none_or(|(_, v)| iou > v) {
                best = Some((s.id, iou));
            }
        }
        best.map(|(id, _)| id)
    }

    pub fn to_instances(&self) -> Vec<SubjectInstance> {
        self.subjects.values().cloned().collect()
    }

    /// Union of all subject masks, in the registry's image frame.
    pub fn class_mask(&self, width: u32, height: u32) -> Result<BinaryMask> {
        let mut out = BinaryMask::new(width, height);
        for s in self.subjects.values() {
            if let Some(m) = &s.mask {
                out.union_in_place(m)?;
            }
        }
        Ok(out)
    }
}

/// Prompt given to the promptable segmenter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SegmenterPrompt {
    BoxPositive { box_2d: BoundingBox },
    /// Box plus a negative point inside it; the segmenter answers with an
    /// empty mask, signalling that the subject is erased.
    BoxWithNegativePoint { box_2d: BoundingBox, point: (u32, u32) },
}

impl SegmenterPrompt {
    pub fn erase(b: BoundingBox) -> Self {
        let (cy, cx) = b.center();
        SegmenterPrompt::BoxWithNegativePoint {
            box_2d: b,
            point: (cy, cx),
        }
    }

    pub fn box_2d(&self) -> BoundingBox {
        match *self {
            SegmenterPrompt::BoxPositive { box_2d } | SegmenterPrompt::BoxWithNegativePoint { box_2d, .. } => {
                box_2d
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let SegmenterPrompt::BoxWithNegativePoint { box_2d, point } = self {
            if !box_2d.contains_point(point.0, point.1) {
                return Err(Error::Validation(format!(
                    "negative point {point:?} lies outside box {:?}",
                    box_2d.to_array()
                )));
            }
        }
        Ok(())
    }
}

/// Promptable segmenter. Masks are in the frame of `image`.
pub trait Segmenter: Send + Sync {
    fn segment(&self, image: &ImageRef, prompt: &SegmenterPrompt) -> Result<BinaryMask, BackendError>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeSummary {
    pub added: Vec<SubjectId>,
    pub removed: Vec<SubjectId>,
    pub refined: Vec<SubjectId>,
    pub warnings: Vec<String>,
}

impl ChangeSummary {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.added.len(), self.removed.len(), self.refined.len())
    }
}

/// Minimum IoU for linking a false-positive candidate to a subject when the
/// report gives no explicit `subject_ref`.
pub const FALSE_POSITIVE_MATCH_IOU: f64 = 0.5;

/// Applies verified candidates and refinements to `registry`, in order:
/// additions, removals, then refinements. Refinements need a
/// `replacement_box`; instruction-only ones are skipped with a warning.
pub fn apply_actions(
    registry: &mut SubjectRegistry,
    candidates: &[CandidateBox],
    report: &SupervisorReport,
    segmenter: &dyn Segmenter,
    image: &ImageRef,
) -> ChangeSummary {
    let mut summary = ChangeSummary::default();

    for c in candidates.iter().filter(|c| c.verified) {
        if let CandidateRef::Missing(_) = c.box_id {
            let prompt = SegmenterPrompt::BoxPositive { box_2d: c.box_2d };
            let mask = match segmenter.segment(image, &prompt) {
                Ok(m) => Some(m),
                Err(e) => {
                    summary
                        .warnings
                        .push(format!("segmenter failed for {}: {e}; subject added without mask", c.box_id));
                    None
                }
            };
            summary.added.push(registry.insert_new(c.label.clone(), c.box_2d, mask));
        }
    }

    for c in candidates.iter().filter(|c| c.verified) {
        let CandidateRef::False(fid) = c.box_id else { continue };
        let explicit = report
            .false_positives
            .iter()
            .find(|f| f.id == fid)
            .and_then(|f| f.subject_ref)
            .filter(|id| registry.get(*id).is_some());
        let Some(target) = explicit.or_else(|| registry.best_match(&c.box_2d, FALSE_POSITIVE_MATCH_IOU)) else {
            summary.warnings.push(format!("{fid} matches no subject; nothing removed"));
            continue;
        };
        let subject_box = registry.get(target).expect("target exists").box_2d;
        match segmenter.segment(image, &SegmenterPrompt::erase(subject_box)) {
            Ok(_) => {
                registry.remove(target);
                summary.removed.push(target);
            }
            Err(e) => summary
                .warnings
                .push(format!("erase of {target} failed: {e}; subject kept")),
        }
    }

    for r in &report.refinements {
        if summary.removed.contains(&r.box_id) {
            summary
                .warnings
                .push(format!("refinement for removed subject {} skipped", r.box_id));
            continue;
        }
        let Some(subject) = registry.get(r.box_id) else {
            summary
                .warnings
                .push(format!("refinement for unknown subject {} skipped", r.box_id));
            continue;
        };
        let Some(new_box) = r.replacement_box.and_then(|b| b.clip(image.width, image.height)) else {
            summary
                .warnings
                .push(format!("refinement for {} has no usable box; skipped", r.box_id));
            continue;
        };
        let label = subject.label.clone();
        match segmenter.segment(image, &SegmenterPrompt::BoxPositive { box_2d: new_box }) {
            Ok(mask) => {
                let s = registry.get_mut(r.box_id).expect("checked above");
                s.box_2d = new_box;
                s.mask = Some(mask);
                summary.refined.push(r.box_id);
            }
            Err(e) => summary.warnings.push(format!(
                "segmenter failed refining {} ({label}): {e}; previous mask kept",
                r.box_id
            )),
        }
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rasterize;

    struct BoxSegmenter;
    impl Segmenter for BoxSegmenter {
        fn segment(&self, image: &ImageRef, prompt: &SegmenterPrompt) -> Result<BinaryMask, BackendError> {
            match prompt {
                SegmenterPrompt::BoxPositive { box_2d } => {
                    Ok(rasterize(box_2d, image.width, image.height).unwrap())
                }
                SegmenterPrompt::BoxWithNegativePoint { .. } => Ok(BinaryMask::new(image.width, image.height)),
            }
        }
    }

    struct BrokenSegmenter;
    impl Segmenter for BrokenSegmenter {
        fn segment(&self, _: &ImageRef, _: &SegmenterPrompt) -> Result<BinaryMask, BackendError> {
            Err(BackendError::Unavailable("down".into()))
        }
    }

    fn bx(a: [u32; 4]) -> BoundingBox {
        BoundingBox::try_from(a).unwrap()
    }

    #[test]
    fn id_patterns() {
        assert_eq!("sub_12".parse::<SubjectId>().unwrap(), SubjectId(12));
        assert!("sub_".parse::<SubjectId>().is_err());
        assert!("sub_-1".parse::<SubjectId>().is_err());
        assert!("m_1".parse::<SubjectId>().is_err());
        assert_eq!("e_3".parse::<CandidateRef>().unwrap(), CandidateRef::False(FalseId(3)));
        assert_eq!("m_3".parse::<CandidateRef>().unwrap(), CandidateRef::Missing(MissingId(3)));
        assert!("x_3".parse::<CandidateRef>().is_err());
    }

    #[test]
    fn worker_output_with_fences_and_prose() {
        let json = r#"{"instances":[{"id":"sub_0","label":"pedestrian","box_2d":[100,100,200,200]}]}"#;
        let plain = parse_worker_output(json, 640, 480).unwrap();
        let fenced = format!("Here are the detections:\n```json\n{json}\n```\nDone.");
        assert_eq!(parse_worker_output(&fenced, 640, 480).unwrap(), plain);
        assert_eq!(plain.value.len(), 1);
        assert_eq!(plain.value[0].id, SubjectId(0));
        assert_eq!(plain.value[0].box_2d.to_array(), [100, 100, 200, 200]);
    }

    #[test]
    fn worker_output_clips_and_drops() {
        let text = r#"{"instances":[
            {"id":"sub_0","label":"pedestrian","box_2d":[-5,10,60.4,700]},
            {"id":"sub_1","label":"pedestrian","box_2d":[30,30,30,50]},
            {"label":"pedestrian","box_2d":[1,1,5,5]}]}"#;
        let parsed = parse_worker_output(text, 640, 480).unwrap();
        assert_eq!(parsed.value.len(), 2);
        assert_eq!(parsed.value[0].box_2d.to_array(), [0, 10, 60, 640]);
        assert_eq!(parsed.value[1].id, SubjectId(2));
        assert_eq!(parsed.warnings.len(), 1);
    }

    #[test]
    fn bare_instances_fragment() {
        let text = r#""instances": [{"id":"sub_4","label":"pedestrian","box_2d":[1,1,9,9]}]"#;
        let parsed = parse_worker_output(text, 20, 20).unwrap();
        assert_eq!(parsed.value[0].id, SubjectId(4));
        assert!(parse_worker_output(r#"{"instances":[]}"#, 5, 5).unwrap().value.is_empty());
        assert!(matches!(parse_worker_output("no json here", 5, 5), Err(Error::Protocol { .. })));
    }

    #[test]
    fn supervisor_report_fields() {
        let text = r#"{"missing_objects":[{"missing_object_id":"m_1","label":"umbrella","reason":"Umbrella should be included per G6"}],
            "false_positives":[{"id":"e_0","label":"mannequin","subject_ref":"sub_2","reason":"G5 excludes mannequins"}],
            "refinements":[{"box_id":"sub_0","instruction":"expand box to the right to include hand"}],
            "confidence": 0.9}"#;
        let r = parse_supervisor_eval(text).unwrap();
        assert!(r.warnings.is_empty());
        assert_eq!(r.value.missing_objects[0].missing_object_id, MissingId(1));
        assert_eq!(r.value.false_positives[0].subject_ref, Some(SubjectId(2)));
        assert_eq!(r.value.refinements[0].box_id, SubjectId(0));
        assert_eq!(r.value.refinements[0].replacement_box, None);
    }

    #[test]
    fn supervisor_report_errors() {
        assert!(parse_supervisor_eval(r#"{"missing_objects":[],"false_positives":[]}"#).is_err());
        let bad_id = r#"{"missing_objects":[{"missing_object_id":"x1","label":"a","reason":"G1"}],"false_positives":[],"refinements":[]}"#;
        match parse_supervisor_eval(bad_id) {
            Err(Error::Protocol { message, .. }) => assert!(message.contains("missing_objects[0]")),
            other => panic!("unexpected {other:?}"),
        }
        let dup = r#"{"missing_objects":[{"missing_object_id":"m_1","label":"a","reason":"G1"},{"missing_object_id":"m_1","label":"b","reason":"G1"}],"false_positives":[],"refinements":[]}"#;
        assert!(parse_supervisor_eval(dup).is_err());
        let uncited = r#"{"missing_objects":[{"missing_object_id":"m_1","label":"a","reason":"looks missing"}],"false_positives":[],"refinements":[]}"#;
        assert_eq!(parse_supervisor_eval(uncited).unwrap().warnings.len(), 1);
    }

    #[test]
    fn boxgen_cross_validation() {
        let report = SupervisorReport {
            missing_objects: vec![MissingObject {
                missing_object_id: MissingId(1),
                label: "umbrella".into(),
                reason: "G6".into(),
            }],
            ..Default::default()
        };
        let text = r#"{"instances":[{"box_id":"m_1","label":"umbrella","box_2d":[123,456,789,987]},
                                    {"box_id":"m_9","label":"umbrella","box_2d":[1,1,5,5]}]}"#;
        let parsed = parse_boxgen_output(text, &report, 1000, 1000).unwrap();
        assert_eq!(parsed.value.len(), 1);
        assert_eq!(parsed.value[0].box_2d.to_array(), [123, 456, 789, 987]);
        assert!(!parsed.value[0].verified);
        assert_eq!(parsed.warnings.len(), 1);
        assert!(parse_boxgen_output(r#"{"instances":[]}"#, &report, 10, 10).unwrap().value.is_empty());
    }

    fn registry3() -> SubjectRegistry {
        let mut reg = SubjectRegistry::new();
        for b in [[0, 0, 10, 10], [20, 20, 40, 40], [50, 50, 90, 90]] {
            let m = rasterize(&bx(b), 100, 100).unwrap();
            reg.insert_new("pedestrian".into(), bx(b), Some(m));
        }
        reg
    }

    #[test]
    fn apply_add_remove_refine() {
        let image = ImageRef::new("img", 100, 100);
        let mut reg = registry3();
        let report = SupervisorReport {
            missing_objects: vec![MissingObject {
                missing_object_id: MissingId(1),
                label: "umbrella".into(),
                reason: "G6".into(),
            }],
            false_positives: vec![FalsePositive {
                id: FalseId(1),
                label: "mannequin".into(),
                subject_ref: None,
                reason: "G5".into(),
            }],
            refinements: vec![Refinement {
                box_id: SubjectId(0),
                instruction: "expand".into(),
                replacement_box: Some(bx([0, 0, 12, 15])),
            }],
        };
        let candidates = vec![
            CandidateBox {
                box_id: CandidateRef::Missing(MissingId(1)),
                label: "umbrella".into(),
                box_2d: bx([60, 0, 80, 20]),
                verified: true,
                score: Some(0.9),
            },
            CandidateBox {
                box_id: CandidateRef::False(FalseId(1)),
                label: "mannequin".into(),
                box_2d: bx([51, 51, 90, 90]),
                verified: true,
                score: Some(0.9),
            },
        ];
        let before = reg.clone();
        let summary = apply_actions(&mut reg, &candidates, &report, &BoxSegmenter, &image);
        assert_eq!(summary.counts(), (1, 1, 1));
        assert_eq!(summary.added, vec![SubjectId(3)]);
        assert_eq!(summary.removed, vec![SubjectId(2)]);
        assert_eq!(reg.len(), before.len() + 1 - 1);
        assert_eq!(reg.get(SubjectId(0)).unwrap().box_2d.to_array(), [0, 0, 12, 15]);
        assert_eq!(reg.get(SubjectId(0)).unwrap().mask.as_ref().unwrap().count(), 180);
        assert_eq!(reg.get(SubjectId(1)), before.get(SubjectId(1)));
        assert_eq!(reg.next_id(), SubjectId(4));
    }

    #[test]
    fn unverified_candidates_are_ignored() {
        let image = ImageRef::new("img", 100, 100);
        let mut reg = registry3();
        let c = CandidateBox {
            box_id: CandidateRef::Missing(MissingId(0)),
            label: "pedestrian".into(),
            box_2d: bx([1, 1, 5, 5]),
            verified: false,
            score: Some(0.1),
        };
        let s = apply_actions(&mut reg, &[c], &SupervisorReport::default(), &BoxSegmenter, &image);
        assert_eq!(s.counts(), (0, 0, 0));
        assert_eq!(reg.len(), 3);
    }

    #[test]
    fn failures_keep_state() {
        let image = ImageRef::new("img", 100, 100);
        let mut reg = registry3();
        let report = SupervisorReport {
            false_positives: vec![FalsePositive {
                id: FalseId(0),
                label: "statue".into(),
                subject_ref: Some(SubjectId(1)),
                reason: "G5".into(),
            }],
            refinements: vec![
                Refinement {
                    box_id: SubjectId(1),
                    instruction: "tighten".into(),
                    replacement_box: Some(bx([21, 21, 39, 39])),
                },
                Refinement {
                    box_id: SubjectId(2),
                    instruction: "tighten".into(),
                    replacement_box: Some(bx([55, 55, 85, 85])),
                },
            ],
            ..Default::default()
        };
        let c = CandidateBox {
            box_id: CandidateRef::False(FalseId(0)),
            label: "statue".into(),
            box_2d: bx([0, 60, 5, 70]),
            verified: true,
            score: None,
        };
        let before = reg.clone();
        let s = apply_actions(&mut reg, std::slice::from_ref(&c), &report, &BrokenSegmenter, &image);
        assert_eq!(s.counts(), (0, 0, 0));
        assert_eq!(reg, before);
        assert_eq!(s.warnings.len(), 3);

        let s = apply_actions(&mut reg, &[c], &report, &BoxSegmenter, &image);
        assert_eq!(s.removed, vec![SubjectId(1)]);
        assert_eq!(s.refined, vec![SubjectId(2)]);
        assert!(s.warnings[0].contains("removed subject sub_1"));
    }

    #[test]
    fn negative_point_inside_box() {
        let p = SegmenterPrompt::erase(bx([10, 10, 20, 30]));
        assert!(p.validate().is_ok());
        let bad = SegmenterPrompt::BoxWithNegativePoint {
            box_2d: bx([10, 10, 20, 30]),
            point: (25, 15),
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn serialization_round_trip() {
        let text = r#"{"missing_objects":[{"missing_object_id":"m_1","label":"umbrella","reason":"per G6"}],"false_positives":[{"id":"e_1","label":"statue","reason":"G5"}],"refinements":[{"box_id":"sub_0","instruction":"tighten","replacement_box":[1,2,3,4]}]}"#;
        let r = parse_supervisor_eval(text).unwrap().value;
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, text);
        let subjects = parse_worker_output(r#"{"instances":[{"id":"sub_3","label":"p","box_2d":[1,2,3,4]}]}"#, 10, 10)
            .unwrap()
            .value;
        let again = parse_worker_output(&worker_output_json(&subjects), 10, 10).unwrap().value;
        assert_eq!(again, subjects);
    }
}

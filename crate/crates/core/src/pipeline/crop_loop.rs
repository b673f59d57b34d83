//! The per-crop Worker / Supervisor loop under an iteration controller.

use serde::{Deserialize, Serialize};

use crate::agents::{
    snapshot, supervisor_boxgen, supervisor_evaluate, verify_candidates, worker_detect, worker_refine, Agents,
};
use crate::airc::{
    encode_state_with, Action, DensityThresholds, Hyperparams, IssueCounts, IterationBounds, IterationController,
    Transition,
};
use crate::error::BackendError;
use crate::geometry::{CropRegion, ImageRef};
use crate::guidelines::Guideline;
use crate::protocol::{
    apply_actions, CandidateBox, ChangeSummary, Refinement, Segmenter, SubjectInstance, SubjectRegistry,
    SupervisorReport,
};

/// Everything one crop's loop needs.
pub struct CropInputs<'a> {
    pub agents: &'a Agents<'a>,
    pub image: ImageRef,
    pub prompt: &'a str,
    pub guidelines: &'a [Guideline],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    /// Refinements applied at the start of this iteration, after the
    /// Worker resolved instruction-only ones into boxes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub applied_refinements: Vec<Refinement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub changes: Option<ChangeSummary>,
    /// Subjects seen by the Supervisor in this iteration (boxes only).
    pub registry: Vec<SubjectInstance>,
    pub report: SupervisorReport,
    pub counts: IssueCounts,
    pub issue_score: f64,
    pub state: usize,
    pub boxgen_skipped: bool,
    pub candidates: Vec<CandidateBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Action>,
    #[serde(default)]
    pub forced: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub raw_unparsed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropTrace {
    pub crop: CropRegion,
    pub initial_object_count: u32,
    pub iterations: Vec<IterationRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub final_refinements: Vec<Refinement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_changes: Option<ChangeSummary>,
    pub final_registry: Vec<SubjectInstance>,
    /// First minus last reported issue score.
    pub issues_resolved: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CropTrace {
    pub fn passes(&self) -> u32 {
        self.iterations.len() as u32
    }
}

pub struct CropOutcome {
    /// Final subjects in the crop's frame; `None` when the crop failed.
    pub registry: Option<SubjectRegistry>,
    pub trace: CropTrace,
}

/// Live state of one crop between iterations.
pub struct CropState {
    registry: SubjectRegistry,
    records: Vec<IterationRecord>,
    initial_count: u32,
    final_refinements: Vec<Refinement>,
    final_changes: Option<ChangeSummary>,
}

impl CropState {
    /// Iteration 1: Worker detection, then critique.
    pub fn start(inp: &CropInputs<'_>) -> Result<Self, BackendError> {
        let step = worker_detect(inp.agents, &inp.image, inp.prompt, inp.guidelines)?;
        let mut state = Self {
            initial_count: step.value.len() as u32,
            registry: step.value,
            records: Vec::new(),
            final_refinements: Vec::new(),
            final_changes: None,
        };
        state.critique(inp, 1, Vec::new(), None, step.warnings, step.raw_unparsed)?;
        Ok(state)
    }

    /// Iteration t > 1: the Worker applies the previous iteration's
    /// verified candidates and refinements, then the Supervisor critiques.
    pub fn advance(&mut self, inp: &CropInputs<'_>) -> Result<(), BackendError> {
        let prev = self.records.last().expect("started");
        let iteration = prev.iteration + 1;
        let (report, candidates) = (prev.report.clone(), prev.candidates.clone());
        let step = worker_refine(
            inp.agents,
            &inp.image,
            inp.prompt,
            inp.guidelines,
            &self.registry,
            &report.refinements,
        )?;
        let resolved = SupervisorReport {
            refinements: step.value.clone(),
            ..report
        };
        let changes = apply_actions(
            &mut self.registry,
            &candidates,
            &resolved,
            inp.agents.segmenter,
            &inp.image,
        );
        self.critique(inp, iteration, step.value, Some(changes), step.warnings, step.raw_unparsed)
    }

    fn critique(
        &mut self,
        inp: &CropInputs<'_>,
        iteration: u32,
        applied_refinements: Vec<Refinement>,
        changes: Option<ChangeSummary>,
        mut warnings: Vec<String>,
        raw: Option<String>,
    ) -> Result<(), BackendError> {
        let mut raw_unparsed: Vec<String> = raw.into_iter().collect();
        let eval = supervisor_evaluate(inp.agents, &inp.image, inp.prompt, inp.guidelines, &self.registry)?;
        warnings.extend(eval.warnings);
        raw_unparsed.extend(eval.raw_unparsed);
        let report = eval.value;
        let (boxgen_skipped, candidates) =
            match supervisor_boxgen(inp.agents, &inp.image, inp.prompt, inp.guidelines, &self.registry, &report)? {
                None => (true, Vec::new()),
                Some(step) => {
                    warnings.extend(step.warnings);
                    raw_unparsed.extend(step.raw_unparsed);
                    let (verified, w) =
                        verify_candidates(&step.value, &inp.image, inp.agents.scorer, &inp.agents.verifier);
                    warnings.extend(w);
                    (false, verified)
                }
            };
        if boxgen_skipped {
            warnings.push("boxgen skipped: no missing or false entries".into());
        }
        let counts = IssueCounts::from_report(&report);
        self.records.push(IterationRecord {
            iteration,
            applied_refinements,
            changes,
            registry: snapshot(&self.registry),
            report,
            counts,
            issue_score: counts.score(),
            state: 0,
            boxgen_skipped,
            candidates,
            action: None,
            forced: false,
            reward: None,
            warnings,
            raw_unparsed,
        });
        Ok(())
    }

    /// Applies the last iteration's verified candidates and boxed
    /// refinements without another model call. Instruction-only
    /// refinements cannot be resolved here and are skipped.
    pub fn finish(&mut self, inp: &CropInputs<'_>) {
        let last = self.records.last().expect("started");
        let changes = apply_actions(
            &mut self.registry,
            &last.candidates,
            &last.report,
            inp.agents.segmenter,
            &inp.image,
        );
        self.final_refinements = last.report.refinements.clone();
        self.final_changes = Some(changes);
    }

    pub fn iteration(&self) -> u32 {
        self.records.last().map_or(0, |r| r.iteration)
    }

    pub fn counts(&self) -> IssueCounts {
        self.records.last().map(|r| r.counts).unwrap_or_default()
    }

    pub fn initial_count(&self) -> u32 {
        self.initial_count
    }

    pub fn registry(&self) -> &SubjectRegistry {
        &self.registry
    }

    fn last_mut(&mut self) -> &mut IterationRecord {
        self.records.last_mut().expect("started")
    }

    fn into_outcome(self, crop: CropRegion) -> CropOutcome {
        let first = self.records.first().map_or(0.0, |r| r.issue_score);
        let last = self.records.last().map_or(0.0, |r| r.issue_score);
        CropOutcome {
            trace: CropTrace {
                crop,
                initial_object_count: self.initial_count,
                iterations: self.records,
                final_refinements: self.final_refinements,
                final_changes: self.final_changes,
                final_registry: snapshot(&self.registry),
                issues_resolved: first - last,
                error: None,
            },
            registry: Some(self.registry),
        }
    }
}

fn failed(inp: &CropInputs<'_>, records: Vec<IterationRecord>, initial_count: u32, e: &BackendError) -> CropOutcome {
    CropOutcome {
        registry: None,
        trace: CropTrace {
            crop: inp.image.region_or_full(),
            initial_object_count: initial_count,
            iterations: records,
            final_refinements: Vec::new(),
            final_changes: None,
            final_registry: Vec::new(),
            issues_resolved: 0.0,
            error: Some(e.to_string()),
        },
    }
}

/// Settings that shape decisions and rewards.
#[derive(Debug, Clone, Copy)]
pub struct LoopSettings {
    pub hyperparams: Hyperparams,
    pub density: DensityThresholds,
    pub bounds: IterationBounds,
}

/// Runs a group of crops in lockstep under one controller: each decision
/// sees the summed issue counts of the group's live crops. A group of one
/// is the ordinary per-crop loop. A crop whose backend fails after a retry
/// drops out of the group and contributes nothing.
pub fn drive(
    group: &[CropInputs<'_>],
    controller: &mut dyn IterationController,
    settings: &LoopSettings,
) -> Vec<CropOutcome> {
    let encode = |states: &[Option<CropState>]| {
        let live = states.iter().flatten();
        let counts = live.clone().map(|s| s.counts()).sum::<IssueCounts>();
        let init: u32 = live.map(|s| s.initial_count()).sum();
        let state = encode_state_with(init, counts, &settings.density, settings.hyperparams.violation_rule);
        (state, counts.score())
    };

    let mut outcomes: Vec<Option<CropOutcome>> = group.iter().map(|_| None).collect();
    let mut states: Vec<Option<CropState>> = group
        .iter()
        .zip(outcomes.iter_mut())
        .map(|(inp, out)| match CropState::start(inp) {
            Ok(s) => Some(s),
            Err(e) => {
                *out = Some(failed(inp, Vec::new(), 0, &e));
                None
            }
        })
        .collect();

    loop {
        if states.iter().all(Option::is_none) {
            break;
        }
        let (state, i_now) = encode(&states);
        let t = states.iter().flatten().map(CropState::iteration).max().unwrap_or(1);
        for s in states.iter_mut().flatten() {
            s.last_mut().state = state.index();
        }
        let forced = settings.bounds.forced(t).is_some();
        let action = controller.decide(state, t, &settings.bounds);

        if action == Action::Continue {
            for (i, slot) in states.iter_mut().enumerate() {
                if let Some(s) = slot {
                    let rec = s.last_mut();
                    rec.action = Some(Action::Continue);
                    rec.forced = forced;
                    if let Err(e) = s.advance(&group[i]) {
                        let s = slot.take().expect("live");
                        outcomes[i] = Some(failed(&group[i], s.records, s.initial_count, &e));
                    }
                }
            }
            if states.iter().all(Option::is_none) {
                break;
            }
            // reward over the crops that survived the pass
            let i_t = states
                .iter()
                .flatten()
                .map(|s| s.records[s.records.len() - 2].counts)
                .sum::<IssueCounts>()
                .score();
            let (next, i_next) = encode(&states);
            let reward = settings.hyperparams.reward(i_t, i_next, Action::Continue, false);
            let terminal = t + 1 >= settings.bounds.max_iters;
            for s in states.iter_mut().flatten() {
                let n = s.records.len();
                s.records[n - 2].reward = Some(reward);
            }
            controller.observe(&Transition {
                state: state.index(),
                action,
                reward,
                next_state: next.index(),
                terminal,
            });
        } else {
            let at_max = t >= settings.bounds.max_iters;
            let reward = settings.hyperparams.reward(i_now, i_now, Action::Stop, at_max);
            if !at_max {
                controller.observe(&Transition {
                    state: state.index(),
                    action,
                    reward,
                    next_state: state.index(),
                    terminal: true,
                });
            }
            for (i, slot) in states.iter_mut().enumerate() {
                if let Some(s) = slot {
                    let rec = s.last_mut();
                    rec.action = Some(Action::Stop);
                    rec.forced = forced;
                    rec.reward = Some(reward);
                    s.finish(&group[i]);
                }
            }
            break;
        }
    }

    for (i, slot) in states.into_iter().enumerate() {
        if let Some(s) = slot {
            outcomes[i] = Some(s.into_outcome(group[i].image.region_or_full()));
        }
    }
    outcomes.into_iter().map(|o| o.expect("every crop has an outcome")).collect()
}

pub fn run_crop(
    inp: &CropInputs<'_>,
    controller: &mut dyn IterationController,
    settings: &LoopSettings,
) -> CropOutcome {
    drive(std::slice::from_ref(inp), controller, settings)
        .pop()
        .expect("one outcome")
}

/// Rebuilds the final registry of a crop from its trace by re-applying the
/// logged candidates and refinements with `segmenter`.
pub fn replay(trace: &CropTrace, segmenter: &dyn Segmenter, image: &ImageRef) -> Option<SubjectRegistry> {
    let first = trace.iterations.first()?;
    let mut registry = SubjectRegistry::from_instances(first.registry.clone()).ok()?;
    for r in registry.iter_mut() {
        r.mask = segmenter
            .segment(image, &crate::protocol::SegmenterPrompt::BoxPositive { box_2d: r.box_2d })
            .ok();
    }
    for pair in trace.iterations.windows(2) {
        let report = SupervisorReport {
            refinements: pair[1].applied_refinements.clone(),
            ..pair[0].report.clone()
        };
        apply_actions(&mut registry, &pair[0].candidates, &report, segmenter, image);
    }
    if trace.final_changes.is_some() {
        let last = trace.iterations.last()?;
        let report = SupervisorReport {
            refinements: trace.final_refinements.clone(),
            ..last.report.clone()
        };
        apply_actions(&mut registry, &last.candidates, &report, segmenter, image);
    }
    Some(registry)
}

//! Adaptive iteration controller: issue scoring, the six-state MDP, reward,
//! tabular Q-learning and the stop/continue decision.

use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::SupervisorReport;

pub const N_STATES: usize = 6;
pub const N_ACTIONS: usize = 2;
pub const QTABLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Stop,
    Continue,
}

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::Stop => 0,
            Action::Continue => 1,
        }
    }

    pub fn from_index(i: usize) -> Action {
        if i == 0 {
            Action::Stop
        } else {
            Action::Continue
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueCounts {
    pub misses: u32,
    pub falses: u32,
    pub refinements: u32,
}

impl IssueCounts {
    pub fn new(misses: u32, falses: u32, refinements: u32) -> Self {
        Self {
            misses,
            falses,
            refinements,
        }
    }

    pub fn from_report(report: &SupervisorReport) -> Self {
        Self::new(
            report.missing_objects.len() as u32,
            report.false_positives.len() as u32,
            report.refinements.len() as u32,
        )
    }

    /// `misses + falses + 0.1 * refinements`, computed in tenths so the
    /// result is the correctly rounded decimal value.
    pub fn score(&self) -> f64 {
        let tenths = 10 * (self.misses as u64 + self.falses as u64) + self.refinements as u64;
        tenths as f64 / 10.0
    }

    pub fn violations(&self) -> u32 {
        self.misses + self.falses
    }
}

impl std::ops::Add for IssueCounts {
    type Output = IssueCounts;
    fn add(self, o: IssueCounts) -> IssueCounts {
        IssueCounts::new(self.misses + o.misses, self.falses + o.falses, self.refinements + o.refinements)
    }
}

impl std::iter::Sum for IssueCounts {
    fn sum<I: Iterator<Item = IssueCounts>>(iter: I) -> Self {
        iter.fold(IssueCounts::default(), |a, b| a + b)
    }
}

pub fn issue_score(counts: IssueCounts) -> f64 {
    counts.score()
}

/// Lower bounds of the medium and crowd density buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensityThresholds {
    pub medium_min: u32,
    pub crowd_min: u32,
}

impl Default for DensityThresholds {
    fn default() -> Self {
        Self {
            medium_min: 3,
            crowd_min: 8,
        }
    }
}

impl DensityThresholds {
    pub fn bucket(&self, object_count: u32) -> u8 {
        if object_count >= self.crowd_min {
            2
        } else if object_count >= self.medium_min {
            1
        } else {
            0
        }
    }
}

/// Which residual issues make a state dirty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationRule {
    /// Misses or false positives remain; refinement-only residue is clean.
    #[default]
    MissesOrFalses,
    /// Any issue, including refinements.
    AnyIssue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ControllerState {
    pub d: u8,
    pub v: u8,
}

impl ControllerState {
    pub fn index(self) -> usize {
        2 * self.d as usize + self.v as usize
    }

    pub fn from_index(s: usize) -> Self {
        assert!(s < N_STATES, "state {s} out of range");
        Self {
            d: (s / 2) as u8,
            v: (s % 2) as u8,
        }
    }
}

pub fn encode_state_with(
    initial_object_count: u32,
    counts: IssueCounts,
    thresholds: &DensityThresholds,
    rule: ViolationRule,
) -> ControllerState {
    let dirty = match rule {
        ViolationRule::MissesOrFalses => counts.violations() > 0,
        ViolationRule::AnyIssue => counts.score() > 0.0,
    };
    ControllerState {
        d: thresholds.bucket(initial_object_count),
        v: dirty as u8,
    }
}

pub fn encode_state(initial_object_count: u32, counts: IssueCounts) -> ControllerState {
    encode_state_with(
        initial_object_count,
        counts,
        &DensityThresholds::default(),
        ViolationRule::default(),
    )
}

/// When the clean-scene bonus is paid on CONTINUE.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BonusRule {
    /// Only when the pass turns a scene with issues into a clean one.
    #[default]
    OnResolve,
    /// Whenever the next state is clean, including clean-to-clean passes.
    WhenClean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// Magnitudes; cost and penalty are subtracted, the bonus is added.
    pub step_cost: f64,
    pub early_stop_penalty: f64,
    pub clean_bonus: f64,
    #[serde(default)]
    pub bonus_rule: BonusRule,
    #[serde(default)]
    pub violation_rule: ViolationRule,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            gamma: 0.9,
            epsilon: 0.02,
            step_cost: 0.02,
            early_stop_penalty: 2.0,
            clean_bonus: 1.0,
            bonus_rule: BonusRule::OnResolve,
            violation_rule: ViolationRule::MissesOrFalses,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.alpha > 0.0 && self.alpha <= 1.0) || !unit(self.gamma) || !unit(self.epsilon) {
            return Err(Error::Validation(
                "alpha must be in (0, 1], gamma and epsilon in [0, 1]".into(),
            ));
        }
        if [self.step_cost, self.early_stop_penalty, self.clean_bonus]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::Validation("reward magnitudes must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Reward for taking `action` at issue level `i_t` and observing
    /// `i_next`. A STOP forced by the iteration cap (`at_max`) is not
    /// penalized.
    pub fn reward(&self, i_t: f64, i_next: f64, action: Action, at_max: bool) -> f64 {
        match action {
            Action::Continue => {
                let bonus = match self.bonus_rule {
                    BonusRule::OnResolve if i_t > 0.0 && i_next == 0.0 => self.clean_bonus,
                    BonusRule::WhenClean if i_next == 0.0 => self.clean_bonus,
                    _ => 0.0,
                };
                (i_t - i_next) + bonus - self.step_cost
            }
            Action::Stop if i_t == 0.0 || at_max => 0.0,
            Action::Stop => -self.early_stop_penalty,
        }
    }

    /// One-step estimate of Q(s, CONTINUE) from the expected number of
    /// issues fixed, the probability the pass clears the scene and the
    /// value of the successor state.
    pub fn q_value_estimate(&self, mu_delta: f64, pi_clear: f64, v_next: f64) -> f64 {
        mu_delta - self.step_cost + self.clean_bonus * pi_clear + self.gamma * v_next
    }
}

pub fn reward(i_t: f64, i_next: f64, action: Action, at_max: bool) -> f64 {
    Hyperparams::default().reward(i_t, i_next, action, at_max)
}

pub fn q_value_estimate(mu_delta: f64, pi_clear: f64, v_next: f64) -> f64 {
    Hyperparams::default().q_value_estimate(mu_delta, pi_clear, v_next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationBounds {
    pub min_iters: u32,
    pub max_iters: u32,
}

impl Default for IterationBounds {
    fn default() -> Self {
        Self {
            min_iters: 2,
            max_iters: 4,
        }
    }
}

impl IterationBounds {
    pub fn new(min_iters: u32, max_iters: u32) -> Result<Self> {
        let b = Self {
            min_iters,
            max_iters,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_iters < 1 || self.min_iters > self.max_iters {
            return Err(Error::Validation(format!(
                "iteration bounds need 1 <= min ({}) <= max ({})",
                self.min_iters, self.max_iters
            )));
        }
        Ok(())
    }

    /// The action imposed by the bounds at `iteration`, if any.
    pub fn forced(&self, iteration: u32) -> Option<Action> {
        if iteration >= self.max_iters {
            Some(Action::Stop)
        } else if iteration < self.min_iters {
            Some(Action::Continue)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    /// Epsilon-greedy decisions and Q-learning updates.
    Train,
    /// Greedy decisions, table left untouched.
    #[default]
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: Action,
    pub reward: f64,
    pub next_state: usize,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub version: u32,
    pub hyperparams: Hyperparams,
    pub density_thresholds: DensityThresholds,
    pub q: [[f64; N_ACTIONS]; N_STATES],
    pub visits: [[u64; N_ACTIONS]; N_STATES],
    /// Running sum of rewards after each update.
    pub cumulative_reward_trace: Vec<f64>,
}

impl Default for QTable {
    fn default() -> Self {
        Self::new(Hyperparams::default(), DensityThresholds::default())
    }
}

impl QTable {
    pub fn new(hyperparams: Hyperparams, density_thresholds: DensityThresholds) -> Self {
        Self {
            version: QTABLE_VERSION,
            hyperparams,
            density_thresholds,
            q: [[0.0; N_ACTIONS]; N_STATES],
            visits: [[0; N_ACTIONS]; N_STATES],
            cumulative_reward_trace: Vec::new(),
        }
    }

    pub fn value(&self, s: usize, a: Action) -> f64 {
        self.q[s][a.index()]
    }

    pub fn state_value(&self, s: usize) -> f64 {
        self.q[s][0].max(self.q[s][1])
    }

    pub fn cumulative_reward(&self) -> f64 {
        self.cumulative_reward_trace.last().copied().unwrap_or(0.0)
    }

    pub fn encode(&self, initial_object_count: u32, counts: IssueCounts) -> ControllerState {
        encode_state_with(
            initial_object_count,
            counts,
            &self.density_thresholds,
            self.hyperparams.violation_rule,
        )
    }

    pub fn q_update(&mut self, s: usize, a: Action, r: f64, s_next: usize, terminal: bool) {
        let h = &self.hyperparams;
        let future = if terminal { 0.0 } else { self.state_value(s_next) };
        let cell = &mut self.q[s][a.index()];
        *cell += h.alpha * (r + h.gamma * future - *cell);
        self.visits[s][a.index()] += 1;
        let total = self.cumulative_reward() + r;
        self.cumulative_reward_trace.push(total);
    }

    pub fn apply(&mut self, t: &Transition) {
        self.q_update(t.state, t.action, t.reward, t.next_state, t.terminal);
    }

    /// CONTINUE only when strictly better than STOP.
    pub fn greedy(&self, s: usize) -> Action {
        if self.value(s, Action::Continue) > self.value(s, Action::Stop) {
            Action::Continue
        } else {
            Action::Stop
        }
    }

    pub fn decide(
        &self,
        s: usize,
        iteration: u32,
        bounds: &IterationBounds,
        mode: ControllerMode,
        rng: &mut dyn RngCore,
    ) -> Action {
        if let Some(a) = bounds.forced(iteration) {
            return a;
        }
        if mode == ControllerMode::Train && rng.random::<f64>() < self.hyperparams.epsilon {
            return Action::from_index(rng.random_range(0..N_ACTIONS));
        }
        self.greedy(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != QTABLE_VERSION {
            return Err(Error::Format(format!(
                "q-table version {} is not supported (expected {QTABLE_VERSION})",
                self.version
            )));
        }
        self.hyperparams.validate()?;
        if self.q.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Format("q-table holds non-finite values".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("q-table serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("q-table: {e}")))?;
        match raw.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == QTABLE_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Format(format!(
                    "q-table version {v} is not supported (expected {QTABLE_VERSION})"
                )))
            }
            None => return Err(Error::Format("q-table has no version tag".into())),
        }
        let table: QTable = serde_json::from_value(raw).map_err(|e| Error::Format(format!("q-table: {e}")))?;
        table.validate()?;
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Decides STOP/CONTINUE between loop iterations and learns from the
/// resulting transitions.
pub trait IterationController: Send {
    fn decide(&mut self, state: ControllerState, iteration: u32, bounds: &IterationBounds) -> Action;
    fn observe(&mut self, transition: &Transition);
}

/// Q-table behind a lock, so concurrent crops can share one learner.
pub type SharedQTable = Arc<Mutex<QTable>>;

pub fn shared(table: QTable) -> SharedQTable {
    Arc::new(Mutex::new(table))
}

pub fn lock(table: &SharedQTable) -> MutexGuard<'_, QTable> {
    table.lock().unwrap_or_else(|p| p.into_inner())
}

/// The learned controller. Each instance owns its exploration RNG.
pub struct AdaptiveController<R> {
    table: SharedQTable,
    mode: ControllerMode,
    rng: R,
}

impl<R: RngCore + Send> AdaptiveController<R> {
    pub fn new(table: SharedQTable, mode: ControllerMode, rng: R) -> Self {
        Self { table, mode, rng }
    }

    pub fn table(&self) -> &SharedQTable {
        &self.table
    }
}

impl<R: RngCore + Send> IterationController for AdaptiveController<R> {
    fn decide(&mut self, state: ControllerState, iteration: u32, bounds: &IterationBounds) -> Action {
        lock(&self.table).decide(state.index(), iteration, bounds, self.mode, &mut self.rng)
    }

    fn observe(&mut self, t: &Transition) {
        if self.mode == ControllerMode::Train {
            lock(&self.table).apply(t);
        }
    }
}

/// Baseline that runs exactly `passes` iterations (clamped to the bounds).
#[derive(Debug, Clone, Copy)]
pub struct FixedPasses(pub u32);

impl IterationController for FixedPasses {
    fn decide(&mut self, _: ControllerState, iteration: u32, bounds: &IterationBounds) -> Action {
        bounds.forced(iteration).unwrap_or(if iteration < self.0 {
            Action::Continue
        } else {
            Action::Stop
        })
    }

    fn observe(&mut self, _: &Transition) {}
}

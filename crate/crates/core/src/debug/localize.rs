//! Counterfactual localization: substitute a corrected action at step t,
//! let the agent continue, and see whether the episode now succeeds.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::analyze::CriticalDiagnosis;
use super::{DebugConfig, DebugError};
use crate::env::{replay_prefix, EnvFactory};
use crate::llm::{ChatModel, ChatRequest};
use crate::model::{CanonicalAction, ModuleKind, Outcome, StepRecord, TokenUsage, Trajectory};
use crate::prompts;
use crate::rollout::parse::{extract_tag, normalize_action, parse_action_body};
use crate::rollout::prompt::{format_action_history, format_admissible};
use crate::rollout::run_rollout;
use crate::taxonomy::ErrorLabel;

/// Proposes replacement actions, memoized per (trajectory, step) so
/// repeated probes of one step reuse the first answer.
pub struct Corrector<'a> {
    client: &'a dyn ChatModel,
    model_id: String,
    memo: Mutex<HashMap<(String, u32), CanonicalAction>>,
}

impl<'a> Corrector<'a> {
    pub fn new(client: &'a dyn ChatModel, model_id: &str) -> Self {
        Self {
            client,
            model_id: model_id.to_string(),
            memo: Mutex::new(HashMap::new()),
        }
    }

    /// Number of distinct (trajectory, step) corrections made so far.
    pub fn memo_len(&self) -> usize {
        self.memo.lock().expect("memo lock").len()
    }

    pub fn propose_correction(
        &self,
        trajectory: &Trajectory,
        t: u32,
    ) -> Result<CanonicalAction, DebugError> {
        let record = trajectory.step(t).ok_or_else(|| {
            DebugError::Precondition(format!("step {t} outside 1..={}", trajectory.len()))
        })?;
        let key = (trajectory.to_json(), t);
        if let Some(a) = self.memo.lock().expect("memo lock").get(&key) {
            return Ok(a.clone());
        }
        let before = &trajectory.steps[..(t - 1) as usize];
        let after = &trajectory.steps[t as usize..];
        let none = |s: String| if s.is_empty() { "(none)".to_string() } else { s };
        let mut b = BTreeMap::new();
        b.insert("task_description", trajectory.task_description.clone());
        b.insert("prefix", none(format_action_history(before, usize::MAX, usize::MAX)));
        b.insert("step_num", t.to_string());
        b.insert("observation", record.observation.clone());
        b.insert(
            "admissible_actions",
            format_admissible(record.admissible_actions.as_deref()),
        );
        b.insert("original_action", record.action.to_string());
        b.insert(
            "continuation",
            format!(
                "{}\nOutcome: {}",
                none(format_action_history(after, usize::MAX, usize::MAX)),
                trajectory.outcome
            ),
        );
        let prompt = prompts::template(prompts::CORRECTOR)
            .render(&b)
            .map_err(|e| DebugError::Rollout(e.into()))?;
        let reply = self
            .client
            .complete(&ChatRequest::user(&self.model_id, prompt))?
            .text;
        let body = extract_tag(&reply, "action").unwrap_or(reply);
        let action = match parse_action_body(&body) {
            CanonicalAction::EnvAction { text } => {
                normalize_action(&text, record.admissible_actions.as_deref())
            }
            other => other,
        };
        self.memo
            .lock()
            .expect("memo lock")
            .insert(key, action.clone());
        Ok(action)
    }
}

/// Replays steps `1..t`, applies `corrected` at `t`, and lets the agent
/// finish the episode. Returns whether it succeeded and the
/// counterfactual trajectory.
pub fn counterfactual_fix_succeeds(
    trajectory: &Trajectory,
    t: u32,
    corrected: &CanonicalAction,
    env_factory: &dyn EnvFactory,
    config: &DebugConfig,
    agent: &dyn ChatModel,
) -> Result<(bool, Trajectory), DebugError> {
    let prefix = trajectory.truncate_before(t).map_err(|e| DebugError::Precondition(e.to_string()))?;
    if t as usize > trajectory.len() {
        return Err(DebugError::Precondition(format!("step {t} beyond T={}", trajectory.len())));
    }
    let mut env = env_factory.make()?;
    let before = replay_prefix(env.as_mut(), &prefix.actions(), Some(&prefix.steps))?;
    let mut record = StepRecord {
        index: t,
        observation: before.observation.clone(),
        admissible_actions: before.admissible_actions.clone(),
        module_outputs: BTreeMap::new(),
        action: corrected.clone(),
        env_response: String::new(),
        raw_completion: String::new(),
        token_usage: TokenUsage::ZERO,
    };
    let mut extended = prefix.clone();
    match env.step(corrected) {
        Ok(r) => record.env_response = r.observation,
        Err(e) => match e.halt_reason() {
            Some(reason) => {
                record.env_response = e.to_string();
                extended.steps.push(record);
                let mut cf = crate::model::TrajectoryBuilder::from_prefix(&extended)
                    .finish(Outcome::SystemHalt { reason });
                cf.step_cap = trajectory.step_cap;
                return Ok((false, cf));
            }
            None => return Err(e.into()),
        },
    }
    extended.steps.push(record);
    let mut fresh = env_factory.make()?;
    let cf = run_rollout(
        &config.rollout_for(trajectory),
        fresh.as_mut(),
        agent,
        Some(&extended),
        None,
    )?;
    Ok((cf.outcome.is_success(), cf))
}

/// Earliest `t` in `1..=n` whose probe succeeds, scanning upward.
pub fn first_success_linear<E>(
    n: u32,
    mut probe: impl FnMut(u32) -> Result<bool, E>,
) -> Result<Option<u32>, E> {
    for t in 1..=n {
        if probe(t)? {
            return Ok(Some(t));
        }
    }
    Ok(None)
}

/// Boundary search over `1..=n` assuming the predicate is monotone
/// (fail..fail, succeed..succeed). Uses at most floor(log2 n) + 1 probes.
/// On non-monotone predicates the result is some succeeding step, not
/// necessarily the earliest.
pub fn first_success_bisect<E>(
    n: u32,
    mut probe: impl FnMut(u32) -> Result<bool, E>,
) -> Result<Option<u32>, E> {
    let (mut lo, mut hi) = (1u32, n);
    let mut found = None;
    while lo <= hi {
        let mid = lo + (hi - lo) / 2;
        if probe(mid)? {
            found = Some(mid);
            hi = mid - 1;
        } else {
            lo = mid + 1;
        }
    }
    Ok(found)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub step: u32,
    pub action: CanonicalAction,
    pub success: bool,
}

/// Result of a counterfactual search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub critical_step: u32,
    pub probes: Vec<Probe>,
    pub counterfactual: Trajectory,
}

impl Localization {
    /// As a diagnosis: the search knows the step and the fix but not the
    /// module or error type, so the label is `others/other`.
    pub fn to_diagnosis(&self, original: &Trajectory) -> CriticalDiagnosis {
        let fix = self
            .probes
            .iter()
            .find(|p| p.step == self.critical_step)
            .map(|p| p.action.to_string())
            .unwrap_or_default();
        let orig = original
            .step(self.critical_step)
            .map(|s| s.action.to_string())
            .unwrap_or_default();
        CriticalDiagnosis {
            critical_step: self.critical_step,
            critical_module: ModuleKind::Others,
            error_label: ErrorLabel::other(ModuleKind::Others),
            root_cause: format!("replacing `{orig}` at step {} flips the outcome", self.critical_step),
            evidence: format!("counterfactual outcome: {}", self.counterfactual.outcome),
            correction_guidance: format!("At step {}, take `{fix}` instead of `{orig}`.", self.critical_step),
            cascading_effects: Vec::new(),
        }
    }
}

fn localize(
    trajectory: &Trajectory,
    env_factory: &dyn EnvFactory,
    corrector: &Corrector<'_>,
    config: &DebugConfig,
    agent: &dyn ChatModel,
    bisect: bool,
) -> Result<Localization, DebugError> {
    if trajectory.outcome.is_success() {
        return Err(DebugError::Precondition("trajectory already succeeded".into()));
    }
    let mut probes = Vec::new();
    let mut winners: BTreeMap<u32, Trajectory> = BTreeMap::new();
    let mut probe = |t: u32| -> Result<bool, DebugError> {
        let action = corrector.propose_correction(trajectory, t)?;
        let (ok, cf) = counterfactual_fix_succeeds(trajectory, t, &action, env_factory, config, agent)?;
        probes.push(Probe { step: t, action, success: ok });
        if ok {
            winners.insert(t, cf);
        }
        Ok(ok)
    };
    let n = trajectory.len() as u32;
    let found = if bisect {
        first_success_bisect(n, &mut probe)?
    } else {
        first_success_linear(n, &mut probe)?
    };
    let t = found.ok_or(DebugError::NotFound)?;
    Ok(Localization {
        critical_step: t,
        counterfactual: winners.remove(&t).expect("winning probe recorded"),
        probes,
    })
}

/// Probes t = 1, 2, ... and stops at the first fix that succeeds.
pub fn brute_force_localize(
    trajectory: &Trajectory,
    env_factory: &dyn EnvFactory,
    corrector: &Corrector<'_>,
    config: &DebugConfig,
    agent: &dyn ChatModel,
) -> Result<Localization, DebugError> {
    localize(trajectory, env_factory, corrector, config, agent, false)
}

/// Divide-and-conquer over the steps, assuming fixability is monotone.
pub fn binary_search_localize(
    trajectory: &Trajectory,
    env_factory: &dyn EnvFactory,
    corrector: &Corrector<'_>,
    config: &DebugConfig,
    agent: &dyn ChatModel,
) -> Result<Localization, DebugError> {
    localize(trajectory, env_factory, corrector, config, agent, true)
}

//! Stage 3: re-rollout from the critical step with feedback, refining the
//! feedback after each failed attempt.

use super::analyze::{analyze_critical, feedback_from_diagnosis, update_feedback};
use super::detect::detect_all;
use super::{Attempt, DebugConfig, DebugError, DebugResult};
use crate::env::EnvFactory;
use crate::llm::LlmClient;
use crate::model::Trajectory;
use crate::rollout::run_rollout;

/// Detect, diagnose, then re-roll from t* up to `config.budget` times.
///
/// A successful input returns at once without any model call. When the
/// judge finds no critical error the result has no attempts. Feedback is
/// refined after every failed attempt except the last, whose diagnosis
/// would go unused.
pub fn debug_loop(
    initial: &Trajectory,
    env_factory: &dyn EnvFactory,
    config: &DebugConfig,
    judge: &LlmClient,
    agent: &LlmClient,
) -> Result<DebugResult, DebugError> {
    if config.budget == 0 {
        return Err(DebugError::Precondition("budget must be at least 1".into()));
    }
    let mut result = DebugResult {
        method: "agentdebug".into(),
        initial: initial.clone(),
        profile: None,
        diagnosis: None,
        attempts: Vec::new(),
        final_outcome: initial.outcome,
        total_usage: initial.usage(),
        budget_exhausted: false,
    };
    if initial.outcome.is_success() {
        return Ok(result);
    }
    let judge = judge.child();
    let agent = agent.child();
    let tally = |r: &mut DebugResult| {
        r.total_usage = initial.usage() + judge.usage_report() + agent.usage_report();
    };

    let profile = detect_all(initial, config, &judge)?;
    let diagnosis = match analyze_critical(initial, &profile, 1, &[], config, &judge) {
        Ok(d) => d,
        Err(DebugError::NotFound) => {
            result.profile = Some(profile);
            tally(&mut result);
            return Ok(result);
        }
        Err(e) => return Err(e),
    };
    result.profile = Some(profile);
    result.diagnosis = Some(diagnosis.clone());

    let rollout = config.rollout_for(initial);
    let mut feedback = feedback_from_diagnosis(&diagnosis);
    for k in 1..=config.budget {
        let prefix = initial
            .truncate_before(feedback.target_step)
            .map_err(|e| DebugError::Precondition(e.to_string()))?;
        let mut env = env_factory.make()?;
        let trajectory = run_rollout(&rollout, env.as_mut(), &agent, Some(&prefix), Some(&feedback))?;
        let failed = !trajectory.outcome.is_success();
        result.attempts.push(Attempt {
            feedback: Some(feedback.clone()),
            trajectory,
        });
        if !failed || k == config.budget {
            break;
        }
        let last = &result.attempts.last().expect("just pushed").trajectory;
        match update_feedback(&feedback, last, config, &judge) {
            Ok((next, _)) => feedback = next,
            Err(DebugError::NotFound) => break,
            Err(e) => return Err(e),
        }
    }
    tally(&mut result);
    Ok(result.finish())
}

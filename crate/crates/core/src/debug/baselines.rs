//! Downstream comparison methods: Self-Refine, Best-of-N, and a
//! tree-of-thought action search.

use std::collections::BTreeMap;

use serde_json::Value;

use super::analyze::render_trajectory_zero_based;
use super::{Attempt, DebugConfig, DebugError, DebugResult};
use crate::env::{replay_prefix, ActionResult, EnvFactory};
use crate::llm::{complete_json_array, ChatModel, ChatRequest, LlmClient, LlmError};
use crate::model::{
    CanonicalAction, Feedback, HaltReason, ModuleKind, Outcome, StepRecord, TaskMeta, TokenUsage,
    Trajectory, TrajectoryBuilder,
};
use crate::prompts;
use crate::rollout::parse::normalize_action;
use crate::rollout::prompt::{format_action_history, format_admissible};
use crate::rollout::{run_rollout, RolloutConfig};
use crate::taxonomy::ErrorLabel;

fn metered(agent: &LlmClient, token_cap: Option<u64>) -> LlmClient {
    let c = agent.child();
    c.arm_budget(token_cap);
    c
}

fn spent(client: &LlmClient, token_cap: Option<u64>) -> bool {
    token_cap.is_some_and(|cap| client.usage_report().total() >= cap)
}

fn template_error(e: crate::llm::TemplateError) -> DebugError {
    DebugError::Rollout(e.into())
}

/// Restarts from step 1 each attempt with the agent's own answer to the
/// Self-Refine question as feedback. `token_cap` bounds the tokens spent
/// by this method, not counting the initial trajectory.
pub fn self_refine_loop(
    initial: &Trajectory,
    env_factory: &dyn EnvFactory,
    config: &DebugConfig,
    agent: &LlmClient,
    budget: u32,
    token_cap: Option<u64>,
) -> Result<DebugResult, DebugError> {
    let mut result = DebugResult {
        method: "self_refine".into(),
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
    let client = metered(agent, token_cap);
    let rollout = config.rollout_for(initial);
    let mut last = initial.clone();
    let mut history: Vec<String> = Vec::new();
    for k in 1..=budget {
        let mut b = BTreeMap::new();
        b.insert("trajectory", render_trajectory_zero_based(&last));
        let prompt = prompts::template(prompts::SELF_REFINE)
            .render(&b)
            .map_err(template_error)?;
        let request = ChatRequest::user(&rollout.model_id, prompt).with_temperature(rollout.temperature);
        let guidance = match client.complete(&request) {
            Ok(c) => c.text.trim().to_string(),
            Err(LlmError::BudgetExceeded { .. }) => {
                result.budget_exhausted = true;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let feedback = Feedback {
            target_step: 1,
            error_label: ErrorLabel::other(ModuleKind::Others),
            guidance: guidance.clone(),
            attempt_index: k,
            prior_guidance: history.clone(),
        };
        history.push(guidance);
        let mut env = env_factory.make()?;
        let t = run_rollout(&rollout, env.as_mut(), &client, None, Some(&feedback))?;
        let done = t.outcome.is_success();
        last = t.clone();
        result.attempts.push(Attempt {
            feedback: Some(feedback),
            trajectory: t,
        });
        if done {
            break;
        }
        if spent(&client, token_cap) {
            result.budget_exhausted = true;
            break;
        }
    }
    result.total_usage = initial.usage() + client.usage_report();
    Ok(result.finish())
}

/// `n` independent rollouts with seeds `base, base+1, ...`; succeeds when
/// any does. The first sample is reported as `initial`, the rest as
/// attempts.
pub fn best_of_n(
    env_factory: &dyn EnvFactory,
    rollout: &RolloutConfig,
    agent: &LlmClient,
    n: u32,
    token_cap: Option<u64>,
) -> Result<DebugResult, DebugError> {
    if n == 0 {
        return Err(DebugError::Precondition("n must be at least 1".into()));
    }
    let client = metered(agent, token_cap);
    let base = rollout.seed.unwrap_or(0);
    let mut samples = Vec::new();
    let mut budget_exhausted = false;
    for i in 0..n as u64 {
        let mut cfg = rollout.clone();
        cfg.seed = Some(base.wrapping_add(i));
        let mut env = env_factory.make()?;
        samples.push(run_rollout(&cfg, env.as_mut(), &client, None, None)?);
        if spent(&client, token_cap) && i + 1 < n as u64 {
            budget_exhausted = true;
            break;
        }
    }
    let success = samples.iter().any(|t| t.outcome.is_success());
    let mut rest = samples.into_iter();
    let initial = rest.next().expect("n >= 1");
    let attempts: Vec<Attempt> = rest
        .map(|trajectory| Attempt {
            feedback: None,
            trajectory,
        })
        .collect();
    let final_outcome = if success {
        Outcome::Success
    } else {
        attempts.last().map(|a| a.trajectory.outcome).unwrap_or(initial.outcome)
    };
    Ok(DebugResult {
        method: "best_of_n".into(),
        initial,
        profile: None,
        diagnosis: None,
        attempts,
        final_outcome,
        total_usage: client.usage_report(),
        budget_exhausted,
    })
}

/// Parses the value reply: one number in [0, 1] per candidate.
pub fn parse_scores(values: &[Value], expected: usize) -> Result<Vec<f64>, DebugError> {
    if values.len() != expected {
        return Err(DebugError::ScoreParseFailure(format!(
            "{} scores for {expected} candidates",
            values.len()
        )));
    }
    values
        .iter()
        .map(|v| match v.as_f64() {
            Some(x) if x.is_finite() => Ok(x.clamp(0.0, 1.0)),
            _ => Err(DebugError::ScoreParseFailure(format!("non-numeric score {v}"))),
        })
        .collect()
}

/// Index of the first maximal score.
pub fn first_max(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone)]
struct Node {
    steps: Vec<StepRecord>,
    current: ActionResult,
}

fn tot_history(steps: &[StepRecord], rollout: &RolloutConfig) -> String {
    if steps.is_empty() {
        String::new()
    } else {
        format!(
            "Recent history:\n{}\n",
            format_action_history(steps, rollout.history_window, rollout.observation_char_limit)
        )
    }
}

fn tot_obs(current: &ActionResult) -> String {
    match &current.admissible_actions {
        Some(list) => format!(
            "{}\nAdmissible actions: {}",
            current.observation,
            format_admissible(Some(list))
        ),
        None => current.observation.clone(),
    }
}

/// Beam search over proposed actions. Each step asks for up to `k`
/// candidates, scores them, and keeps the `beam` best children across the
/// frontier (ties by candidate order). The best surviving path is
/// reported; the search stops on success, at the step cap, or when the
/// token budget runs out.
pub fn tot_search(
    env_factory: &dyn EnvFactory,
    rollout: &RolloutConfig,
    agent: &LlmClient,
    k: usize,
    beam: usize,
    token_cap: Option<u64>,
) -> Result<DebugResult, DebugError> {
    if k == 0 || beam == 0 {
        return Err(DebugError::Precondition("k and beam must be at least 1".into()));
    }
    let client = metered(agent, token_cap);
    let mut env = env_factory.make()?;
    let desc = env.descriptor().clone();
    let cap = rollout.step_cap.unwrap_or(desc.step_cap);
    let meta = TaskMeta {
        task_id: desc.task_id.clone(),
        env_name: desc.env_name.clone(),
        task_description: desc.task_description.clone(),
        strategy: rollout.strategy,
        model_id: rollout.model_id.clone(),
        seed: rollout.seed.unwrap_or(desc.seed),
        step_cap: Some(cap),
    };
    let env_type = format!(
        "{} (task: {})",
        rollout.template_set.environment_label(),
        desc.task_description
    );
    let mut frontier = vec![Node {
        steps: Vec::new(),
        current: env.reset(),
    }];
    let mut finished: Option<(Vec<StepRecord>, Outcome)> = None;
    let mut budget_exhausted = false;

    'search: for step in 1..=cap {
        let mut children: Vec<(f64, Node, bool)> = Vec::new();
        for node in &frontier {
            let history = tot_history(&node.steps, rollout);
            let mut b = BTreeMap::new();
            b.insert("env_type", env_type.clone());
            b.insert("history_desc", history.clone());
            b.insert("obs", tot_obs(&node.current));
            b.insert("k", k.to_string());
            b.insert(
                "diversity_desc",
                if k > 1 {
                    " Make the proposals meaningfully different from each other.".to_string()
                } else {
                    String::new()
                },
            );
            let prompt = prompts::template(prompts::TOT_PROPOSE).render(&b).map_err(template_error)?;
            let request = ChatRequest::user(&rollout.model_id, prompt).with_temperature(rollout.temperature);
            let (proposals, c1) = match complete_json_array(&client, &request, 1) {
                Ok(r) => r,
                Err(LlmError::BudgetExceeded { .. }) => {
                    budget_exhausted = true;
                    break 'search;
                }
                Err(e) => return Err(e.into()),
            };
            let mut candidates: Vec<CanonicalAction> = Vec::new();
            for p in proposals.iter().filter_map(Value::as_str) {
                let a = normalize_action(p, node.current.admissible_actions.as_deref());
                if !candidates.contains(&a) {
                    candidates.push(a);
                }
                if candidates.len() == k {
                    break;
                }
            }
            if candidates.is_empty() {
                return Err(DebugError::ScoreParseFailure("no usable proposals".into()));
            }
            let names: Vec<String> = candidates.iter().map(|c| c.to_string()).collect();
            let mut b = BTreeMap::new();
            b.insert("env_type", env_type.clone());
            b.insert("history_section", history);
            b.insert("obs", tot_obs(&node.current));
            b.insert("cand_json", serde_json::to_string(&names).expect("strings serialize"));
            let prompt = prompts::template(prompts::TOT_VALUE).render(&b).map_err(template_error)?;
            let request = ChatRequest::user(&rollout.model_id, prompt).with_temperature(rollout.temperature);
            let (values, c2) = match complete_json_array(&client, &request, 1) {
                Ok(r) => r,
                Err(LlmError::BudgetExceeded { .. }) => {
                    budget_exhausted = true;
                    break 'search;
                }
                Err(LlmError::Json(e)) => return Err(DebugError::ScoreParseFailure(e.to_string())),
                Err(e) => return Err(e.into()),
            };
            let scores = parse_scores(&values, candidates.len())?;
            // Candidates are expanded best first so ties keep proposal order.
            let mut order: Vec<usize> = (0..candidates.len()).collect();
            order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
            let usage = c1.usage + c2.usage;
            for (rank, i) in order.into_iter().take(beam).enumerate() {
                let action = &candidates[i];
                let mut env = env_factory.make()?;
                let actions: Vec<CanonicalAction> = node.steps.iter().map(|s| s.action.clone()).collect();
                replay_prefix(env.as_mut(), &actions, Some(&node.steps))?;
                let mut record = StepRecord {
                    index: step,
                    observation: node.current.observation.clone(),
                    admissible_actions: node.current.admissible_actions.clone(),
                    module_outputs: BTreeMap::new(),
                    action: action.clone(),
                    env_response: String::new(),
                    raw_completion: String::new(),
                    token_usage: if rank == 0 { usage } else { TokenUsage::ZERO },
                };
                match env.step(action) {
                    Ok(r) => {
                        record.env_response = r.observation.clone();
                        let mut steps = node.steps.clone();
                        steps.push(record);
                        let outcome = if r.done { Some(env.outcome()?) } else { None };
                        let child = Node { steps, current: r };
                        match outcome {
                            Some(Outcome::Success) => {
                                finished = Some((child.steps, Outcome::Success));
                                break 'search;
                            }
                            Some(_) => children.push((scores[i], child, true)),
                            None => children.push((scores[i], child, false)),
                        }
                    }
                    Err(e) => match e.halt_reason() {
                        Some(reason) => {
                            record.env_response = e.to_string();
                            let mut steps = node.steps.clone();
                            steps.push(record);
                            finished.get_or_insert((steps, Outcome::SystemHalt { reason }));
                        }
                        None => return Err(e.into()),
                    },
                }
            }
        }
        // Stable sort keeps frontier order among equal scores.
        children.sort_by(|a, b| b.0.total_cmp(&a.0));
        let (done, open): (Vec<_>, Vec<_>) = children.into_iter().partition(|c| c.2);
        if let Some((_, node, _)) = done.into_iter().next() {
            if open.is_empty() {
                let mut probe = env_factory.make()?;
                let actions: Vec<CanonicalAction> = node.steps.iter().map(|s| s.action.clone()).collect();
                replay_prefix(probe.as_mut(), &actions, None)?;
                finished = Some((node.steps, probe.outcome()?));
                break;
            }
        }
        frontier = open.into_iter().take(beam).map(|c| c.1).collect();
        if frontier.is_empty() {
            break;
        }
    }

    let (steps, outcome) = match finished {
        Some(f) => f,
        None => {
            let best = frontier.into_iter().next().map(|n| n.steps).unwrap_or_default();
            let reason = if budget_exhausted {
                HaltReason::LlmLimit
            } else {
                HaltReason::StepLimit
            };
            (best, Outcome::SystemHalt { reason })
        }
    };
    let mut builder = TrajectoryBuilder::new(meta);
    for s in steps {
        builder = builder.append_step(s).map_err(|e| DebugError::Rollout(e.into()))?;
    }
    let trajectory = builder.finish(outcome);
    Ok(DebugResult {
        method: "tot".into(),
        final_outcome: trajectory.outcome,
        initial: trajectory,
        profile: None,
        diagnosis: None,
        attempts: Vec::new(),
        total_usage: client.usage_report(),
        budget_exhausted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::llm::{Script, ScriptRule};
    use crate::model::StrategyId;
    use serde_json::json;

    #[test]
    fn tie_break_and_parse() {
        assert_eq!(first_max(&[0.2, 0.9, 0.9]), Some(1));
        assert_eq!(first_max(&[]), None);
        let ok = parse_scores(&[json!(0.2), json!(0.9), json!(0.9)], 3).unwrap();
        assert_eq!(first_max(&ok), Some(1));
        assert!(matches!(parse_scores(&[json!(0.2)], 3), Err(DebugError::ScoreParseFailure(_))));
        assert!(matches!(parse_scores(&[json!("x")], 1), Err(DebugError::ScoreParseFailure(_))));
    }

    #[test]
    fn self_refine_succeeds_on_second_attempt() {
        let fx = fixtures::failed_fixture(1);
        let task = fixtures::task_text(&fx.task_id);
        let obs = fixtures::solution_observations();
        let script = Script::default()
            .with_rule(ScriptRule::new(["Why is this trajectory not finished"], "first thought").responses(["first thought", "REAL FIX"]))
            .with_rule(ScriptRule::new(
                [task.clone(), "REAL FIX".into(), format!("current observation is: {} Your admissible", obs[0])],
                fixtures::agent_reply("cabinet first", fixtures::MUG_SOLUTION[0]),
            ))
            .merge(fx.agent_script());
        let agent = LlmClient::scripted(script);
        let r = self_refine_loop(&fx.trajectory, &fx.factory(), &DebugConfig::default(), &agent, 3, None).unwrap();
        assert_eq!(r.attempts.len(), 2);
        assert!(r.succeeded());
        assert_eq!(r.attempts[1].feedback.as_ref().unwrap().prior_guidance, vec!["first thought".to_string()]);

        let agent = LlmClient::scripted(fixtures::bundle_agent_script());
        let r = self_refine_loop(&fx.trajectory, &fx.factory(), &DebugConfig::default(), &agent, 2, None).unwrap();
        assert_eq!(r.attempts.len(), 2);
        assert!(!r.succeeded());
    }

    #[test]
    fn self_refine_respects_token_cap() {
        let fx = fixtures::failed_fixture(2);
        let agent = LlmClient::scripted(fixtures::bundle_agent_script());
        let cap = 500;
        let r = self_refine_loop(&fx.trajectory, &fx.factory(), &DebugConfig::default(), &agent, 5, Some(cap)).unwrap();
        assert!(r.budget_exhausted);
        assert!(r.attempts.len() < 5);
        let spent = r.total_usage.total() - fx.trajectory.usage().total();
        assert!(spent <= cap + 2_000, "{spent}");
    }

    #[test]
    fn best_of_n_usage_is_additive() {
        let fx = fixtures::failed_fixture(4);
        let mut cfg = RolloutConfig::new(StrategyId::Modular);
        cfg.seed = Some(7);
        let agent = LlmClient::scripted(fixtures::bundle_agent_script());
        let r = best_of_n(&fx.factory(), &cfg, &agent, 3, None).unwrap();
        assert_eq!(r.attempts.len(), 2);
        let sum = r.initial.usage() + r.attempts.iter().map(|a| a.trajectory.usage()).sum::<TokenUsage>();
        assert_eq!(r.total_usage, sum);
        assert_eq!(r.attempts[1].trajectory.seed, 9);
        assert!(!r.succeeded());

        let one = best_of_n(&fx.factory(), &cfg, &agent, 1, None).unwrap();
        let plain = run_rollout(&cfg, fx.factory().make().unwrap().as_mut(), &LlmClient::scripted(fixtures::bundle_agent_script()), None, None).unwrap();
        assert_eq!(one.initial, plain);
    }

    #[test]
    fn tot_follows_scores() {
        let obs = fixtures::solution_observations();
        let mut script = Script::default();
        for (o, a) in obs.iter().zip(fixtures::MUG_SOLUTION) {
            script = script
                .with_rule(ScriptRule::new(
                    ["Propose up to", &format!("Current observation: {o} Admissible")],
                    json!(["go to fridge 1", a]).to_string(),
                ));
        }
        script = script.with_rule(ScriptRule::new(["Rate how promising"], "[0.1, 0.8]"));
        let agent = LlmClient::scripted(script);
        let r = tot_search(&fixtures::world_factory(fixtures::mug_world()), &RolloutConfig::new(StrategyId::ActOnly), &agent, 2, 1, None).unwrap();
        assert!(r.succeeded());
        assert_eq!(r.initial.len(), 6);
        assert!(r.initial.validate().is_empty());
        assert_eq!(r.total_usage, r.initial.usage());
    }

    #[test]
    fn tot_bad_scores_and_cap() {
        let factory = fixtures::world_factory(fixtures::mug_world());
        let cfg = RolloutConfig::new(StrategyId::ActOnly);
        let bad = LlmClient::scripted(
            Script::default()
                .with_rule(ScriptRule::new(["Propose up to"], r#"["go to cabinet 1", "go to fridge 1"]"#))
                .with_rule(ScriptRule::new(["Rate how promising"], "[0.5]")),
        );
        assert!(matches!(tot_search(&factory, &cfg, &bad, 2, 1, None), Err(DebugError::ScoreParseFailure(_))));

        let agent = LlmClient::scripted(fixtures::baseline_agent_rules());
        let r = tot_search(&factory, &cfg, &agent, 2, 2, Some(400)).unwrap();
        assert!(r.budget_exhausted);
        assert!(r.total_usage.total() <= 400 + 400);
    }
}

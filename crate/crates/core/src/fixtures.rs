//! Deterministic worlds, scripts, and trajectories for tests, the
//! acceptance suite, and the bundled example files.
//!
//! Every task runs in the same small kitchen: the mug sits in a closed
//! cabinet and has to end up in the microwave. A planted task makes the
//! agent wander to the fridge at one step and then loop there until the
//! step cap. Scripts are keyed on the task text and the current
//! observation, so one merged script drives every task.

use serde_json::json;

use crate::debug::CriticalDiagnosis;
use crate::env::gridworld::{ContainerSpec, Goal, LocationSpec};
use crate::env::{EnvError, EnvFactory, Environment, GridWorld, WorldSpec};
use crate::eval::{BenchmarkItem, GoldAnnotation, Prediction};
use crate::llm::{LlmClient, Script, ScriptRule};
use crate::model::{CanonicalAction, ModuleKind, StrategyId, Trajectory};
use crate::rollout::{run_rollout, RolloutConfig};
use crate::taxonomy::ErrorLabel;

/// Shortest solution of [`mug_world`].
pub const MUG_SOLUTION: [&str; 6] = [
    "go to cabinet 1",
    "open cabinet 1",
    "take mug 1 from cabinet 1",
    "go to microwave 1",
    "open microwave 1",
    "put mug 1 in/on microwave 1",
];

const WRONG_MOVE: &str = "go to fridge 1";
const LOOP_ACTION: &str = "examine fridge 1";
const FRIDGE_ARRIVAL: &str = "You arrive at fridge 1. It is closed.";
const FRIDGE_EXAMINE: &str = "It is closed.";
/// Step cap of the planted tasks.
pub const PLANTED_CAP: u32 = 10;
/// Number of tasks in the flip bundle.
pub const BUNDLE_SIZE: usize = 12;

fn container(name: &str, openable: bool, contents: &[&str]) -> ContainerSpec {
    ContainerSpec {
        name: name.into(),
        openable,
        open: false,
        contents: contents.iter().map(|s| s.to_string()).collect(),
    }
}

fn location(c: ContainerSpec) -> LocationSpec {
    LocationSpec {
        name: c.name.clone(),
        containers: vec![c],
    }
}

pub fn mug_world() -> WorldSpec {
    WorldSpec {
        task_id: "mug".into(),
        task_description: None,
        locations: vec![
            location(container("countertop 1", false, &["apple 1"])),
            location(container("cabinet 1", true, &["mug 1"])),
            location(container("microwave 1", true, &[])),
            location(container("fridge 1", true, &["egg 1"])),
        ],
        goal: Goal {
            object: "mug 1".into(),
            receptacle: "microwave 1".into(),
        },
        start_location: "countertop 1".into(),
        seed: 0,
        step_cap: PLANTED_CAP,
        fault: None,
    }
}

/// The mug world under its own task id and a task text unique to it.
pub fn task_world(task_id: &str, step_cap: u32) -> WorldSpec {
    WorldSpec {
        task_id: task_id.into(),
        task_description: Some(task_text(task_id)),
        step_cap,
        ..mug_world()
    }
}

pub fn task_text(task_id: &str) -> String {
    format!("put a clean mug in the microwave. [{task_id}]")
}

pub fn world_factory(spec: WorldSpec) -> impl EnvFactory {
    move || -> Result<Box<dyn Environment>, EnvError> { Ok(Box::new(GridWorld::new(spec.clone())?)) }
}

/// Observations met along [`MUG_SOLUTION`]: `obs[i]` is shown before
/// action `i`.
pub fn solution_observations() -> Vec<String> {
    let mut env = GridWorld::new(mug_world()).expect("fixture world");
    let mut out = vec![env.reset().observation];
    for a in &MUG_SOLUTION[..MUG_SOLUTION.len() - 1] {
        out.push(env.step(&CanonicalAction::env(a)).expect("solution step").observation);
    }
    out
}

/// A completion in the modular tag layout. The parser drops the tags a
/// strategy does not produce at a step.
pub fn agent_reply(plan: &str, action: &str) -> String {
    format!(
        "<memory>Steps so far are in the history above.</memory>\n<reflection>Checking progress against the task.</reflection>\n<plan>{plan}</plan>\n<action>{action}</action>"
    )
}

fn obs_key(obs: &str) -> String {
    format!("current observation is: {obs} Your admissible actions")
}

const GOOD_PLANS: [&str; 6] = [
    "Mugs are usually kept in the cabinet, so check it first.",
    "The cabinet is closed; open it to look inside.",
    "The mug is in the cabinet; take it.",
    "Carry the mug to the microwave.",
    "Open the microwave so the mug can go in.",
    "Place the mug in the microwave to finish.",
];

/// Guidance that, once injected, makes the scripted agent take the right
/// action at its planted step.
pub fn helpful_guidance(task_id: &str, planted: u32) -> String {
    format!(
        "[{task_id}] At step {planted}, do `{}` instead of going to the fridge 1.",
        MUG_SOLUTION[planted as usize - 1]
    )
}

pub fn unhelpful_guidance(task_id: &str) -> String {
    format!("[{task_id}] Explore more locations before committing to one.")
}

/// Scripted agent for one task whose planted error sits at `planted`
/// (1..=5): the wrong move there, a fridge loop afterwards, and the right
/// move instead when the helpful guidance is in the prompt.
pub fn task_agent_script(task_id: &str, planted: u32) -> Script {
    let task = task_text(task_id);
    let obs = solution_observations();
    let p = planted as usize;
    let mut s = Script::default().with_rule(ScriptRule::new(
        [task.clone(), helpful_guidance(task_id, planted), obs_key(&obs[p - 1])],
        agent_reply(GOOD_PLANS[p - 1], MUG_SOLUTION[p - 1]),
    ));
    for (i, o) in obs.iter().enumerate() {
        let reply = if i + 1 == p {
            agent_reply("The mug is probably cold-stored; check the fridge first.", WRONG_MOVE)
        } else {
            agent_reply(GOOD_PLANS[i], MUG_SOLUTION[i])
        };
        s = s.with_rule(ScriptRule::new([task.clone(), obs_key(o)], reply));
    }
    for o in [FRIDGE_ARRIVAL, FRIDGE_EXAMINE] {
        s = s.with_rule(ScriptRule::new(
            [task.clone(), obs_key(o)],
            agent_reply("The mug must be in the fridge; look again.", LOOP_ACTION),
        ));
    }
    s.with_rule(ScriptRule::new([task], agent_reply("Unsure; look around.", "look")))
}

/// Replies to the self-refine and tree-of-thought prompts. These come
/// first so the task rules do not capture them.
pub fn baseline_agent_rules() -> Script {
    Script::default()
        .with_rule(ScriptRule::new(
            ["Why is this trajectory not finished the task?"],
            "The agent went to the fridge instead of the cabinet and never recovered. Go to the cabinet first.",
        ))
        .with_rule(ScriptRule::new(
            ["Propose up to"],
            json!([LOOP_ACTION, "go to cabinet 1"]).to_string(),
        ))
        .with_rule(ScriptRule::new(["Rate how promising"], "[0.3, 0.6]"))
}

fn rollout_config() -> RolloutConfig {
    RolloutConfig::new(StrategyId::Modular)
}

fn run(spec: WorldSpec, script: Script) -> Trajectory {
    let mut env = GridWorld::new(spec).expect("fixture world");
    let client = LlmClient::scripted(script);
    run_rollout(&rollout_config(), &mut env, &client, None, None).expect("fixture rollout")
}

/// A six-step successful run of [`mug_world`].
pub fn solved_mug_trajectory() -> Trajectory {
    let replies = MUG_SOLUTION
        .iter()
        .zip(GOOD_PLANS)
        .map(|(a, p)| agent_reply(p, a));
    run(mug_world(), Script::sequence(replies))
}

/// A failed trajectory with its planted earliest fixable step.
#[derive(Debug, Clone)]
pub struct PlantedFixture {
    pub task_id: String,
    pub planted: u32,
    pub world: WorldSpec,
    pub trajectory: Trajectory,
    /// The action that fixes the planted step.
    pub fix: CanonicalAction,
}

impl PlantedFixture {
    pub fn factory(&self) -> impl EnvFactory {
        world_factory(self.world.clone())
    }

    pub fn agent_script(&self) -> Script {
        task_agent_script(&self.task_id, self.planted)
    }
}

fn planted(task_id: &str, planted: u32, cap: u32) -> PlantedFixture {
    let world = task_world(task_id, cap);
    let trajectory = run(world.clone(), task_agent_script(task_id, planted));
    PlantedFixture {
        task_id: task_id.into(),
        planted,
        world,
        trajectory,
        fix: CanonicalAction::env(MUG_SOLUTION[planted as usize - 1]),
    }
}

/// Planted-error fixture `p` (1..=5), the first tasks of the bundle.
pub fn failed_fixture(p: u32) -> PlantedFixture {
    assert!((1..=5).contains(&p), "planted step must be 1..=5");
    planted(&bundle_task_id(p as usize), p, PLANTED_CAP)
}

/// Agent script for [`failed_fixture`] `p`.
pub fn planted_agent_script(p: u32) -> Script {
    task_agent_script(&bundle_task_id(p as usize), p)
}

/// Modular trajectory with T=5: the planted error at step 2 and a cap of
/// five steps.
pub fn modular_t5_trajectory() -> Trajectory {
    planted("modular-t5", 2, 5).trajectory
}

/// Corrector replies keyed on the observation of the corrected step: the
/// solution action on the solution path, the loop action elsewhere.
pub fn corrector_script() -> Script {
    let mut s = Script::default();
    for (o, a) in solution_observations().iter().zip(MUG_SOLUTION) {
        s = s.with_rule(ScriptRule::new(
            [format!("OBSERVATION AT THIS STEP: {o} ADMISSIBLE ACTIONS:")],
            format!("<action>{a}</action>"),
        ));
    }
    s.with_rule(ScriptRule::new(
        ["You are correcting one step"],
        format!("<action>{LOOP_ACTION}</action>"),
    ))
}

pub fn bundle_task_id(i: usize) -> String {
    format!("task-{i:02}")
}

/// When the judge's guidance starts helping for bundle task `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidancePlan {
    FirstAttempt,
    SecondAttempt,
    Never,
}

pub fn guidance_plan(i: usize) -> GuidancePlan {
    match i {
        11 => GuidancePlan::SecondAttempt,
        12 => GuidancePlan::Never,
        _ => GuidancePlan::FirstAttempt,
    }
}

/// Planted step of bundle task `i`.
pub fn bundle_planted(i: usize) -> u32 {
    ((i - 1) % 5) as u32 + 1
}

/// The twelve failed bundle tasks.
pub fn bundle() -> Vec<PlantedFixture> {
    (1..=BUNDLE_SIZE)
        .map(|i| planted(&bundle_task_id(i), bundle_planted(i), PLANTED_CAP))
        .collect()
}

/// One agent script for every bundle task and the baselines.
pub fn bundle_agent_script() -> Script {
    let mut s = baseline_agent_rules();
    for i in 1..=BUNDLE_SIZE {
        s = s.merge(task_agent_script(&bundle_task_id(i), bundle_planted(i)));
    }
    s.merge(task_agent_script("modular-t5", 2))
}

fn detection(ty: &str, evidence: &str, reasoning: &str) -> String {
    json!({
        "error_detected": ty != "no_error",
        "error_type": ty,
        "evidence": evidence,
        "reasoning": reasoning,
    })
    .to_string()
}

fn diagnosis_json(step: u32, guidance: &str) -> String {
    json!({
        "critical_step": step,
        "critical_module": "planning",
        "error_type": "inefficient_planning",
        "root_cause": "The agent searched the fridge instead of the cabinet and never came back.",
        "evidence": "The mug is probably cold-stored; check the fridge first.",
        "correction_guidance": guidance,
        "cascading_effects": [
            {"step": step + 1, "impact": "The agent starts examining the fridge repeatedly."},
            {"step": PLANTED_CAP, "impact": "The step cap is reached without the mug."},
        ],
    })
    .to_string()
}

/// Judge script for the bundle: detections flag the planted planning
/// error and the misjudged progress in the fridge loop; diagnoses name the
/// planted step with guidance that helps per [`guidance_plan`].
pub fn bundle_judge_script() -> Script {
    let mut s = Script::default();
    let mut tasks: Vec<(String, u32, GuidancePlan)> = (1..=BUNDLE_SIZE)
        .map(|i| (bundle_task_id(i), bundle_planted(i), guidance_plan(i)))
        .collect();
    tasks.push(("modular-t5".into(), 2, GuidancePlan::FirstAttempt));
    for (id, p, plan) in tasks {
        let task = task_text(&id);
        let good = helpful_guidance(&id, p);
        let bad = unhelpful_guidance(&id);
        match plan {
            GuidancePlan::FirstAttempt => {
                s = s.with_rule(ScriptRule::new(
                    [task.clone(), "identify the CRITICAL ERROR".into()],
                    diagnosis_json(p, &good),
                ));
            }
            GuidancePlan::SecondAttempt => {
                s = s.with_rule(ScriptRule::new(
                    [task.clone(), "identify the CRITICAL ERROR".into(), "Current debug attempt index: 1".into()],
                    diagnosis_json(p, &bad),
                ));
                s = s.with_rule(ScriptRule::new(
                    [task.clone(), "identify the CRITICAL ERROR".into()],
                    diagnosis_json(p, &good),
                ));
            }
            GuidancePlan::Never => {
                s = s.with_rule(ScriptRule::new(
                    [task.clone(), "identify the CRITICAL ERROR".into()],
                    diagnosis_json(p, &bad),
                ));
            }
        }
        s = s.with_rule(ScriptRule::new(
            [task.clone(), "(0-based)".into()],
            format!(
                "step: {}\nreason: The agent went to the fridge instead of the cabinet.\nsuggestion: Take `{}` at that step.",
                p - 1,
                MUG_SOLUTION[p as usize - 1]
            ),
        ));
        if p >= 3 {
            // A harmless slip before the critical step.
            s = s.with_rule(ScriptRule::new(
                [
                    task.clone(),
                    "CURRENT STEP: 2 INPUT AND CONTEXT:".into(),
                    "MODULE TO ANALYZE: memory".into(),
                ],
                detection(
                    "over_simplification",
                    "I am at the cabinet.",
                    "The summary drops that the cabinet is still closed; the next action recovers.",
                ),
            ));
        }
        s = s.with_rule(ScriptRule::new(
            [
                task.clone(),
                format!("CURRENT STEP: {p} INPUT AND CONTEXT:"),
                "MODULE TO ANALYZE: planning".into(),
            ],
            detection(
                "inefficient_planning",
                "The mug is probably cold-stored; check the fridge first.",
                "Nothing in the observation points to the fridge; the plan wastes steps.",
            ),
        ));
    }
    s.with_rule(ScriptRule::new(
        ["MODULE TO ANALYZE: reflection", &obs_key(FRIDGE_EXAMINE)],
        detection(
            "progress_misassessment",
            "Checking progress against the task.",
            "The agent keeps examining a closed fridge while believing it is progressing.",
        ),
    ))
    .with_rule(ScriptRule::new(
        ["You are an expert at detecting errors"],
        detection("no_error", "", "The output is consistent with its input."),
    ))
}

fn dataset_of(i: usize) -> &'static str {
    match i {
        1..=4 => "split-a",
        5..=8 => "split-b",
        _ => "split-c",
    }
}

fn gold_label() -> ErrorLabel {
    ErrorLabel::new(ModuleKind::Planning, "inefficient_planning").expect("catalog id")
}

/// The 12-item benchmark: bundle trajectories with their planted step as
/// gold, in three datasets of four.
pub fn benchmark() -> Vec<BenchmarkItem> {
    bundle()
        .into_iter()
        .enumerate()
        .map(|(i, fx)| BenchmarkItem {
            dataset: dataset_of(i + 1).into(),
            annotation: GoldAnnotation {
                trajectory_id: fx.task_id.clone(),
                critical_step: fx.planted,
                module: ModuleKind::Planning,
                error_label: gold_label(),
                notes: "wrong-room detour into a fridge loop".into(),
            },
            trajectory: fx.trajectory,
        })
        .collect()
}

/// Match level each bundled prediction is built to reach.
pub const PREDICTION_LEVELS: [&str; BUNDLE_SIZE] = [
    "all", "all", "step_module", "step", "none", "all", "step", "all", "none", "step_module", "all",
    "all",
];

/// Hand-made predictions against [`benchmark`] reaching
/// [`PREDICTION_LEVELS`].
pub fn predictions() -> Vec<Prediction> {
    (1..=BUNDLE_SIZE)
        .map(|i| {
            let p = bundle_planted(i);
            let (step, label) = match PREDICTION_LEVELS[i - 1] {
                "all" => (p, gold_label()),
                "step_module" => (p, ErrorLabel::new(ModuleKind::Planning, "impossible_action").unwrap()),
                "step" => (p, ErrorLabel::new(ModuleKind::Action, "planning_action_disconnect").unwrap()),
                _ => (p + 1, gold_label()),
            };
            Prediction {
                trajectory_id: bundle_task_id(i),
                diagnosis: CriticalDiagnosis {
                    critical_step: step,
                    critical_module: label.module,
                    error_label: label,
                    root_cause: "fixture prediction".into(),
                    evidence: String::new(),
                    correction_guidance: String::new(),
                    cascading_effects: Vec::new(),
                },
            }
        })
        .collect()
}

/// Wraps a client and keeps every prompt it sees.
pub struct Recorder {
    pub inner: LlmClient,
    prompts: std::sync::Mutex<Vec<String>>,
}

impl Recorder {
    pub fn new(inner: LlmClient) -> Self {
        Self {
            inner,
            prompts: std::sync::Mutex::new(Vec::new()),
        }
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("recorder lock").clone()
    }
}

impl crate::llm::ChatModel for Recorder {
    fn complete(&self, request: &crate::llm::ChatRequest) -> Result<crate::llm::Completion, crate::llm::LlmError> {
        self.prompts.lock().expect("recorder lock").push(request.prompt_text());
        self.inner.complete(request)
    }
}

/// Prompts rendered from fixture bindings, by golden-file name.
pub fn golden_prompts() -> Vec<(String, String)> {
    use crate::debug::{analyze_critical, detect_all, detect_step_errors, direct_prompt_localize, Corrector, DebugConfig};

    let cfg = DebugConfig::default();
    let judge = || Recorder::new(LlmClient::scripted(bundle_judge_script()));
    let mut out = Vec::new();

    let t5 = modular_t5_trajectory();
    let j = judge();
    detect_step_errors(&t5, 3, ModuleKind::Planning, &cfg, &j).expect("fixture detection");
    out.push(("detector.txt".to_string(), j.prompts().remove(0)));

    let fx = failed_fixture(3);
    let profile = detect_all(&fx.trajectory, &cfg, &LlmClient::scripted(bundle_judge_script())).expect("fixture profile");
    let j = judge();
    analyze_critical(&fx.trajectory, &profile, 1, &[], &cfg, &j).expect("fixture diagnosis");
    out.push(("agentdebug.txt".to_string(), j.prompts().remove(0)));

    let j = judge();
    direct_prompt_localize(&fx.trajectory, &cfg, &j).expect("fixture direct localization");
    out.push(("vanilla_debug.txt".to_string(), j.prompts().remove(0)));

    let j = Recorder::new(LlmClient::scripted(corrector_script()));
    Corrector::new(&j, "scripted").propose_correction(&fx.trajectory, 3).expect("fixture correction");
    out.push(("corrector.txt".to_string(), j.prompts().remove(0)));

    let agent = Recorder::new(LlmClient::scripted(bundle_agent_script()));
    let mut env = GridWorld::new(task_world(&fx.task_id, 2)).expect("fixture world");
    let mut rc = rollout_config();
    rc.template_set = crate::rollout::TemplateSet::Alfworld;
    run_rollout(&rc, &mut env, &agent, None, None).expect("fixture rollout");
    let p = agent.prompts();
    out.push(("alfworld_step1.txt".to_string(), p[0].clone()));
    out.push(("alfworld_step2.txt".to_string(), p[1].clone()));
    out
}

fn pretty(value: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("fixture serializes");
    s.push('\n');
    s
}

/// Bundle profiles from the scripted judge, in task order.
pub fn bundle_profiles() -> Vec<crate::debug::ErrorProfile> {
    let judge = LlmClient::scripted(bundle_judge_script());
    let cfg = crate::debug::DebugConfig::default();
    bundle()
        .iter()
        .map(|fx| crate::debug::detect_all(&fx.trajectory, &cfg, &judge).expect("fixture profile"))
        .collect()
}

/// The judge's first diagnosis for every bundle task.
pub fn bundle_diagnoses(profiles: &[crate::debug::ErrorProfile]) -> Vec<Prediction> {
    let judge = LlmClient::scripted(bundle_judge_script());
    let cfg = crate::debug::DebugConfig::default();
    bundle()
        .iter()
        .zip(profiles)
        .map(|(fx, p)| Prediction {
            trajectory_id: fx.task_id.clone(),
            diagnosis: crate::debug::analyze_critical(&fx.trajectory, p, 1, &[], &cfg, &judge).expect("fixture diagnosis"),
        })
        .collect()
}

/// Every file under the crate's `fixtures/` directory, as (relative
/// path, contents).
pub fn example_files() -> Vec<(String, String)> {
    let mut files = Vec::new();
    for fx in bundle() {
        files.push((format!("bundle/worlds/{}.json", fx.task_id), pretty(&fx.world)));
        files.push((format!("bundle/trajectories/{}.json", fx.task_id), pretty(&fx.trajectory)));
    }
    files.push(("bundle/agent_script.json".into(), pretty(&bundle_agent_script())));
    files.push(("bundle/judge_script.json".into(), pretty(&bundle_judge_script().merge(corrector_script()))));
    files.push(("bundle/solved.json".into(), pretty(&solved_mug_trajectory())));
    let profiles = bundle_profiles();
    let diagnoses = bundle_diagnoses(&profiles);
    files.push(("bundle/profiles.json".into(), pretty(&profiles)));
    files.push(("bundle/diagnoses.json".into(), pretty(&diagnoses)));
    files.push(("benchmark.json".into(), pretty(&benchmark())));
    files.push(("predictions.json".into(), pretty(&predictions())));

    let report = crate::eval::MetricsReport::build(&benchmark(), &predictions(), false).expect("fixture report");
    files.push(("golden/metrics_table.txt".into(), crate::eval::render_table(&report)));
    let m = crate::eval::propagation_matrix(&profiles, &diagnoses).expect("fixture matrix");
    files.push(("golden/propagation.csv".into(), m.to_csv()));
    for (name, text) in golden_prompts() {
        files.push((format!("golden/prompts/{name}"), text));
    }
    files
}

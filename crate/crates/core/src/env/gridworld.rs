//! Seeded household text world with ALFWorld-style phrasing.
//!
//! The agent moves between locations, opens containers, and carries one
//! object at a time. The episode succeeds once the goal object rests in the
//! goal receptacle.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActionResult, EnvDescriptor, EnvError, Environment};
use crate::model::CanonicalAction;

fn default_cap() -> u32 {
    30
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerSpec {
    pub name: String,
    #[serde(default)]
    pub openable: bool,
    /// Initial state; only meaningful when `openable`.
    #[serde(default)]
    pub open: bool,
    #[serde(default)]
    pub contents: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocationSpec {
    pub name: String,
    #[serde(default)]
    pub containers: Vec<ContainerSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Goal {
    pub object: String,
    pub receptacle: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    EnvironmentError,
    ToolExecutionError,
}

/// Injected failure: the step numbered `at_step` errors instead of
/// executing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub at_step: u32,
    pub kind: FaultKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_description: Option<String>,
    pub locations: Vec<LocationSpec>,
    pub goal: Goal,
    pub start_location: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cap")]
    pub step_cap: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<FaultSpec>,
}

impl WorldSpec {
    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let spec: WorldSpec =
            serde_json::from_str(text).map_err(|e| EnvError::Load(format!("world spec: {e}")))?;
        spec.check()?;
        Ok(spec)
    }

    pub fn task_text(&self) -> String {
        self.task_description.clone().unwrap_or_else(|| {
            format!("put the {} in/on the {}.", self.goal.object, self.goal.receptacle)
        })
    }

    fn containers(&self) -> impl Iterator<Item = (&LocationSpec, &ContainerSpec)> {
        self.locations
            .iter()
            .flat_map(|l| l.containers.iter().map(move |c| (l, c)))
    }

    /// Structural checks: unique names, goal and start present, a usable
    /// admissible set at every location.
    pub fn check(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::Load(m));
        if self.step_cap == 0 {
            return bad("step_cap must be at least 1".into());
        }
        if self.locations.is_empty() {
            return bad("world has no locations".into());
        }
        let mut locs = BTreeSet::new();
        for l in &self.locations {
            if !locs.insert(l.name.as_str()) {
                return bad(format!("duplicate location `{}`", l.name));
            }
            if self.locations.len() == 1 && l.containers.is_empty() {
                return bad("a single location needs at least one container".into());
            }
        }
        let mut containers = BTreeSet::new();
        let mut objects = BTreeSet::new();
        for (_, c) in self.containers() {
            if !containers.insert(c.name.as_str()) {
                return bad(format!("duplicate container `{}`", c.name));
            }
            for o in &c.contents {
                if !objects.insert(o.as_str()) {
                    return bad(format!("duplicate object `{o}`"));
                }
            }
        }
        if !objects.contains(self.goal.object.as_str()) {
            return bad(format!("goal object `{}` not in world", self.goal.object));
        }
        if !containers.contains(self.goal.receptacle.as_str()) {
            return bad(format!("goal receptacle `{}` not in world", self.goal.receptacle));
        }
        if !locs.contains(self.start_location.as_str()) {
            return bad(format!("start location `{}` not in world", self.start_location));
        }
        Ok(())
    }

    /// A random valid world; every location holds one container of the
    /// same name.
    pub fn random(seed: u64, n_locations: usize, n_objects: usize) -> Self {
        const KINDS: &[(&str, bool)] = &[
            ("cabinet", true),
            ("drawer", true),
            ("fridge", true),
            ("microwave", true),
            ("countertop", false),
            ("shelf", false),
            ("table", false),
            ("sinkbasin", false),
        ];
        const OBJECTS: &[&str] = &["mug", "apple", "knife", "plate", "spoon", "bowl", "cup", "egg"];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_locations = n_locations.max(2);
        let n_objects = n_objects.max(1);
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut locations: Vec<LocationSpec> = (0..n_locations)
            .map(|_| {
                let (kind, openable) = *KINDS.choose(&mut rng).expect("non-empty");
                let n = counts.entry(kind).or_default();
                *n += 1;
                let name = format!("{kind} {n}");
                LocationSpec {
                    name: name.clone(),
                    containers: vec![ContainerSpec {
                        name,
                        openable,
                        open: openable && rng.gen_bool(0.25),
                        contents: Vec::new(),
                    }],
                }
            })
            .collect();
        let mut obj_counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut objects = Vec::new();
        for _ in 0..n_objects {
            let kind = *OBJECTS.choose(&mut rng).expect("non-empty");
            let n = obj_counts.entry(kind).or_default();
            *n += 1;
            let name = format!("{kind} {n}");
            let loc = rng.gen_range(0..locations.len());
            locations[loc].containers[0].contents.push(name.clone());
            objects.push(name);
        }
        let goal_object = objects[rng.gen_range(0..objects.len())].clone();
        let receptacle = locations[rng.gen_range(0..locations.len())].name.clone();
        let start_location = locations[rng.gen_range(0..locations.len())].name.clone();
        WorldSpec {
            task_id: format!("random-{seed}"),
            task_description: None,
            locations,
            goal: Goal {
                object: goal_object,
                receptacle,
            },
            start_location,
            seed,
            step_cap: 30,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Container {
    name: String,
    location: String,
    openable: bool,
    open: bool,
    contents: Vec<String>,
}

impl Container {
    fn accessible(&self) -> bool {
        !self.openable || self.open
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct State {
    at: String,
    holding: Option<String>,
    containers: Vec<Container>,
}

pub struct GridWorld {
    spec: WorldSpec,
    descriptor: EnvDescriptor,
    state: State,
    steps: u32,
    last: Option<ActionResult>,
    halted: bool,
}

fn list_items(items: &[String]) -> String {
    match items {
        [] => "nothing".to_string(),
        [one] => format!("a {one}"),
        [init @ .., last] => {
            let head: Vec<String> = init.iter().map(|i| format!("a {i}")).collect();
            format!("{}, and a {last}", head.join(", "))
        }
    }
}

impl GridWorld {
    pub fn new(spec: WorldSpec) -> Result<Self, EnvError> {
        spec.check()?;
        let descriptor = EnvDescriptor {
            env_name: "gridworld".into(),
            task_id: spec.task_id.clone(),
            task_description: spec.task_text(),
            step_cap: spec.step_cap,
            deterministic: true,
            seed: spec.seed,
        };
        let state = Self::initial_state(&spec);
        Ok(Self {
            spec,
            descriptor,
            state,
            steps: 0,
            last: None,
            halted: false,
        })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    fn initial_state(spec: &WorldSpec) -> State {
        State {
            at: spec.start_location.clone(),
            holding: None,
            containers: spec
                .containers()
                .map(|(l, c)| Container {
                    name: c.name.clone(),
                    location: l.name.clone(),
                    openable: c.openable,
                    open: c.openable && c.open,
                    contents: c.contents.clone(),
                })
                .collect(),
        }
    }

    fn container(&self, name: &str) -> Option<&Container> {
        self.state.containers.iter().find(|c| c.name == name)
    }

    fn container_mut(&mut self, name: &str) -> Option<&mut Container> {
        self.state.containers.iter_mut().find(|c| c.name == name)
    }

    fn here(&self) -> impl Iterator<Item = &Container> {
        self.state
            .containers
            .iter()
            .filter(move |c| c.location == self.state.at)
    }

    fn describe(&self, c: &Container) -> String {
        let subject = if c.name == self.state.at {
            "It".to_string()
        } else {
            format!("The {}", c.name)
        };
        if !c.accessible() {
            format!("{subject} is closed.")
        } else if c.openable {
            format!("{subject} is open. In it, you see {}.", list_items(&c.contents))
        } else if subject == "It" {
            format!("On it, you see {}.", list_items(&c.contents))
        } else {
            format!("On the {}, you see {}.", c.name, list_items(&c.contents))
        }
    }

    fn arrival(&self) -> String {
        let mut parts = vec![format!("You arrive at {}.", self.state.at)];
        parts.extend(self.here().map(|c| self.describe(c)));
        parts.join(" ")
    }

    fn admissible(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .spec
            .locations
            .iter()
            .filter(|l| l.name != self.state.at)
            .map(|l| format!("go to {}", l.name))
            .collect();
        for c in self.here() {
            if c.openable {
                out.push(format!("{} {}", if c.open { "close" } else { "open" }, c.name));
            }
            if c.accessible() {
                if self.state.holding.is_none() {
                    out.extend(c.contents.iter().map(|o| format!("take {o} from {}", c.name)));
                }
                if let Some(o) = &self.state.holding {
                    out.push(format!("put {o} in/on {}", c.name));
                }
            }
            out.push(format!("examine {}", c.name));
        }
        out
    }

    fn goal_met(&self) -> bool {
        self.container(&self.spec.goal.receptacle)
            .is_some_and(|c| c.contents.contains(&self.spec.goal.object))
    }

    /// Applies an environment command. `Err` carries the rejection reason;
    /// the state is untouched in that case.
    fn apply(&mut self, cmd: &str) -> Result<String, String> {
        let cmd = cmd.trim().to_lowercase();
        if let Some(loc) = cmd.strip_prefix("go to ") {
            if loc == self.state.at {
                return Err(format!("You are already at {loc}."));
            }
            if !self.spec.locations.iter().any(|l| l.name == loc) {
                return Err(format!("There is no {loc} here."));
            }
            self.state.at = loc.to_string();
            return Ok(self.arrival());
        }
        if let Some(name) = cmd.strip_prefix("open ") {
            let c = self.reachable(name)?;
            if !c.openable {
                return Err(format!("The {name} cannot be opened."));
            }
            if c.open {
                return Err(format!("The {name} is already open."));
            }
            let c = self.container_mut(name).expect("reachable");
            c.open = true;
            let contents = list_items(&c.contents);
            return Ok(format!("You open the {name}. The {name} is open. In it, you see {contents}."));
        }
        if let Some(name) = cmd.strip_prefix("close ") {
            let c = self.reachable(name)?;
            if !c.openable || !c.open {
                return Err(format!("The {name} is not open."));
            }
            self.container_mut(name).expect("reachable").open = false;
            return Ok(format!("You close the {name}."));
        }
        if let Some(name) = cmd.strip_prefix("examine ") {
            let c = self.reachable(name)?;
            return Ok(self.describe(c));
        }
        if let Some(rest) = cmd.strip_prefix("take ") {
            let (obj, name) = rest
                .split_once(" from ")
                .ok_or("Take what from where?")?;
            let c = self.reachable(name)?;
            if !c.accessible() {
                return Err(format!("The {name} is closed."));
            }
            if !c.contents.iter().any(|o| o == obj) {
                return Err(format!("There is no {obj} in the {name}."));
            }
            if let Some(held) = &self.state.holding {
                return Err(format!("You are already holding the {held}."));
            }
            let c = self.container_mut(name).expect("reachable");
            c.contents.retain(|o| o != obj);
            self.state.holding = Some(obj.to_string());
            return Ok(format!("You pick up the {obj} from the {name}."));
        }
        if let Some(rest) = cmd.strip_prefix("put ") {
            let (obj, name) = ["in/on", "in", "on"]
                .iter()
                .find_map(|p| rest.split_once(&format!(" {p} ")))
                .ok_or("Put what where?")?;
            let c = self.reachable(name)?;
            if !c.accessible() {
                return Err(format!("The {name} is closed."));
            }
            if self.state.holding.as_deref() != Some(obj) {
                return Err(format!("You are not holding the {obj}."));
            }
            self.state.holding = None;
            self.container_mut(name)
                .expect("reachable")
                .contents
                .push(obj.to_string());
            return Ok(format!("You put the {obj} in/on the {name}."));
        }
        Err("That is not a recognized command.".into())
    }

    fn reachable(&self, name: &str) -> Result<&Container, String> {
        match self.container(name) {
            Some(c) if c.location == self.state.at => Ok(c),
            Some(_) => Err(format!("The {name} is not within reach.")),
            None => Err(format!("There is no {name} here.")),
        }
    }
}

impl Environment for GridWorld {
    fn descriptor(&self) -> &EnvDescriptor {
        &self.descriptor
    }

    fn reset(&mut self) -> ActionResult {
        self.state = Self::initial_state(&self.spec);
        self.steps = 0;
        self.halted = false;
        let mut parts = vec![format!("You are at {}.", self.state.at)];
        let others: Vec<String> = self
            .spec
            .locations
            .iter()
            .filter(|l| l.name != self.state.at)
            .map(|l| l.name.clone())
            .collect();
        parts.push(format!("Looking quickly around you, you see {}.", list_items(&others)));
        parts.extend(self.here().map(|c| self.describe(c)));
        let r = ActionResult::running(parts.join(" "), Some(self.admissible()));
        self.last = Some(r.clone());
        r
    }

    fn step(&mut self, action: &CanonicalAction) -> Result<ActionResult, EnvError> {
        if self.halted || self.last.as_ref().is_some_and(|r| r.done) {
            return Err(EnvError::SteppedAfterDone);
        }
        if self.last.is_none() {
            self.reset();
        }
        self.steps += 1;
        if let Some(fault) = &self.spec.fault {
            if fault.at_step == self.steps {
                self.halted = true;
                return Err(match fault.kind {
                    FaultKind::EnvironmentError => EnvError::Crash(fault.message.clone()),
                    FaultKind::ToolExecutionError => EnvError::ToolFailure(fault.message.clone()),
                });
            }
        }
        let applied = match action {
            CanonicalAction::EnvAction { text } => self.apply(text),
            CanonicalAction::ToolCall { name, .. } => Err(format!("There is no tool `{name}` here.")),
            CanonicalAction::FinalAnswer { .. } => Err("Answers are not accepted here; act instead.".into()),
            CanonicalAction::Invalid { .. } => Err("The action could not be parsed.".into()),
        };
        let (observation, invalid_action) = match applied {
            Ok(text) => (text, false),
            Err(reason) => (format!("Nothing happens. {reason}"), true),
        };
        let success = self.goal_met();
        let done = success || self.steps >= self.spec.step_cap;
        let r = ActionResult {
            observation,
            admissible_actions: Some(self.admissible()),
            done,
            success: done.then_some(success),
            invalid_action,
        };
        self.last = Some(r.clone());
        Ok(r)
    }

    fn steps_taken(&self) -> u32 {
        self.steps
    }

    fn last_result(&self) -> Option<&ActionResult> {
        self.last.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::{HaltReason, Outcome};
    use proptest::prelude::*;

    fn act(s: &str) -> CanonicalAction {
        CanonicalAction::env(s)
    }

    fn world() -> GridWorld {
        GridWorld::new(fixtures::mug_world()).unwrap()
    }

    #[test]
    fn reset_names_start_and_lists_moves() {
        let mut env = world();
        let r = env.reset();
        assert!(r.observation.starts_with("You are at countertop 1."), "{}", r.observation);
        let adm = r.admissible_actions.unwrap();
        for loc in ["cabinet 1", "microwave 1", "fridge 1"] {
            assert!(adm.contains(&format!("go to {loc}")), "{adm:?}");
        }
        assert_eq!(env.reset(), env.reset());
        assert!(!r.done && r.success.is_none());
    }

    #[test]
    fn fixture_semantics() {
        let mut env = world();
        env.reset();
        let r = env.step(&act("go to cabinet 1")).unwrap();
        assert_eq!(r.observation, "You arrive at cabinet 1. It is closed.");
        let r = env.step(&act("take mug 1 from cabinet 1")).unwrap();
        assert!(r.invalid_action);
        assert!(r.observation.starts_with("Nothing happens."));
    }

    #[test]
    fn shortest_solution_succeeds_in_six() {
        let mut env = world();
        env.reset();
        let mut last = None;
        for a in fixtures::MUG_SOLUTION {
            last = Some(env.step(&act(a)).unwrap());
        }
        let last = last.unwrap();
        assert!(last.done);
        assert_eq!(last.success, Some(true));
        assert_eq!(env.steps_taken(), 6);
        assert_eq!(env.outcome(), Ok(Outcome::Success));
        assert_eq!(env.step(&act("look")), Err(EnvError::SteppedAfterDone));
    }

    #[test]
    fn cap_exhaustion_is_step_limit() {
        let mut spec = fixtures::mug_world();
        spec.step_cap = 4;
        let mut env = GridWorld::new(spec).unwrap();
        env.reset();
        for i in 0..4 {
            assert!(env.outcome().is_err(), "step {i}");
            let loc = if i % 2 == 0 { "go to cabinet 1" } else { "go to fridge 1" };
            env.step(&act(loc)).unwrap();
        }
        assert_eq!(
            env.outcome(),
            Ok(Outcome::SystemHalt {
                reason: HaltReason::StepLimit
            })
        );
    }

    #[test]
    fn open_reveals_and_put_requires_open() {
        let mut env = world();
        env.reset();
        env.step(&act("go to cabinet 1")).unwrap();
        let r = env.step(&act("open cabinet 1")).unwrap();
        assert_eq!(r.observation, "You open the cabinet 1. The cabinet 1 is open. In it, you see a mug 1.");
        env.step(&act("take mug 1 from cabinet 1")).unwrap();
        env.step(&act("go to microwave 1")).unwrap();
        let r = env.step(&act("put mug 1 in/on microwave 1")).unwrap();
        assert!(r.invalid_action, "microwave is closed");
    }

    #[test]
    fn faults_surface_as_errors() {
        let mut spec = fixtures::mug_world();
        spec.fault = Some(FaultSpec {
            at_step: 2,
            kind: FaultKind::EnvironmentError,
            message: "simulator crashed".into(),
        });
        let mut env = GridWorld::new(spec).unwrap();
        env.reset();
        env.step(&act("go to cabinet 1")).unwrap();
        assert_eq!(
            env.step(&act("open cabinet 1")),
            Err(EnvError::Crash("simulator crashed".into()))
        );
        assert_eq!(env.step(&act("open cabinet 1")), Err(EnvError::SteppedAfterDone));
    }

    #[test]
    fn spec_checks() {
        let mut s = fixtures::mug_world();
        s.goal.object = "teapot 1".into();
        assert!(GridWorld::new(s).is_err());
        let mut s = fixtures::mug_world();
        s.locations[1].containers[0].contents.push("mug 1".into());
        assert!(GridWorld::new(s).is_err());
        let mut s = fixtures::mug_world();
        s.start_location = "garage".into();
        assert!(GridWorld::new(s).is_err());
        assert!(WorldSpec::from_json("{\"task_id\": 1}").is_err());
    }

    fn action_strategy() -> impl Strategy<Value = Vec<(usize, Option<String>)>> {
        prop::collection::vec(
            (any::<usize>(), prop::option::weighted(0.2, "[a-z ]{0,12}")),
            0..25,
        )
    }

    /// Picks from the admissible list, or a junk command when given one.
    fn run(spec: &WorldSpec, picks: &[(usize, Option<String>)]) -> Vec<ActionResult> {
        let mut env = GridWorld::new(spec.clone()).unwrap();
        let mut current = env.reset();
        let mut out = vec![current.clone()];
        for (i, junk) in picks {
            if current.done {
                break;
            }
            let a = match junk {
                Some(j) => j.clone(),
                None => {
                    let adm = current.admissible_actions.as_ref().unwrap();
                    adm[i % adm.len()].clone()
                }
            };
            current = env.step(&CanonicalAction::env(&a)).unwrap();
            out.push(current.clone());
        }
        out
    }

    proptest! {
        #[test]
        fn deterministic(seed in any::<u64>(), n_loc in 2usize..6, n_obj in 1usize..5, picks in action_strategy()) {
            let spec = WorldSpec::random(seed, n_loc, n_obj);
            prop_assert!(spec.check().is_ok());
            prop_assert_eq!(run(&spec, &picks), run(&spec, &picks));
        }

        #[test]
        fn admissible_always_has_a_valid_action(seed in any::<u64>(), picks in action_strategy()) {
            let spec = WorldSpec::random(seed, 4, 3);
            for r in run(&spec, &picks) {
                if r.done { continue; }
                let adm = r.admissible_actions.unwrap();
                prop_assert!(!adm.is_empty());
            }
        }

        #[test]
        fn invalid_actions_leave_state_unchanged(seed in any::<u64>(), picks in action_strategy(), junk in "[a-z ]{1,12}", probe in any::<usize>()) {
            let spec = WorldSpec::random(seed, 4, 3);
            let mut a = GridWorld::new(spec.clone()).unwrap();
            let mut b = GridWorld::new(spec.clone()).unwrap();
            let mut ra = a.reset();
            b.reset();
            for (i, _) in &picks {
                if ra.done { break; }
                let adm = ra.admissible_actions.clone().unwrap();
                let act = CanonicalAction::env(&adm[i % adm.len()]);
                ra = a.step(&act).unwrap();
                b.step(&act).unwrap();
            }
            prop_assume!(!ra.done);
            let adm = ra.admissible_actions.clone().unwrap();
            let probe_action = CanonicalAction::env(&adm[probe % adm.len()]);
            let bad = a.step(&CanonicalAction::env(&format!("zz {junk}"))).unwrap();
            prop_assert!(bad.invalid_action);
            prop_assume!(!bad.done);
            let pa = a.step(&probe_action).unwrap();
            let pb = b.step(&probe_action).unwrap();
            prop_assert_eq!(pa.observation, pb.observation);
            prop_assert_eq!(pa.admissible_actions, pb.admissible_actions);
        }
    }

    #[test]
    fn admissible_actions_are_accepted() {
        for seed in 0..40u64 {
            let spec = WorldSpec::random(seed, 4, 3);
            let mut env = GridWorld::new(spec.clone()).unwrap();
            let mut prefix = Vec::new();
            let mut current = env.reset();
            for k in 0..8usize {
                if current.done {
                    break;
                }
                let adm = current.admissible_actions.clone().unwrap();
                for a in &adm {
                    let mut probe = GridWorld::new(spec.clone()).unwrap();
                    super::super::replay_prefix(&mut probe, &prefix, None).unwrap();
                    let r = probe.step(&CanonicalAction::env(a)).unwrap();
                    assert!(!r.invalid_action, "seed {seed}: `{a}` rejected: {}", r.observation);
                }
                let pick = CanonicalAction::env(&adm[(seed as usize + k) % adm.len()]);
                current = env.step(&pick).unwrap();
                prefix.push(pick);
            }
        }
    }
}

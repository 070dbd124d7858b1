//! Offline environment driven by a recorded trajectory.
//!
//! The recording is ground truth: the recorded action at each step yields
//! the recorded response, anything else is rejected without advancing.

use super::{ActionResult, EnvDescriptor, EnvError, Environment};
use crate::model::{CanonicalAction, HaltReason, Outcome, Trajectory};

pub struct ReplayEnv {
    trajectory: Trajectory,
    descriptor: EnvDescriptor,
    /// Recorded steps consumed so far.
    cursor: usize,
    steps: u32,
    last: Option<ActionResult>,
}

impl ReplayEnv {
    pub fn new(trajectory: Trajectory) -> Self {
        let cap = trajectory
            .step_cap
            .unwrap_or(trajectory.steps.len() as u32)
            .max(1);
        let descriptor = EnvDescriptor {
            env_name: "replay".into(),
            task_id: trajectory.task_id.clone(),
            task_description: trajectory.task_description.clone(),
            step_cap: cap,
            deterministic: true,
            seed: trajectory.seed,
        };
        Self {
            trajectory,
            descriptor,
            cursor: 0,
            steps: 0,
            last: None,
        }
    }

    fn admissible_at(&self, i: usize) -> Option<Vec<String>> {
        self.trajectory
            .steps
            .get(i)
            .and_then(|s| s.admissible_actions.clone())
    }

    fn finished_on_script(&self) -> bool {
        self.cursor == self.trajectory.steps.len()
    }
}

impl Environment for ReplayEnv {
    fn descriptor(&self) -> &EnvDescriptor {
        &self.descriptor
    }

    fn reset(&mut self) -> ActionResult {
        self.cursor = 0;
        self.steps = 0;
        let observation = self
            .trajectory
            .steps
            .first()
            .map(|s| s.observation.clone())
            .unwrap_or_default();
        let r = ActionResult::running(observation, self.admissible_at(0));
        self.last = Some(r.clone());
        r
    }

    fn step(&mut self, action: &CanonicalAction) -> Result<ActionResult, EnvError> {
        if self.last.as_ref().is_some_and(|r| r.done) {
            return Err(EnvError::SteppedAfterDone);
        }
        if self.last.is_none() {
            self.reset();
        }
        self.steps += 1;
        let r = match self.trajectory.steps.get(self.cursor) {
            Some(rec) if rec.action == *action => {
                self.cursor += 1;
                let done = self.finished_on_script();
                ActionResult {
                    observation: rec.env_response.clone(),
                    admissible_actions: self.admissible_at(self.cursor),
                    done,
                    success: done.then(|| self.trajectory.outcome.is_success()),
                    invalid_action: false,
                }
            }
            Some(rec) => {
                let done = self.steps >= self.descriptor.step_cap;
                ActionResult {
                    observation: format!(
                        "Nothing happens. The recorded trajectory took `{}` here.",
                        rec.action
                    ),
                    admissible_actions: self.admissible_at(self.cursor),
                    done,
                    success: done.then_some(false),
                    invalid_action: true,
                }
            }
            None => return Err(EnvError::SteppedAfterDone),
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

    /// The recorded outcome when the recording was followed to its end.
    fn outcome(&self) -> Result<Outcome, EnvError> {
        let last = self.last.as_ref().ok_or(EnvError::NotFinished)?;
        if !last.done {
            return Err(EnvError::NotFinished);
        }
        if self.finished_on_script() {
            Ok(self.trajectory.outcome)
        } else {
            Ok(Outcome::SystemHalt {
                reason: HaltReason::StepLimit,
            })
        }
    }
}

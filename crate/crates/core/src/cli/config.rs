//! Run configuration. Each setting is taken from the first layer that sets
//! it: command-line flags, then the TOML config file, then environment
//! variables, then built-in defaults.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use super::CliError;
use crate::debug::{DebugConfig, DEFAULT_BUDGET};
use crate::env::ENV_NAMES;
use crate::llm::live::{LiveConfig, ENV_MODEL};
use crate::llm::{backend_from_config, LlmClient};
use crate::model::StrategyId;
use crate::rollout::{RolloutConfig, TemplateSet};

pub const ENV_BACKEND: &str = "TRAJDEBUG_BACKEND";
pub const ENV_SCRIPT: &str = "TRAJDEBUG_SCRIPT";
pub const ENV_JUDGE_SCRIPT: &str = "TRAJDEBUG_JUDGE_SCRIPT";
pub const ENV_JUDGE_MODEL: &str = "TRAJDEBUG_JUDGE_MODEL";

/// One layer of settings; unset fields fall through to the next layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    /// Model backend: live or scripted.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Agent script for the scripted backend.
    #[arg(long, global = true)]
    pub script: Option<PathBuf>,
    /// Judge script for the scripted backend; defaults to --script.
    #[arg(long, global = true)]
    pub judge_script: Option<PathBuf>,
    #[arg(long, global = true)]
    pub model_id: Option<String>,
    /// Judge model; defaults to --model-id.
    #[arg(long, global = true)]
    pub judge_model: Option<String>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// Environment registry name (gridworld, replay).
    #[arg(long, global = true)]
    pub env_name: Option<String>,
    /// Directory holding one `<task_id>.json` environment spec per task.
    #[arg(long, global = true)]
    pub world_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub strategy: Option<String>,
    #[arg(long, global = true)]
    pub step_cap: Option<u32>,
    #[arg(long, global = true)]
    pub history_window: Option<usize>,
    /// Re-rollout budget I.
    #[arg(long, global = true)]
    pub budget: Option<u32>,
    /// Token cap per task for the baselines.
    #[arg(long, global = true)]
    pub token_budget: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Tasks run in parallel.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

macro_rules! layered {
    ($hi:expr, $lo:expr, $($f:ident),*) => {
        ConfigLayer { $($f: $hi.$f.or($lo.$f),)* }
    };
}

impl ConfigLayer {
    /// Fills fields unset here from `lower`.
    pub fn over(self, lower: ConfigLayer) -> ConfigLayer {
        layered!(
            self, lower, backend, script, judge_script, model_id, judge_model, temperature,
            env_name, world_dir, strategy, step_cap, history_window, budget, token_budget, out,
            seed, jobs
        )
    }

    /// Reads a TOML file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn from_toml_file(path: &Path) -> Result<ConfigLayer, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("Config", format!("{}: {e}", path.display())))?;
        let mut layer: ConfigLayer = toml::from_str(&text)
            .map_err(|e| CliError::config("Config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut layer.script, &mut layer.judge_script, &mut layer.world_dir, &mut layer.out]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(layer)
    }

    /// Settings taken from environment variables via `lookup`.
    pub fn from_env(lookup: impl Fn(&str) -> Option<String>) -> ConfigLayer {
        ConfigLayer {
            backend: lookup(ENV_BACKEND),
            script: lookup(ENV_SCRIPT).map(PathBuf::from),
            judge_script: lookup(ENV_JUDGE_SCRIPT).map(PathBuf::from),
            model_id: lookup(ENV_MODEL),
            judge_model: lookup(ENV_JUDGE_MODEL),
            ..ConfigLayer::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Live,
    Scripted,
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub backend: Backend,
    pub script: Option<PathBuf>,
    pub judge_script: Option<PathBuf>,
    pub model_id: String,
    pub judge_model: String,
    pub temperature: f64,
    pub env_name: String,
    pub world_dir: Option<PathBuf>,
    pub strategy: StrategyId,
    pub step_cap: Option<u32>,
    pub history_window: usize,
    pub budget: u32,
    pub token_budget: Option<u64>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub jobs: usize,
}

impl RunConfig {
    pub fn resolve(layer: ConfigLayer) -> Result<RunConfig, CliError> {
        let bad = |m: String| CliError::config("Config", m);
        let backend = match layer.backend.as_deref().unwrap_or("scripted") {
            "live" => Backend::Live,
            "scripted" => Backend::Scripted,
            other => return Err(bad(format!("unknown backend `{other}` (live|scripted)"))),
        };
        if backend == Backend::Scripted && layer.script.is_none() {
            return Err(bad("the scripted backend requires --script".into()));
        }
        let model_id = match (&layer.model_id, backend) {
            (Some(m), _) => m.clone(),
            (None, Backend::Scripted) => "scripted".into(),
            (None, Backend::Live) => return Err(bad(format!("the live backend requires --model-id or {ENV_MODEL}"))),
        };
        let strategy = match &layer.strategy {
            Some(s) => s.parse::<StrategyId>().map_err(bad)?,
            None => StrategyId::Modular,
        };
        let env_name = layer.env_name.unwrap_or_else(|| "gridworld".into());
        if !ENV_NAMES.contains(&env_name.as_str()) {
            return Err(bad(format!("unknown env `{env_name}` (known: {})", ENV_NAMES.join(", "))));
        }
        let temperature = layer.temperature.unwrap_or(0.0);
        if !(0.0..=2.0).contains(&temperature) {
            return Err(bad(format!("temperature {temperature} outside 0..=2")));
        }
        let budget = layer.budget.unwrap_or(DEFAULT_BUDGET);
        if budget == 0 {
            return Err(bad("budget must be at least 1".into()));
        }
        if layer.token_budget == Some(0) {
            return Err(bad("token budget must be positive".into()));
        }
        if layer.step_cap == Some(0) {
            return Err(bad("step cap must be positive".into()));
        }
        let history_window = layer.history_window.unwrap_or(10);
        if history_window == 0 {
            return Err(bad("history window must be positive".into()));
        }
        let jobs = layer.jobs.unwrap_or(1);
        if jobs == 0 {
            return Err(bad("jobs must be at least 1".into()));
        }
        Ok(RunConfig {
            backend,
            judge_script: layer.judge_script.or_else(|| layer.script.clone()),
            script: layer.script,
            judge_model: layer.judge_model.unwrap_or_else(|| model_id.clone()),
            model_id,
            temperature,
            env_name,
            world_dir: layer.world_dir,
            strategy,
            step_cap: layer.step_cap,
            history_window,
            budget,
            token_budget: layer.token_budget,
            out: layer.out.unwrap_or_else(|| PathBuf::from("trajdebug-out")),
            seed: layer.seed,
            jobs,
        })
    }

    fn client(&self, script: Option<&Path>) -> Result<LlmClient, CliError> {
        let kind = match self.backend {
            Backend::Live => "live",
            Backend::Scripted => "scripted",
        };
        let live = match self.backend {
            Backend::Live => Some(LiveConfig::from_env().map_err(|e| CliError::config("Config", e.to_string()))?),
            Backend::Scripted => None,
        };
        backend_from_config(kind, script, live)
            .map(LlmClient::from_arc)
            .map_err(|e| CliError::config("Config", e.to_string()))
    }

    pub fn agent_client(&self) -> Result<LlmClient, CliError> {
        self.client(self.script.as_deref())
    }

    pub fn judge_client(&self) -> Result<LlmClient, CliError> {
        self.client(self.judge_script.as_deref())
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        let mut cfg = RolloutConfig::new(self.strategy);
        cfg.history_window = self.history_window;
        cfg.step_cap = self.step_cap;
        cfg.model_id = self.model_id.clone();
        cfg.temperature = self.temperature;
        cfg.seed = self.seed;
        cfg.template_set = self.env_name.parse().unwrap_or(TemplateSet::Gridworld);
        cfg
    }

    pub fn debug_config(&self) -> DebugConfig {
        DebugConfig {
            rollout: self.rollout_config(),
            judge_model: self.judge_model.clone(),
            judge_temperature: self.temperature,
            budget: self.budget,
            ..DebugConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(script: &str) -> ConfigLayer {
        ConfigLayer {
            script: Some(script.into()),
            ..ConfigLayer::default()
        }
    }

    #[test]
    fn precedence() {
        let flags = ConfigLayer {
            budget: Some(2),
            ..layer("flag.json")
        };
        let file = ConfigLayer {
            budget: Some(4),
            seed: Some(9),
            model_id: Some("from-file".into()),
            ..ConfigLayer::default()
        };
        let env = ConfigLayer::from_env(|k| match k {
            ENV_MODEL => Some("from-env".into()),
            ENV_BACKEND => Some("scripted".into()),
            ENV_JUDGE_MODEL => Some("judge-env".into()),
            _ => None,
        });
        let cfg = RunConfig::resolve(flags.over(file).over(env)).unwrap();
        assert_eq!(cfg.budget, 2);
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.model_id, "from-file");
        assert_eq!(cfg.judge_model, "judge-env");
        assert_eq!(cfg.script, Some("flag.json".into()));
        assert_eq!(cfg.judge_script, cfg.script);
        assert_eq!(cfg.history_window, 10);
        assert_eq!(cfg.budget, 2);
    }

    #[test]
    fn invalid_settings() {
        let cases = [
            ConfigLayer::default(),
            ConfigLayer { budget: Some(0), ..layer("s") },
            ConfigLayer { token_budget: Some(0), ..layer("s") },
            ConfigLayer { backend: Some("magic".into()), ..layer("s") },
            ConfigLayer { backend: Some("live".into()), ..ConfigLayer::default() },
            ConfigLayer { strategy: Some("nope".into()), ..layer("s") },
            ConfigLayer { env_name: Some("nope".into()), ..layer("s") },
            ConfigLayer { jobs: Some(0), ..layer("s") },
        ];
        for c in cases {
            let e = RunConfig::resolve(c.clone()).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{c:?}");
        }
    }

    #[test]
    fn toml_paths_are_relative_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "script = \"agent.json\"\nbudget = 3\nstrategy = \"react\"\n").unwrap();
        let l = ConfigLayer::from_toml_file(&path).unwrap();
        assert_eq!(l.script, Some(dir.path().join("agent.json")));
        let cfg = RunConfig::resolve(l).unwrap();
        assert_eq!((cfg.budget, cfg.strategy), (3, StrategyId::React));

        std::fs::write(&path, "unknown_key = 1\n").unwrap();
        assert!(ConfigLayer::from_toml_file(&path).is_err());
    }
}

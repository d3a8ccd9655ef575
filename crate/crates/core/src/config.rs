//! Run configuration profiles and JSON overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rollout::RolloutConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full-size settings (T_s = 400, batch 128).
    Paper,
    /// Desk-scale settings used by the tests (T_s = 100, batch 16).
    Toy,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Profile> {
        match s {
            "paper" => Ok(Profile::Paper),
            "toy" => Ok(Profile::Toy),
            _ => Err(Error::Config(format!("unknown profile {s:?} (paper, toy)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Toy => "toy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rollout: RolloutConfig,
}

impl RunConfig {
    pub fn paper() -> RunConfig {
        RunConfig {
            profile: Profile::Paper,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            rollout: RolloutConfig::default(),
        }
    }

    pub fn toy() -> RunConfig {
        RunConfig {
            profile: Profile::Toy,
            model: ModelConfig {
                layers: 2,
                heads: 4,
                d_model: 128,
                d_emb: 64,
                seq_len: 100,
                dropout: 0.0,
                ff_mult: 2,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                batch_size: 16,
                steps: 2000,
                lr_start: 1e-3,
                lr_end: 1e-4,
                t_p_max: 80,
                min_future: 20,
                log_every: 50,
                ..TrainConfig::default()
            },
            rollout: RolloutConfig {
                t_p_eval: 80,
                t_f: 20,
                t_e: 10,
                ..RolloutConfig::default()
            },
        }
    }

    pub fn profile(p: Profile) -> RunConfig {
        match p {
            Profile::Paper => RunConfig::paper(),
            Profile::Toy => RunConfig::toy(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(self.model.seq_len)?;
        if self.rollout.t_p_eval + self.rollout.t_f > self.model.seq_len {
            return Err(Error::Config(format!(
                "rollout t_p_eval + t_f = {} exceeds seq_len {}",
                self.rollout.t_p_eval + self.rollout.t_f,
                self.model.seq_len
            )));
        }
        if self.rollout.t_e == 0 || self.rollout.t_e > self.rollout.t_f {
            return Err(Error::Config("rollout t_e must be in [1, t_f]".into()));
        }
        Ok(())
    }

    /// Applies a partial JSON object over this config. Keys must already
    /// exist; `profile` switches the base before the other keys are applied.
    pub fn merge(&self, overrides: &Value) -> Result<RunConfig> {
        let Value::Object(o) = overrides else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let base = match o.get("profile") {
            Some(p) => RunConfig::profile(
                serde_json::from_value(p.clone())
                    .map_err(|e| Error::Config(format!("profile: {e}")))?,
            ),
            None => self.clone(),
        };
        let mut v = serde_json::to_value(&base)?;
        merge_into(&mut v, o, "")?;
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn merge_into(base: &mut Value, o: &Map<String, Value>, path: &str) -> Result<()> {
    let Value::Object(b) = base else {
        return Err(Error::Config(format!("`{path}` is not a section")));
    };
    for (k, v) in o {
        let p = if path.is_empty() {
            k.clone()
        } else {
            format!("{path}.{k}")
        };
        let Some(slot) = b.get_mut(k) else {
            return Err(Error::Config(format!("unknown config key `{p}`")));
        };
        match (slot.is_object(), v) {
            (true, Value::Object(inner)) => merge_into(slot, inner, &p)?,
            _ => *slot = v.clone(),
        }
    }
    Ok(())
}

/// Reads `path` (a possibly partial JSON object) over `base`.
pub fn load_config(path: &Path, base: &RunConfig) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e.to_string()))?;
    let v: Value =
        serde_json::from_str(&text).map_err(|e| Error::file(path, format!("not JSON: {e}")))?;
    base.merge(&v).map_err(|e| match e {
        Error::Config(m) => Error::file(path, m),
        other => other,
    })
}

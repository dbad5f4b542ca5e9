use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::agents::{AgentArch, AgentConfig, EpsilonSchedule};
use crate::combat::ScenarioConfig;
use crate::error::{Error, Result};
use crate::mixers::{MixerConfig, MixerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    TwoStep,
    MicroCombat,
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "two_step" => Ok(EnvKind::TwoStep),
            "micro_combat" => Ok(EnvKind::MicroCombat),
            other => Err(Error::config("env", format!("unknown environment `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Iql,
    Vdn,
    VdnS,
    Qmix,
    QmixLin,
    QmixNs,
    /// Scripted attack-closest allies; no learning.
    Heuristic,
}

impl Algorithm {
    pub const LEARNED: [Algorithm; 6] = [
        Algorithm::Iql,
        Algorithm::Vdn,
        Algorithm::VdnS,
        Algorithm::Qmix,
        Algorithm::QmixLin,
        Algorithm::QmixNs,
    ];

    pub fn mixer(self) -> Option<MixerKind> {
        Some(match self {
            Algorithm::Iql => MixerKind::Independent,
            Algorithm::Vdn => MixerKind::Vdn,
            Algorithm::VdnS => MixerKind::VdnS,
            Algorithm::Qmix => MixerKind::Qmix,
            Algorithm::QmixLin => MixerKind::QmixLin,
            Algorithm::QmixNs => MixerKind::QmixNs,
            Algorithm::Heuristic => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Iql => "iql",
            Algorithm::Vdn => "vdn",
            Algorithm::VdnS => "vdn_s",
            Algorithm::Qmix => "qmix",
            Algorithm::QmixLin => "qmix_lin",
            Algorithm::QmixNs => "qmix_ns",
            Algorithm::Heuristic => "heuristic",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::LEARNED
            .into_iter()
            .chain([Algorithm::Heuristic])
            .find(|a| a.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::config("algorithm", format!("unknown algorithm `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_env_steps: u64,
    pub gamma: f64,
    pub lr: f64,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub buffer_size: usize,
    pub batch_size: usize,
    pub target_update_episodes: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_steps: u64,
    pub train_steps_per_episode: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub agent_arch: AgentArch,
    pub agent_hidden: usize,
    pub mixer_embed: usize,
    pub hyper_hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub every_episodes: u64,
    pub episodes: usize,
}

/// Everything a run depends on. `map` is only read for micro-combat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvKind,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub train: TrainConfig,
    pub network: NetworkConfig,
    pub eval: EvalConfig,
    pub map: ScenarioConfig,
}

/// Where an effective value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// Published hyperparameter for this environment.
    Paper,
    /// Implementation default where no published value exists.
    Default,
    /// Set by the config file or the command line.
    Override,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Paper => "paper-default",
            Source::Default => "implementation-default",
            Source::Override => "override",
        })
    }
}

const PUBLISHED_COMMON: &[&str] = &[
    "train.gamma",
    "train.lr",
    "train.rms_alpha",
    "train.batch_size",
    "train.buffer_size",
    "train.target_update_episodes",
    "train.epsilon_start",
    "train.epsilon_end",
    "network.agent_arch",
    "network.agent_hidden",
    "network.mixer_embed",
    "eval.every_episodes",
    "eval.episodes",
];

const PUBLISHED_TWO_STEP: &[&str] = &["train.total_env_steps", "train.epsilon_anneal_steps"];

const PUBLISHED_COMBAT: &[&str] = &[
    "train.epsilon_anneal_steps",
    "network.hyper_hidden",
    "map.episode_limit",
];

impl ExperimentConfig {
    /// Published settings for the two-step game: full exploration, a
    /// 64-unit feed-forward agent and an 8-unit mixer.
    pub fn two_step() -> Self {
        Self {
            env: EnvKind::TwoStep,
            algorithm: Algorithm::Qmix,
            seed: 0,
            train: TrainConfig {
                total_env_steps: 10_000,
                gamma: 0.99,
                lr: 5e-4,
                rms_alpha: 0.99,
                rms_eps: 1e-5,
                buffer_size: 500,
                batch_size: 32,
                target_update_episodes: 100,
                epsilon_start: 1.0,
                epsilon_end: 1.0,
                epsilon_anneal_steps: 0,
                train_steps_per_episode: 1,
            },
            network: NetworkConfig {
                agent_arch: AgentArch::FeedForward,
                agent_hidden: 64,
                mixer_embed: 8,
                hyper_hidden: 32,
            },
            eval: EvalConfig {
                every_episodes: 100,
                episodes: 20,
            },
            map: ScenarioConfig::default(),
        }
    }

    /// Published micro-combat settings with the step budget cut to desk
    /// scale.
    pub fn micro_combat(scenario: &str) -> Result<Self> {
        Ok(Self {
            env: EnvKind::MicroCombat,
            algorithm: Algorithm::Qmix,
            seed: 0,
            train: TrainConfig {
                total_env_steps: 200_000,
                gamma: 0.99,
                lr: 5e-4,
                rms_alpha: 0.99,
                rms_eps: 1e-5,
                buffer_size: 5000,
                batch_size: 32,
                target_update_episodes: 200,
                epsilon_start: 1.0,
                epsilon_end: 0.05,
                epsilon_anneal_steps: 50_000,
                train_steps_per_episode: 1,
            },
            network: NetworkConfig {
                agent_arch: AgentArch::Recurrent,
                agent_hidden: 64,
                mixer_embed: 32,
                hyper_hidden: 32,
            },
            eval: EvalConfig {
                every_episodes: 100,
                episodes: 20,
            },
            map: ScenarioConfig::named(scenario)?,
        })
    }

    pub fn defaults_for(env: EnvKind, scenario: Option<&str>) -> Result<Self> {
        match env {
            EnvKind::TwoStep => Ok(Self::two_step()),
            EnvKind::MicroCombat => Self::micro_combat(scenario.unwrap_or("3m")),
        }
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            arch: self.network.agent_arch,
            hidden: self.network.agent_hidden,
        }
    }

    pub fn mixer_config(&self) -> MixerConfig {
        MixerConfig {
            embed: self.network.mixer_embed,
            hyper_hidden: self.network.hyper_hidden,
        }
    }

    pub fn epsilon(&self) -> EpsilonSchedule {
        EpsilonSchedule {
            start: self.train.epsilon_start,
            end: self.train.epsilon_end,
            anneal_steps: self.train.epsilon_anneal_steps,
        }
    }

    /// Scenario label used in metrics rows.
    pub fn scenario_name(&self) -> &str {
        match self.env {
            EnvKind::TwoStep => "two_step",
            EnvKind::MicroCombat => &self.map.name,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(0.0..1.0).contains(&t.gamma) {
            return Err(Error::config("train.gamma", "must lie in [0, 1)"));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&t.rms_alpha) {
            return Err(Error::config("train.rms_alpha", "must lie in [0, 1)"));
        }
        if t.rms_eps <= 0.0 {
            return Err(Error::config("train.rms_eps", "must be positive"));
        }
        for (field, v) in [
            ("train.buffer_size", t.buffer_size as u64),
            ("train.batch_size", t.batch_size as u64),
            ("train.target_update_episodes", t.target_update_episodes),
            ("train.total_env_steps", t.total_env_steps),
            ("network.agent_hidden", self.network.agent_hidden as u64),
            ("network.mixer_embed", self.network.mixer_embed as u64),
            ("network.hyper_hidden", self.network.hyper_hidden as u64),
            ("eval.every_episodes", self.eval.every_episodes),
            ("eval.episodes", self.eval.episodes as u64),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        for (field, e) in [("train.epsilon_start", t.epsilon_start), ("train.epsilon_end", t.epsilon_end)] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        match (self.env, self.algorithm) {
            (EnvKind::TwoStep, Algorithm::Heuristic) => {
                return Err(Error::config("algorithm", "the heuristic needs the micro-combat environment"))
            }
            (EnvKind::TwoStep, _) if self.network.agent_arch != AgentArch::FeedForward => {
                return Err(Error::config("network.agent_arch", "the two-step game uses a feed-forward agent"))
            }
            (EnvKind::MicroCombat, _) => self.map.validate()?,
            _ => {}
        }
        Ok(())
    }

    fn published(&self, key: &str) -> bool {
        let extra = match self.env {
            EnvKind::TwoStep => PUBLISHED_TWO_STEP,
            EnvKind::MicroCombat => PUBLISHED_COMBAT,
        };
        PUBLISHED_COMMON.contains(&key) || extra.contains(&key)
    }
}

/// An effective config plus the dotted keys that were set explicitly.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedConfig {
    pub config: ExperimentConfig,
    pub overrides: BTreeSet<String>,
}

/// Command-line level overrides applied on top of a config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CliOverrides {
    pub env: Option<EnvKind>,
    pub algorithm: Option<Algorithm>,
    pub seed: Option<u64>,
}

fn leaf_keys(prefix: &str, table: &toml::Table, out: &mut BTreeSet<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) if !t.is_empty() => leaf_keys(&key, t, out),
            _ => {
                out.insert(key);
            }
        }
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl ResolvedConfig {
    /// Layers the file text (may be empty) and CLI overrides on the
    /// defaults for the chosen environment and scenario.
    pub fn resolve(text: &str, cli: &CliOverrides) -> Result<Self> {
        let mut user: toml::Table = toml::from_str(text)?;
        if let Some(env) = cli.env {
            user.insert("env".into(), toml::Value::try_from(env).map_err(ser_err)?);
        }
        if let Some(a) = cli.algorithm {
            user.insert("algorithm".into(), a.name().into());
        }
        if let Some(seed) = cli.seed {
            user.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        let env: EnvKind = match user.get("env") {
            Some(v) => v.clone().try_into()?,
            None => EnvKind::TwoStep,
        };
        let scenario = user
            .get("map")
            .and_then(|m| m.get("name"))
            .and_then(|n| n.as_str())
            .map(str::to_owned);
        let defaults = ExperimentConfig::defaults_for(env, scenario.as_deref())?;
        let mut table = toml::Table::try_from(&defaults).map_err(ser_err)?;
        merge(&mut table, &user);
        let config: ExperimentConfig = toml::Value::Table(table).try_into()?;
        config.validate()?;
        let mut overrides = BTreeSet::new();
        leaf_keys("", &user, &mut overrides);
        Ok(Self { config, overrides })
    }

    pub fn source(&self, key: &str) -> Source {
        if self.overrides.contains(key) || self.overrides.iter().any(|o| key.starts_with(&format!("{o}."))) {
            Source::Override
        } else if self.config.published(key) {
            Source::Paper
        } else {
            Source::Default
        }
    }

    /// Every effective value as `key = value  # source`, one per line.
    pub fn render(&self) -> Result<String> {
        let table = toml::Table::try_from(&self.config).map_err(ser_err)?;
        let mut keys = BTreeSet::new();
        leaf_keys("", &table, &mut keys);
        let mut out = String::new();
        for key in keys {
            let mut v = toml::Value::Table(table.clone());
            for part in key.split('.') {
                v = v.get(part).cloned().unwrap_or(toml::Value::String(String::new()));
            }
            out.push_str(&format!("{key} = {v}  # {}\n", self.source(&key)));
        }
        Ok(out)
    }
}

fn ser_err(e: toml::ser::Error) -> Error {
    Error::Contract(format!("config serialisation failed: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_defaults() {
        let r = ResolvedConfig::resolve("", &CliOverrides::default()).unwrap();
        let c = &r.config;
        assert_eq!(c.env, EnvKind::TwoStep);
        assert_eq!(c.train.buffer_size, 500);
        assert_eq!(c.train.target_update_episodes, 100);
        assert_eq!(c.network.mixer_embed, 8);
        assert_eq!(c.epsilon().value(5000), 1.0);
        assert_eq!(r.source("train.lr"), Source::Paper);
        assert_eq!(r.source("train.rms_eps"), Source::Default);
    }

    #[test]
    fn combat_defaults_and_overrides() {
        let text = "env = \"micro_combat\"\nalgorithm = \"vdn\"\n[train]\nlr = 0.001\n[map]\nname = \"8m\"\n";
        let cli = CliOverrides {
            seed: Some(7),
            ..Default::default()
        };
        let r = ResolvedConfig::resolve(text, &cli).unwrap();
        let c = &r.config;
        assert_eq!(c.algorithm, Algorithm::Vdn);
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.buffer_size, 5000);
        assert_eq!(c.map.allies.len(), 8);
        assert_eq!(c.map.episode_limit, 120);
        assert_eq!(r.source("train.lr"), Source::Override);
        assert_eq!(r.source("seed"), Source::Override);
        assert_eq!(r.source("train.target_update_episodes"), Source::Paper);
        let text = r.render().unwrap();
        assert!(text.contains("train.lr = 0.001  # override"));
        assert!(text.contains("train.buffer_size = 5000  # paper-default"));
    }

    #[test]
    fn invalid_fields_are_named() {
        let err = ResolvedConfig::resolve("[train]\ngamma = 1.5\n", &CliOverrides::default()).unwrap_err();
        assert!(err.to_string().contains("train.gamma"), "{err}");
        let err = ResolvedConfig::resolve("[train]\nbogus = 1\n", &CliOverrides::default()).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = ResolvedConfig::resolve("algorithm = \"heuristic\"\n", &CliOverrides::default()).unwrap_err();
        assert!(err.to_string().contains("algorithm"), "{err}");
    }

    #[test]
    fn effective_config_roundtrips() {
        let c = ExperimentConfig::micro_combat("2s_3z").unwrap();
        let text = toml::to_string(&c).unwrap();
        let back = ResolvedConfig::resolve(&text, &CliOverrides::default()).unwrap();
        assert_eq!(back.config, c);
    }
}

//! Experiment configuration files.
//!
//! One TOML file describes a run: scenario, variant, agent and trainer
//! hyperparameters, evaluation, ablation, grid and link settings. Unknown keys
//! are rejected with the line and column where they appear. Scalar fields can
//! be overridden with dotted `key=value` assignments, which take precedence
//! over the file, which takes precedence over built-in defaults.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::baselines::VariantSpec;
use crate::e2link::DuConfig;
use crate::error::{Error, Result};
use crate::sim::{Scenario, TrafficLevel, TrafficProfile};
use crate::trainer::TrainConfig;
use crate::types::{FrameConfig, QosTarget};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub level: TrafficLevel,
    /// Size of the generated slice table when `slices` is absent.
    pub num_slices: u32,
    pub num_ues: u32,
    pub packet_size_bytes: u32,
    pub churn_prob: f64,
    pub frame: FrameConfig,
    /// Explicit slice table; defaults derive from the traffic level.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slices: Option<Vec<QosTarget>>,
    /// Slice id of each UE, indexed by UE id; default is round-robin.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ue_slices: Option<Vec<u32>>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            level: TrafficLevel::Light,
            num_slices: 2,
            num_ues: 8,
            packet_size_bytes: 500,
            churn_prob: 0.0,
            frame: FrameConfig::default(),
            slices: None,
            ue_slices: None,
        }
    }
}

impl ScenarioConfig {
    pub fn standard(level: TrafficLevel, num_slices: u32, num_ues: u32) -> Self {
        ScenarioConfig {
            level,
            num_slices,
            num_ues,
            ..ScenarioConfig::default()
        }
    }

    pub fn build(&self) -> Result<Scenario> {
        let slices = match &self.slices {
            Some(s) => s.clone(),
            None => Scenario::default_targets(self.num_slices, self.level),
        };
        let traffic = TrafficProfile {
            level: self.level,
            packet_size_bytes: self.packet_size_bytes,
        };
        let mut scenario = Scenario::even(self.frame, slices, self.num_ues, traffic);
        if let Some(map) = &self.ue_slices {
            if map.len() != self.num_ues as usize {
                return Err(Error::config(format!(
                    "scenario.ue_slices lists {} UEs but scenario.num_ues is {}",
                    map.len(),
                    self.num_ues
                )));
            }
            scenario.ue_assignment = map.iter().enumerate().map(|(u, s)| (u as u32, *s)).collect();
        }
        scenario.churn_prob = self.churn_prob;
        scenario.validate()?;
        Ok(scenario)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: u64,
    pub steps: u64,
    /// Episode `e` runs the simulator with seed `seed_offset + e`.
    pub seed_offset: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 3,
            steps: 1000,
            seed_offset: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub variants: Vec<VariantSpec>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            variants: VariantSpec::ABLATION.to_vec(),
            seeds: (1..=5).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub levels: Vec<TrafficLevel>,
    pub slice_counts: Vec<u32>,
    pub num_ues: u32,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            levels: TrafficLevel::ALL.to_vec(),
            slice_counts: vec![2, 4, 8],
            num_ues: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkConfig {
    pub address: String,
    /// DU steps to serve before BYE.
    pub steps: u64,
    pub policy_timeout_ms: u64,
    pub grace_steps: u64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            address: "127.0.0.1:7447".into(),
            steps: 1000,
            policy_timeout_ms: 30_000,
            grace_steps: 10,
        }
    }
}

impl LinkConfig {
    pub fn du_config(&self, record: Option<PathBuf>) -> DuConfig {
        DuConfig {
            steps: self.steps,
            policy_timeout: Duration::from_millis(self.policy_timeout_ms),
            grace_steps: self.grace_steps,
            record,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub variant: VariantSpec,
    /// Records averaged for the "final" reward of a run.
    pub final_window: u64,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub scenario: ScenarioConfig,
    pub agent: AgentConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub grid: GridConfig,
    pub link: LinkConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            output_dir: PathBuf::from("runs/default"),
            variant: VariantSpec::Eexapp,
            final_window: 1000,
            checkpoint_every: 0,
            scenario: ScenarioConfig::default(),
            agent: AgentConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            grid: GridConfig::default(),
            link: LinkConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse TOML text. `origin` names the source in error messages.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| located(text, origin, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a file, apply `key=value` overrides, then validate.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml_with_overrides(&text, &path.display().to_string(), overrides)
    }

    pub fn from_toml_with_overrides(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Self::from_toml(text, origin);
        }
        // File mistakes are reported against the file, with their position.
        toml::from_str::<ExperimentConfig>(text).map_err(|e| located(text, origin, &e))?;
        let mut table: toml::Table = toml::from_str(text).map_err(|e| located(text, origin, &e))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let merged = toml::to_string(&table).map_err(|e| Error::config(e.to_string()))?;
        let cfg: ExperimentConfig = toml::from_str(&merged).map_err(|e| {
            Error::config(format!("{origin} (after overrides {}): {}", overrides.join(" "), e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults with overrides only.
    pub fn from_overrides(overrides: &[String]) -> Result<Self> {
        Self::from_toml_with_overrides("", "<defaults>", overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let scenario = self.scenario.build()?;
        self.agent.validate()?;
        self.train.validate()?;
        self.variant.validate(&scenario.frame)?;
        for v in &self.ablation.variants {
            v.validate(&scenario.frame)?;
        }
        if self.final_window == 0 {
            return Err(Error::config("final_window must be positive"));
        }
        if self.eval.episodes == 0 || self.eval.steps == 0 {
            return Err(Error::config("eval.episodes and eval.steps must be positive"));
        }
        if self.ablation.seeds.is_empty() || self.ablation.variants.is_empty() {
            return Err(Error::config("ablation needs at least one variant and one seed"));
        }
        if self.grid.levels.is_empty() || self.grid.slice_counts.contains(&0) || self.grid.slice_counts.is_empty() {
            return Err(Error::config("grid needs levels and positive slice counts"));
        }
        if self.grid.num_ues == 0 {
            return Err(Error::config("grid.num_ues must be positive"));
        }
        Ok(())
    }

    pub fn scenario(&self) -> Result<Scenario> {
        self.scenario.build()
    }

    /// The fully resolved configuration as TOML, for CSV headers.
    pub fn resolved(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("unserializable config: {e}"))
    }
}

fn located(text: &str, origin: &str, e: &toml::de::Error) -> Error {
    match e.span() {
        Some(span) => {
            let (line, col) = line_col(text, span.start);
            Error::config(format!("{origin}:{line}:{col}: {}", e.message()))
        }
        None => Error::config(format!("{origin}: {}", e.message())),
    }
}

/// 1-based line and column of a byte offset.
pub fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

/// `a.b.c=value`: the value is parsed as a TOML value when possible and kept
/// as a string otherwise.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override `{assignment}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{assignment}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg = ExperimentConfig::from_toml("", "t").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_key_reports_line_and_column() {
        let text = "seed = 3\n\n[train]\ngamma = 0.9\nbogus = 1\n";
        let err = ExperimentConfig::from_toml(text, "cfg.toml").unwrap_err().to_string();
        assert!(err.contains("cfg.toml:5:1"), "{err}");
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn nested_unknown_key_is_rejected() {
        let text = "[scenario.frame]\nmu = 1\nslots = 3\n";
        let err = ExperimentConfig::from_toml(text, "c").unwrap_err().to_string();
        assert!(err.contains("c:"), "{err}");
        assert!(err.contains("slots"), "{err}");
    }

    #[test]
    fn overrides_beat_file_values() {
        let text = "seed = 3\n[train]\ngae_lambda = 0.5\n";
        let cfg = ExperimentConfig::from_toml_with_overrides(
            text,
            "c",
            &["train.gae_lambda=0.0".into(), "variant=wo_gat".into(), "output_dir=out/x".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.gae_lambda, 0.0);
        assert_eq!(cfg.variant, VariantSpec::WoGat);
        assert_eq!(cfg.output_dir, PathBuf::from("out/x"));
    }

    #[test]
    fn cross_validation_catches_bad_assignment() {
        let text = "[scenario]\nnum_slices = 2\nnum_ues = 2\nue_slices = [0, 5]\n";
        assert!(matches!(ExperimentConfig::from_toml(text, "c"), Err(Error::Config(_))));
    }

    #[test]
    fn resolved_config_parses_back() {
        let mut cfg = ExperimentConfig::default();
        cfg.variant = VariantSpec::StaticFixedSleep(5);
        cfg.train.gae_lambda = 0.0;
        let again = ExperimentConfig::from_toml(&cfg.resolved(), "r").unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn line_col_counts_from_one() {
        assert_eq!(line_col("ab\ncd", 0), (1, 1));
        assert_eq!(line_col("ab\ncd", 4), (2, 2));
    }
}

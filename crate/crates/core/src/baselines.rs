//! Comparison and ablation policies: the full agent, its single-actor and
//! ablated variants, and non-learning controllers.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::agent::{ActorLayout, Agent, AgentConfig, CriticFusion, EncoderKind};
use crate::error::{Error, Result};
use crate::sim::Scenario;
use crate::trainer::Controller;
use crate::types::{enumerate_sleep_actions, FrameConfig, SleepAction, SliceAllocation, StateObservation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum VariantSpec {
    Eexapp,
    Sasc,
    WoTrans,
    WoGat,
    WoBoth,
    StaticAlwaysOn,
    /// Sleep for the first `b` slots of every frame.
    StaticFixedSleep(u32),
    /// Uniform sleep class, slice logits drawn from a standard normal.
    Random,
}

impl VariantSpec {
    /// The learned variants compared in an ablation run.
    pub const ABLATION: [VariantSpec; 5] = [
        VariantSpec::Eexapp,
        VariantSpec::Sasc,
        VariantSpec::WoTrans,
        VariantSpec::WoGat,
        VariantSpec::WoBoth,
    ];

    pub fn is_learned(self) -> bool {
        matches!(
            self,
            VariantSpec::Eexapp | VariantSpec::Sasc | VariantSpec::WoTrans | VariantSpec::WoGat | VariantSpec::WoBoth
        )
    }

    pub fn validate(self, frame: &FrameConfig) -> Result<()> {
        if let VariantSpec::StaticFixedSleep(b) = self {
            if b > frame.n_ts() {
                return Err(Error::config(format!(
                    "static_fixed_sleep({b}) exceeds the {} slots of a frame",
                    frame.n_ts()
                )));
            }
        }
        Ok(())
    }

    /// Agent configuration for a learned variant, derived from `base`.
    pub fn agent_config(self, base: &AgentConfig) -> Option<AgentConfig> {
        let mut cfg = base.clone();
        match self {
            VariantSpec::Eexapp => {}
            VariantSpec::Sasc => cfg.layout = ActorLayout::Single,
            VariantSpec::WoTrans => cfg.encoder = EncoderKind::MeanPool,
            VariantSpec::WoGat => cfg.fusion = CriticFusion::Identity,
            VariantSpec::WoBoth => {
                cfg.encoder = EncoderKind::MeanPool;
                cfg.fusion = CriticFusion::Identity;
            }
            _ => return None,
        }
        Some(cfg)
    }

    /// The static grid `b ∈ {0, n/4, n/2, 3n/4, n}`.
    pub fn static_grid(frame: &FrameConfig) -> Vec<VariantSpec> {
        let n = frame.n_ts();
        (0..=4).map(|k| VariantSpec::StaticFixedSleep(k * n / 4)).collect()
    }
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariantSpec::Eexapp => f.write_str("eexapp"),
            VariantSpec::Sasc => f.write_str("sasc"),
            VariantSpec::WoTrans => f.write_str("wo_trans"),
            VariantSpec::WoGat => f.write_str("wo_gat"),
            VariantSpec::WoBoth => f.write_str("wo_both"),
            VariantSpec::StaticAlwaysOn => f.write_str("static_always_on"),
            VariantSpec::StaticFixedSleep(b) => write!(f, "static_fixed_sleep({b})"),
            VariantSpec::Random => f.write_str("random"),
        }
    }
}

impl FromStr for VariantSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "eexapp" => VariantSpec::Eexapp,
            "sasc" => VariantSpec::Sasc,
            "wo_trans" => VariantSpec::WoTrans,
            "wo_gat" => VariantSpec::WoGat,
            "wo_both" => VariantSpec::WoBoth,
            "static_always_on" => VariantSpec::StaticAlwaysOn,
            "random" => VariantSpec::Random,
            _ => {
                let b = s
                    .strip_prefix("static_fixed_sleep(")
                    .and_then(|r| r.strip_suffix(')'))
                    .or_else(|| s.strip_prefix("static_fixed_sleep:"))
                    .ok_or_else(|| Error::config(format!("unknown variant `{s}`")))?;
                let b = b
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("bad sleep length in `{s}`")))?;
                VariantSpec::StaticFixedSleep(b)
            }
        })
    }
}

impl TryFrom<String> for VariantSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<VariantSpec> for String {
    fn from(v: VariantSpec) -> String {
        v.to_string()
    }
}

/// Fixed action every step with equal slice shares.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticPolicy {
    pub action: SleepAction,
    pub allocation: SliceAllocation,
}

impl StaticPolicy {
    pub fn always_on(frame: &FrameConfig, slices: usize) -> Self {
        StaticPolicy {
            action: SleepAction::always_on(frame),
            allocation: SliceAllocation::uniform(slices),
        }
    }

    pub fn fixed_sleep(frame: &FrameConfig, slices: usize, b: u32) -> Result<Self> {
        Ok(StaticPolicy {
            action: SleepAction::new(0, b, frame.n_ts().saturating_sub(b), frame)?,
            allocation: SliceAllocation::uniform(slices),
        })
    }
}

impl Controller for StaticPolicy {
    fn decide(&mut self, _: &StateObservation) -> Result<(SleepAction, SliceAllocation)> {
        Ok((self.action, self.allocation.clone()))
    }
}

#[derive(Clone, Debug)]
pub struct RandomPolicy {
    actions: Vec<SleepAction>,
    slices: usize,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(frame: &FrameConfig, slices: usize, seed: u64) -> Self {
        RandomPolicy {
            actions: enumerate_sleep_actions(frame),
            slices,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Controller for RandomPolicy {
    fn decide(&mut self, _: &StateObservation) -> Result<(SleepAction, SliceAllocation)> {
        let act = self.actions[self.rng.random_range(0..self.actions.len())];
        let logits: Vec<f64> = (0..self.slices).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        Ok((act, SliceAllocation::from_logits(&logits)))
    }
}

/// A variant ready to run: a trainable agent or a fixed controller.
pub enum Built {
    Learner(Agent),
    Fixed(Box<dyn Controller>),
}

impl fmt::Debug for Built {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Built::Learner(a) => write!(f, "Learner({})", a.tag()),
            Built::Fixed(_) => f.write_str("Fixed"),
        }
    }
}

/// Wire a variant for a scenario. Learned variants are initialized from `seed`;
/// the random policy draws its actions from it.
pub fn build_variant(spec: VariantSpec, base: &AgentConfig, scenario: &Scenario, seed: u64) -> Result<Built> {
    scenario.validate()?;
    spec.validate(&scenario.frame)?;
    let slices = scenario.slices.len();
    if let Some(cfg) = spec.agent_config(base) {
        let tag = spec.to_string();
        return Ok(Built::Learner(Agent::new(cfg, &tag, scenario.frame, scenario.slices.clone(), seed)?));
    }
    let fixed: Box<dyn Controller> = match spec {
        VariantSpec::StaticAlwaysOn => Box::new(StaticPolicy::always_on(&scenario.frame, slices)),
        VariantSpec::StaticFixedSleep(b) => Box::new(StaticPolicy::fixed_sleep(&scenario.frame, slices, b)?),
        VariantSpec::Random => Box::new(RandomPolicy::new(&scenario.frame, slices, seed)),
        _ => unreachable!("learned variants handled above"),
    };
    Ok(Built::Fixed(fixed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Simulator, TrafficLevel};
    use crate::trainer::{compute_gae, rollout, Stream, TrainConfig, Transition};
    use crate::agent::CriticPair;
    use crate::nn::Tensor;

    #[test]
    fn names_round_trip() {
        for v in [
            VariantSpec::Eexapp,
            VariantSpec::Sasc,
            VariantSpec::WoTrans,
            VariantSpec::WoGat,
            VariantSpec::WoBoth,
            VariantSpec::StaticAlwaysOn,
            VariantSpec::StaticFixedSleep(15),
            VariantSpec::Random,
        ] {
            assert_eq!(v.to_string().parse::<VariantSpec>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(serde_json::from_str::<VariantSpec>(&json).unwrap(), v);
        }
        assert_eq!("static_fixed_sleep:5".parse::<VariantSpec>().unwrap(), VariantSpec::StaticFixedSleep(5));
        assert!(matches!("kairos".parse::<VariantSpec>(), Err(Error::Config(_))));
    }

    #[test]
    fn fixed_sleep_bounded_by_frame() {
        let sc = Scenario::standard(2, 4, TrafficLevel::Light);
        assert!(build_variant(VariantSpec::StaticFixedSleep(21), &AgentConfig::default(), &sc, 0).is_err());
        assert!(build_variant(VariantSpec::StaticFixedSleep(20), &AgentConfig::default(), &sc, 0).is_ok());
        assert_eq!(
            VariantSpec::static_grid(&sc.frame),
            [0, 5, 10, 15, 20].map(VariantSpec::StaticFixedSleep).to_vec()
        );
    }

    #[test]
    fn always_on_never_sleeps() {
        let sc = Scenario::standard(2, 8, TrafficLevel::Medium);
        let Built::Fixed(mut c) = build_variant(VariantSpec::StaticAlwaysOn, &AgentConfig::default(), &sc, 0).unwrap()
        else {
            panic!("static variant built a learner")
        };
        let mut sim = Simulator::new(sc, 1).unwrap();
        for _ in 0..50 {
            let obs = sim.observe();
            let (a, beta) = c.decide(&obs).unwrap();
            assert_eq!(a.b, 0);
            assert_eq!(beta.fractions(), &[0.5, 0.5]);
            assert_eq!(sim.step(&a, &beta).unwrap().sleep_ratio, 0.0);
        }
    }

    #[test]
    fn without_gat_fused_values_are_raw() {
        let sc = Scenario::standard(2, 4, TrafficLevel::Light);
        let Built::Learner(agent) = build_variant(VariantSpec::WoGat, &AgentConfig::default(), &sc, 3).unwrap() else {
            panic!()
        };
        let mut sim = Simulator::new(sc, 3).unwrap();
        let rows = agent.featurize(&sim.observe()).unwrap();
        let c = agent.evaluate(&rows).unwrap();
        assert_eq!((c.v_alpha_agg, c.v_beta_agg), (c.v_alpha, c.v_beta));
    }

    #[test]
    fn single_critic_sees_total_reward() {
        let critics = CriticPair {
            v_alpha: 0.0,
            v_beta: 0.0,
            v_alpha_agg: 0.1,
            v_beta_agg: 0.0,
            attention: [[1.0, 0.0], [0.0, 1.0]],
        };
        let traj: Vec<Transition> = [(0.3, -0.2), (0.5, -1.0), (0.0, 0.0)]
            .iter()
            .map(|&(ra, rb)| Transition {
                rows: Tensor::zeros(0, 1),
                sleep_class: 0,
                beta_raw: vec![0.0],
                sleep_log_prob: 0.0,
                beta_log_prob: 0.0,
                r_alpha: ra,
                r_beta: rb,
                critics: critics.clone(),
                done: false,
            })
            .collect();
        let cfg = TrainConfig::default();
        let (total, _) = compute_gae(&traj, Stream::Total, 0.1, &cfg).unwrap();
        let summed: Vec<Transition> = traj
            .iter()
            .map(|t| Transition {
                r_alpha: t.r_alpha + t.r_beta,
                r_beta: 0.0,
                ..t.clone()
            })
            .collect();
        let (alpha, _) = compute_gae(&summed, Stream::Alpha, 0.1, &cfg).unwrap();
        assert_eq!(total, alpha);
    }

    #[test]
    fn random_policy_is_seeded() {
        let sc = Scenario::standard(2, 8, TrafficLevel::Light);
        let run = |seed| {
            let mut sim = Simulator::new(sc.clone(), 1).unwrap();
            let mut c = RandomPolicy::new(&sc.frame, 2, seed);
            rollout(&mut sim, &mut c, 30, 0.5, 0.5).unwrap()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }

    #[test]
    fn variants_refuse_each_others_checkpoints() {
        let sc = Scenario::standard(2, 4, TrafficLevel::Light);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eexapp.ckpt");
        let learner = |v| match build_variant(v, &AgentConfig::default(), &sc, 1).unwrap() {
            Built::Learner(a) => a,
            Built::Fixed(_) => unreachable!(),
        };
        learner(VariantSpec::Eexapp).save(&path).unwrap();
        for v in [VariantSpec::Sasc, VariantSpec::WoTrans, VariantSpec::WoGat, VariantSpec::WoBoth] {
            assert!(matches!(learner(v).load(&path), Err(Error::Checkpoint(_))), "{v}");
        }
        learner(VariantSpec::Eexapp).load(&path).unwrap();
    }
}

//! Domain vocabulary: frame arithmetic, the hybrid sleep/slicing action,
//! per-UE observations and the decomposed reward.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of per-UE KPI features reported by the RAN.
pub const NUM_FEATURES: usize = 17;

/// Feature names, in the fixed order used by [`UeObservation::features`].
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "pdcp_sdu_ul",
    "pdcp_sdu_dl",
    "rlc_delay_dl",
    "thr_ul",
    "thr_dl",
    "prb_ul",
    "prb_dl",
    "tbs_dl",
    "rb_dl",
    "pusch_snr",
    "pucch_snr",
    "cqi",
    "mcs_ul",
    "mcs_dl",
    "phr",
    "bler_ul",
    "bler_dl",
];

/// Indices into the feature vector for the fields with range invariants.
pub mod feature {
    pub const RLC_DELAY_DL: usize = 2;
    pub const THR_UL: usize = 3;
    pub const THR_DL: usize = 4;
    pub const PRB_UL: usize = 5;
    pub const PRB_DL: usize = 6;
    pub const CQI: usize = 11;
    pub const BLER_UL: usize = 15;
    pub const BLER_DL: usize = 16;
}

/// Frame structure and decision granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FrameConfigRepr", into = "FrameConfigRepr")]
pub struct FrameConfig {
    mu: u8,
    prb_total: u32,
    frames_per_step: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameConfigRepr {
    #[serde(default = "default_mu")]
    mu: u8,
    #[serde(default = "default_prb_total")]
    prb_total: u32,
    #[serde(default = "default_frames_per_step")]
    frames_per_step: u32,
}

fn default_mu() -> u8 {
    1
}
fn default_prb_total() -> u32 {
    51
}
fn default_frames_per_step() -> u32 {
    10
}

impl TryFrom<FrameConfigRepr> for FrameConfig {
    type Error = Error;
    fn try_from(r: FrameConfigRepr) -> Result<Self> {
        FrameConfig::new(r.mu, r.prb_total, r.frames_per_step)
    }
}

impl From<FrameConfig> for FrameConfigRepr {
    fn from(c: FrameConfig) -> Self {
        FrameConfigRepr {
            mu: c.mu,
            prb_total: c.prb_total,
            frames_per_step: c.frames_per_step,
        }
    }
}

impl Default for FrameConfig {
    /// 30 kHz numerology (20 slots), 51 PRBs, 10 frames (100 ms) per decision.
    fn default() -> Self {
        FrameConfig {
            mu: 1,
            prb_total: 51,
            frames_per_step: 10,
        }
    }
}

impl FrameConfig {
    pub fn new(mu: u8, prb_total: u32, frames_per_step: u32) -> Result<Self> {
        if mu > 4 {
            return Err(Error::config(format!("numerology mu={mu} outside 0..=4")));
        }
        if prb_total == 0 {
            return Err(Error::config("prb_total must be at least 1"));
        }
        if frames_per_step == 0 {
            return Err(Error::config("frames_per_step must be at least 1"));
        }
        Ok(FrameConfig {
            mu,
            prb_total,
            frames_per_step,
        })
    }

    pub fn mu(&self) -> u8 {
        self.mu
    }

    /// Slots per 10 ms frame, `2^mu × 10`.
    pub fn n_ts(&self) -> u32 {
        10 << self.mu
    }

    pub fn prb_total(&self) -> u32 {
        self.prb_total
    }

    pub fn frames_per_step(&self) -> u32 {
        self.frames_per_step
    }

    pub fn slot_duration_s(&self) -> f64 {
        0.010 / self.n_ts() as f64
    }

    /// Wall-clock span of one decision timestep.
    pub fn step_duration_s(&self) -> f64 {
        0.010 * self.frames_per_step as f64
    }
}

/// Per-frame sleep pattern: `a` active slots, `b` sleeping, `c` active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SleepAction {
    pub a: u32,
    pub b: u32,
    pub c: u32,
}

impl SleepAction {
    pub fn new(a: u32, b: u32, c: u32, cfg: &FrameConfig) -> Result<Self> {
        let act = SleepAction { a, b, c };
        act.validate(cfg)?;
        Ok(act)
    }

    /// Always-on pattern: no sleeping slots.
    pub fn always_on(cfg: &FrameConfig) -> Self {
        SleepAction {
            a: 0,
            b: 0,
            c: cfg.n_ts(),
        }
    }

    pub fn validate(&self, cfg: &FrameConfig) -> Result<()> {
        if self.a + self.b + self.c != cfg.n_ts() {
            return Err(Error::argument(format!(
                "sleep action ({}, {}, {}) does not sum to n_ts={}",
                self.a,
                self.b,
                self.c,
                cfg.n_ts()
            )));
        }
        Ok(())
    }

    pub fn is_active_slot(&self, slot: u32) -> bool {
        slot < self.a || slot >= self.a + self.b
    }

    pub fn sleep_ratio(&self, cfg: &FrameConfig) -> f64 {
        self.b as f64 / cfg.n_ts() as f64
    }
}

/// Every admissible sleep pattern, ordered by `(b, a)`. The position of an
/// action in this list is its categorical class id.
pub fn enumerate_sleep_actions(cfg: &FrameConfig) -> Vec<SleepAction> {
    enumerate_sleep_patterns(cfg.n_ts())
}

/// [`enumerate_sleep_actions`] for an arbitrary slot count.
pub fn enumerate_sleep_patterns(n: u32) -> Vec<SleepAction> {
    let mut out = Vec::with_capacity((n as usize + 1) * (n as usize + 2) / 2);
    for b in 0..=n {
        for a in 0..=(n - b) {
            out.push(SleepAction { a, b, c: n - a - b });
        }
    }
    out
}

/// `C(n_ts + 2, 2)`.
pub fn num_sleep_actions(cfg: &FrameConfig) -> usize {
    let n = cfg.n_ts() as usize;
    (n + 1) * (n + 2) / 2
}

/// Class id of `act` in [`enumerate_sleep_actions`] order.
pub fn sleep_action_class(act: &SleepAction, cfg: &FrameConfig) -> Result<usize> {
    act.validate(cfg)?;
    let n = cfg.n_ts() as usize;
    let b = act.b as usize;
    // Classes with sleep count < b: Σ_{j<b} (n - j + 1).
    let before = b * (n + 1) - b * (b.saturating_sub(1)) / 2;
    Ok(before + act.a as usize)
}

/// Fraction of PRBs assigned to each slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SliceAllocation {
    beta: Vec<f64>,
}

impl SliceAllocation {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn new(beta: Vec<f64>) -> Result<Self> {
        let alloc = SliceAllocation { beta };
        alloc.validate()?;
        Ok(alloc)
    }

    pub fn uniform(slices: usize) -> Self {
        SliceAllocation {
            beta: vec![1.0 / slices as f64; slices],
        }
    }

    /// Softmax projection of unconstrained scores onto the simplex.
    pub fn from_logits(logits: &[f64]) -> Self {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        SliceAllocation {
            beta: e.into_iter().map(|v| v / s).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.is_empty() {
            return Err(Error::argument("slice allocation over zero slices"));
        }
        if let Some(b) = self.beta.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::argument(format!("slice fraction {b} outside [0, 1]")));
        }
        let s: f64 = self.beta.iter().sum();
        if (s - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::argument(format!("slice fractions sum to {s}, not 1")));
        }
        Ok(())
    }

    pub fn fractions(&self) -> &[f64] {
        &self.beta
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }
}

/// Throughput and delay demand of one slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QosTarget {
    pub slice_id: u32,
    pub q_target_mbps: f64,
    pub d_target_ms: f64,
}

impl QosTarget {
    pub fn new(slice_id: u32, q_target_mbps: f64, d_target_ms: f64) -> Result<Self> {
        let t = QosTarget {
            slice_id,
            q_target_mbps,
            d_target_ms,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q_target_mbps > 0.0 && self.q_target_mbps.is_finite()) {
            return Err(Error::config(format!(
                "slice {}: throughput target must be positive",
                self.slice_id
            )));
        }
        if !(self.d_target_ms > 0.0 && self.d_target_ms.is_finite()) {
            return Err(Error::config(format!(
                "slice {}: delay target must be positive",
                self.slice_id
            )));
        }
        Ok(())
    }
}

/// One UE's KPI report for a timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UeObservation {
    pub ue_id: u32,
    pub slice_id: u32,
    pub features: [f64; NUM_FEATURES],
    /// Achieved downlink throughput over the step, Mbps.
    pub throughput_mbps: f64,
    /// Measured packet delay, ms.
    pub delay_ms: f64,
    /// No traffic arrived, none was served and nothing is queued.
    #[serde(default)]
    pub idle: bool,
}

/// The set of attached UEs observed at one timestep.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateObservation {
    pub step_index: u64,
    pub ues: Vec<UeObservation>,
}

impl StateObservation {
    pub fn num_ues(&self) -> usize {
        self.ues.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for ue in &self.ues {
            if !seen.insert(ue.ue_id) {
                return Err(Error::argument(format!("duplicate ue_id {}", ue.ue_id)));
            }
        }
        Ok(())
    }
}

/// Reward at one timestep, split into the energy and QoS components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_total: f64,
    pub r_alpha: f64,
    pub r_beta: f64,
    pub per_ue_throughput_penalty: BTreeMap<u32, f64>,
    pub per_ue_delay_penalty: BTreeMap<u32, f64>,
    pub lambda_q: f64,
    pub lambda_d: f64,
}

impl RewardBreakdown {
    /// Number of UEs with a positive throughput or delay penalty.
    pub fn violations(&self) -> usize {
        self.per_ue_throughput_penalty
            .iter()
            .filter(|(id, &p)| p > 0.0 || self.per_ue_delay_penalty.get(id).copied().unwrap_or(0.0) > 0.0)
            .count()
    }

    pub fn num_ues(&self) -> usize {
        self.per_ue_throughput_penalty.len()
    }
}

/// Lookup of slice targets by id.
pub fn target_for(targets: &[QosTarget], slice_id: u32) -> Result<&QosTarget> {
    targets
        .iter()
        .find(|t| t.slice_id == slice_id)
        .ok_or_else(|| Error::config(format!("no QoS target for slice {slice_id}")))
}

/// Sleep ratio minus Lagrangian QoS penalties, with delays clipped at `2·D_i`.
///
/// Penalties are summed in ascending `ue_id` order so the result does not
/// depend on the order of `obs.ues`.
pub fn compute_reward(
    obs: &StateObservation,
    act: &SleepAction,
    targets: &[QosTarget],
    lambda_q: f64,
    lambda_d: f64,
    cfg: &FrameConfig,
) -> Result<RewardBreakdown> {
    if !(lambda_q >= 0.0 && lambda_d >= 0.0) {
        return Err(Error::config("Lagrange multipliers must be non-negative"));
    }
    act.validate(cfg)?;
    let mut thr = BTreeMap::new();
    let mut delay = BTreeMap::new();
    for ue in &obs.ues {
        let target = target_for(targets, ue.slice_id)?;
        let q_pen = if ue.idle {
            0.0
        } else {
            (1.0 - ue.throughput_mbps.max(0.0) / target.q_target_mbps).max(0.0)
        };
        let clipped = ue.delay_ms.max(0.0).min(2.0 * target.d_target_ms);
        let d_pen = (clipped / target.d_target_ms - 1.0).max(0.0);
        if thr.insert(ue.ue_id, q_pen).is_some() {
            return Err(Error::argument(format!("duplicate ue_id {}", ue.ue_id)));
        }
        delay.insert(ue.ue_id, d_pen);
    }
    let r_alpha = act.sleep_ratio(cfg);
    let r_beta = 0.0 - (lambda_q * thr.values().sum::<f64>() + lambda_d * delay.values().sum::<f64>());
    Ok(RewardBreakdown {
        r_total: r_alpha + r_beta,
        r_alpha,
        r_beta,
        per_ue_throughput_penalty: thr,
        per_ue_delay_penalty: delay,
        lambda_q,
        lambda_d,
    })
}

/// Empirical mean of `r_total`: the finite-horizon estimate of the relaxed objective.
pub fn lagrangian_objective(trajectory: &[RewardBreakdown]) -> Result<f64> {
    if trajectory.is_empty() {
        return Err(Error::argument("objective of an empty trajectory"));
    }
    Ok(trajectory.iter().map(|r| r.r_total).sum::<f64>() / trajectory.len() as f64)
}

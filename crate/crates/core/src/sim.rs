//! Slot-level simulator of one cell.
//!
//! Per-UE Poisson packet arrivals feed infinite FIFO queues. Every decision
//! step spans `frames_per_step` frames; within each frame the sleep pattern
//! masks slots `[a, a + b)`, and each active slot splits `prb_total` PRBs
//! across slices (largest-remainder rounding of the slice fractions). Inside a
//! slice, PRBs go one at a time round-robin to backlogged UEs, starting from a
//! UE picked by the slot index, and no UE takes more PRBs than it needs to
//! empty its queue. A PRB carries
//! `12 × 14 × efficiency(cqi)` bits, where efficiency rises linearly from 0 at
//! CQI 0 to 5.55 bits/symbol at CQI 15. CQI follows a clamped ±1 random walk
//! once per frame.
//!
//! Four independent ChaCha streams drive traffic, channel, feature noise and
//! churn, so actions never perturb the traffic trace.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    FrameConfig, QosTarget, SleepAction, SliceAllocation, StateObservation, UeObservation,
    FEATURE_NAMES, NUM_FEATURES,
};

/// Peak spectral efficiency at CQI 15, bits per resource element.
pub const MAX_EFFICIENCY: f64 = 5.55;
const SUBCARRIERS_PER_PRB: f64 = 12.0;
const SYMBOLS_PER_SLOT: f64 = 14.0;
const CQI_MIN: u8 = 3;
const CQI_MAX: u8 = 15;
const CQI_STEP_PROB: f64 = 0.1;

const STREAM_TRAFFIC: u64 = 1;
const STREAM_CHANNEL: u64 = 2;
const STREAM_FEATURES: u64 = 3;
const STREAM_CHURN: u64 = 4;

/// Spectral efficiency (bits/symbol) for a CQI index, linear from 0 to 5.55.
pub fn efficiency(cqi: u8) -> f64 {
    MAX_EFFICIENCY * f64::from(cqi.min(15)) / 15.0
}

/// Whole bits carried by one PRB in one slot.
pub fn bits_per_prb(cqi: u8) -> u64 {
    (SUBCARRIERS_PER_PRB * SYMBOLS_PER_SLOT * efficiency(cqi)).floor() as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficLevel {
    Light,
    Medium,
    Heavy,
}

impl TrafficLevel {
    pub const ALL: [TrafficLevel; 3] = [TrafficLevel::Light, TrafficLevel::Medium, TrafficLevel::Heavy];

    /// Per-UE offered-rate range, Mbps.
    pub fn rate_range_mbps(self) -> (f64, f64) {
        match self {
            TrafficLevel::Light => (0.1, 1.0),
            TrafficLevel::Medium => (1.0, 5.0),
            TrafficLevel::Heavy => (5.0, 10.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrafficLevel::Light => "light",
            TrafficLevel::Medium => "medium",
            TrafficLevel::Heavy => "heavy",
        }
    }
}

impl std::str::FromStr for TrafficLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "light" => Ok(TrafficLevel::Light),
            "medium" => Ok(TrafficLevel::Medium),
            "heavy" => Ok(TrafficLevel::Heavy),
            other => Err(Error::config(format!("unknown traffic level `{other}`"))),
        }
    }
}

/// Poisson packet traffic whose per-UE mean rate is drawn uniformly from the
/// level's range at episode start.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficProfile {
    pub level: TrafficLevel,
    #[serde(default = "default_packet_size")]
    pub packet_size_bytes: u32,
}

fn default_packet_size() -> u32 {
    500
}

impl TrafficProfile {
    pub fn new(level: TrafficLevel) -> Self {
        TrafficProfile {
            level,
            packet_size_bytes: default_packet_size(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Packet {
    arrival_s: f64,
    remaining_bits: u64,
}

/// Per-UE counters for one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UeStepStats {
    pub ue_id: u32,
    pub slice_id: u32,
    pub attached: bool,
    pub throughput_mbps: f64,
    pub delay_ms: f64,
    pub arrived_bits: u64,
    pub served_bits: u64,
    pub queued_bits_before: u64,
    pub queued_bits_after: u64,
    pub prbs: u64,
    pub granted_slots: u64,
    pub completed_packets: u64,
}

impl UeStepStats {
    pub fn idle(&self) -> bool {
        self.arrived_bits == 0 && self.served_bits == 0 && self.queued_bits_after == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct UeLink {
    ue_id: u32,
    slice_id: u32,
    rate_mbps: f64,
    cqi: u8,
    queue: VecDeque<Packet>,
    queued_bits: u64,
    next_arrival_s: f64,
    attached: bool,
    last: UeStepStats,
}

/// Result of advancing the cell by one decision step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// KPIs of the attached UEs after the step.
    pub observation: StateObservation,
    /// Counters for every configured UE, attached or not, by ascending id.
    pub ues: Vec<UeStepStats>,
    pub sleep_ratio: f64,
    pub action: SleepAction,
    pub allocation: SliceAllocation,
}

/// Everything needed to build a [`Simulator`]: frame, slices, UEs, traffic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub frame: FrameConfig,
    pub slices: Vec<QosTarget>,
    /// `ue_id -> slice_id`.
    pub ue_assignment: BTreeMap<u32, u32>,
    pub traffic: TrafficProfile,
    /// Per-step detach/reattach probability; 0 disables churn.
    pub churn_prob: f64,
}

impl Scenario {
    /// `num_ues` UEs spread round-robin over `slices.len()` slices.
    pub fn even(frame: FrameConfig, slices: Vec<QosTarget>, num_ues: u32, traffic: TrafficProfile) -> Self {
        let ids: Vec<u32> = slices.iter().map(|s| s.slice_id).collect();
        let ue_assignment = if ids.is_empty() {
            BTreeMap::new()
        } else {
            (0..num_ues).map(|u| (u, ids[u as usize % ids.len()])).collect()
        };
        Scenario {
            frame,
            slices,
            ue_assignment,
            traffic,
            churn_prob: 0.0,
        }
    }

    /// Default per-slice targets for a load level: throughput demand at half the
    /// level's lowest per-UE rate, delay budgets 10, 15, 20, … ms.
    pub fn default_targets(num_slices: u32, level: TrafficLevel) -> Vec<QosTarget> {
        let (lo, _) = level.rate_range_mbps();
        (0..num_slices)
            .map(|i| QosTarget {
                slice_id: i,
                q_target_mbps: 0.5 * lo,
                d_target_ms: 10.0 + 5.0 * f64::from(i),
            })
            .collect()
    }

    /// The evenly-split scenario with default targets.
    pub fn standard(num_slices: u32, num_ues: u32, level: TrafficLevel) -> Self {
        Scenario::even(
            FrameConfig::default(),
            Scenario::default_targets(num_slices, level),
            num_ues,
            TrafficProfile::new(level),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.slices.is_empty() {
            return Err(Error::config("scenario needs at least one slice"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.slices {
            s.validate()?;
            if !seen.insert(s.slice_id) {
                return Err(Error::config(format!("duplicate slice id {}", s.slice_id)));
            }
        }
        for (ue, slice) in &self.ue_assignment {
            if !seen.contains(slice) {
                return Err(Error::config(format!("ue {ue} mapped to unknown slice {slice}")));
            }
        }
        if self.traffic.packet_size_bytes == 0 {
            return Err(Error::config("packet_size_bytes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.churn_prob) {
            return Err(Error::config("churn_prob must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Simulator {
    scenario: Scenario,
    seed: u64,
    ues: Vec<UeLink>,
    /// Member UE indices for each slice, in slice-table order.
    slice_members: Vec<Vec<usize>>,
    step_index: u64,
    slot_counter: u64,
    traffic_rng: ChaCha8Rng,
    channel_rng: ChaCha8Rng,
    feature_rng: ChaCha8Rng,
    churn_rng: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Largest-remainder apportionment of `total` units by `shares`; ties go to
/// the lower index.
pub fn apportion(shares: &[f64], total: u32) -> Vec<u32> {
    let exact: Vec<f64> = shares.iter().map(|b| b * f64::from(total)).collect();
    let mut out: Vec<u32> = exact.iter().map(|e| e.floor() as u32).collect();
    let assigned: u32 = out.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&i, &j| {
        let (ri, rj) = (exact[i] - exact[i].floor(), exact[j] - exact[j].floor());
        rj.partial_cmp(&ri).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j))
    });
    let mut left = total.saturating_sub(assigned);
    for &i in order.iter().cycle().take(shares.len() * 2) {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

impl Simulator {
    /// Build a simulator with empty queues. Per-UE mean rates and initial
    /// CQIs are drawn from `seed`.
    pub fn new(scenario: Scenario, seed: u64) -> Result<Self> {
        scenario.validate()?;
        let mut traffic_rng = stream(seed, STREAM_TRAFFIC);
        let mut channel_rng = stream(seed, STREAM_CHANNEL);
        let (lo, hi) = scenario.traffic.level.rate_range_mbps();
        let bits = 8.0 * f64::from(scenario.traffic.packet_size_bytes);
        let mut ues = Vec::with_capacity(scenario.ue_assignment.len());
        for (&ue_id, &slice_id) in &scenario.ue_assignment {
            let rate_mbps = traffic_rng.random_range(lo..=hi);
            let first = Exp::new(rate_mbps * 1e6 / bits)
                .expect("positive rate")
                .sample(&mut traffic_rng);
            ues.push(UeLink {
                ue_id,
                slice_id,
                rate_mbps,
                cqi: channel_rng.random_range(7..=13),
                queue: VecDeque::new(),
                queued_bits: 0,
                next_arrival_s: first,
                attached: true,
                last: UeStepStats {
                    ue_id,
                    slice_id,
                    attached: true,
                    ..Default::default()
                },
            });
        }
        let slice_members = scenario
            .slices
            .iter()
            .map(|s| {
                ues.iter()
                    .enumerate()
                    .filter(|(_, u)| u.slice_id == s.slice_id)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        Ok(Simulator {
            slice_members,
            ues,
            seed,
            step_index: 0,
            slot_counter: 0,
            traffic_rng,
            channel_rng,
            feature_rng: stream(seed, STREAM_FEATURES),
            churn_rng: stream(seed, STREAM_CHURN),
            scenario,
        })
    }

    /// Convenience constructor mirroring the scenario fields.
    pub fn create(
        cfg: FrameConfig,
        slices: Vec<QosTarget>,
        ue_assignment: BTreeMap<u32, u32>,
        traffic: TrafficProfile,
        seed: u64,
    ) -> Result<Self> {
        Simulator::new(
            Scenario {
                frame: cfg,
                slices,
                ue_assignment,
                traffic,
                churn_prob: 0.0,
            },
            seed,
        )
    }

    /// Restore the initial state under a new seed; configuration is kept.
    pub fn reset(&mut self, seed: u64) {
        *self = Simulator::new(self.scenario.clone(), seed).expect("scenario already validated");
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn frame(&self) -> &FrameConfig {
        &self.scenario.frame
    }

    pub fn slices(&self) -> &[QosTarget] {
        &self.scenario.slices
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    /// Offered mean rate per UE, Mbps.
    pub fn offered_rates(&self) -> Vec<(u32, f64)> {
        self.ues.iter().map(|u| (u.ue_id, u.rate_mbps)).collect()
    }

    /// KPIs from the most recent step for every attached UE.
    pub fn observe(&mut self) -> StateObservation {
        let mut ues = Vec::with_capacity(self.ues.len());
        for i in 0..self.ues.len() {
            if self.ues[i].attached {
                let obs = self.ue_observation(i);
                ues.push(obs);
            }
        }
        StateObservation {
            step_index: self.step_index,
            ues,
        }
    }

    fn ue_observation(&mut self, i: usize) -> UeObservation {
        let rng = &mut self.feature_rng;
        let mut n = || -> f64 { StandardNormal.sample(rng) };
        let u = &self.ues[i];
        let s = &u.last;
        let cqi = f64::from(u.cqi);
        let arrived_kb = s.arrived_bits as f64 / 8000.0;
        let served_bytes = s.served_bits as f64 / 8.0;
        let (tbs, rb) = if s.granted_slots > 0 {
            (served_bytes / s.granted_slots as f64, s.prbs as f64 / s.granted_slots as f64)
        } else {
            (0.0, 0.0)
        };
        let mcs_dl = (cqi * 28.0 / 15.0).round().min(28.0);
        let pusch = 2.0 * cqi - 4.0 + n();
        let bler_dl = (0.1 * (-(cqi - 3.0) / 3.0).exp() + 0.01 * n().abs()).clamp(0.0, 1.0);
        let features = [
            (0.05 * arrived_kb * (1.0 + 0.1 * n())).max(0.0),
            arrived_kb,
            s.delay_ms,
            (0.05 * s.throughput_mbps * (1.0 + 0.1 * n())).max(0.0),
            s.throughput_mbps,
            (0.1 * s.prbs as f64).round(),
            s.prbs as f64,
            tbs,
            rb,
            pusch,
            pusch + 1.5 + 0.5 * n(),
            cqi,
            (mcs_dl - 2.0).max(0.0),
            mcs_dl,
            20.0 - cqi + n(),
            (1.2 * bler_dl).clamp(0.0, 1.0),
            bler_dl,
        ];
        debug_assert_eq!(features.len(), NUM_FEATURES);
        UeObservation {
            ue_id: u.ue_id,
            slice_id: u.slice_id,
            features,
            throughput_mbps: s.throughput_mbps,
            delay_ms: s.delay_ms,
            idle: s.idle(),
        }
    }

    /// Advance one decision step under the given sleep pattern and slice shares.
    pub fn step(&mut self, act: &SleepAction, alloc: &SliceAllocation) -> Result<StepOutcome> {
        let cfg = self.scenario.frame;
        act.validate(&cfg)?;
        alloc.validate()?;
        if alloc.len() != self.scenario.slices.len() {
            return Err(Error::argument(format!(
                "allocation has {} fractions for {} slices",
                alloc.len(),
                self.scenario.slices.len()
            )));
        }

        if self.scenario.churn_prob > 0.0 {
            for u in &mut self.ues {
                if self.churn_rng.random::<f64>() < self.scenario.churn_prob {
                    u.attached = !u.attached;
                }
            }
        }

        let slot_dur = cfg.slot_duration_s();
        let step_start = self.slot_counter as f64 * slot_dur;
        let prbs = apportion(alloc.fractions(), cfg.prb_total());
        let packet_bits = 8 * u64::from(self.scenario.traffic.packet_size_bytes);

        let mut stats: Vec<UeStepStats> = self
            .ues
            .iter()
            .map(|u| UeStepStats {
                ue_id: u.ue_id,
                slice_id: u.slice_id,
                attached: u.attached,
                queued_bits_before: u.queued_bits,
                ..Default::default()
            })
            .collect();
        let mut sojourn_sum = vec![0.0f64; self.ues.len()];

        for _frame in 0..cfg.frames_per_step() {
            for slot in 0..cfg.n_ts() {
                let slot_end = (self.slot_counter + 1) as f64 * slot_dur;
                self.arrivals_until(slot_end, packet_bits, &mut stats);
                if act.is_active_slot(slot) {
                    self.serve_slot(slot_end, &prbs, &mut stats, &mut sojourn_sum);
                }
                self.slot_counter += 1;
            }
            for u in &mut self.ues {
                let r: f64 = self.channel_rng.random();
                if r < CQI_STEP_PROB {
                    u.cqi = u.cqi.saturating_sub(1);
                } else if r < 2.0 * CQI_STEP_PROB {
                    u.cqi += 1;
                }
                u.cqi = u.cqi.clamp(CQI_MIN, CQI_MAX);
            }
        }

        let step_end = self.slot_counter as f64 * slot_dur;
        let duration = step_end - step_start;
        for (i, u) in self.ues.iter_mut().enumerate() {
            let s = &mut stats[i];
            s.queued_bits_after = u.queued_bits;
            s.throughput_mbps = s.served_bits as f64 / duration / 1e6;
            s.delay_ms = if s.completed_packets > 0 {
                1e3 * sojourn_sum[i] / s.completed_packets as f64
            } else if let Some(head) = u.queue.front() {
                1e3 * (step_end - head.arrival_s).max(0.0)
            } else {
                0.0
            };
            u.last = s.clone();
        }

        self.step_index += 1;
        let observation = self.observe();
        Ok(StepOutcome {
            observation,
            ues: stats,
            sleep_ratio: act.sleep_ratio(&cfg),
            action: *act,
            allocation: alloc.clone(),
        })
    }

    fn arrivals_until(&mut self, until: f64, packet_bits: u64, stats: &mut [UeStepStats]) {
        let bits = packet_bits as f64;
        for (i, u) in self.ues.iter_mut().enumerate() {
            let exp = Exp::new(u.rate_mbps * 1e6 / bits).expect("positive rate");
            while u.next_arrival_s < until {
                if u.attached {
                    u.queue.push_back(Packet {
                        arrival_s: u.next_arrival_s,
                        remaining_bits: packet_bits,
                    });
                    u.queued_bits += packet_bits;
                    stats[i].arrived_bits += packet_bits;
                }
                u.next_arrival_s += exp.sample(&mut self.traffic_rng);
            }
        }
    }

    fn serve_slot(
        &mut self,
        slot_end: f64,
        prbs: &[u32],
        stats: &mut [UeStepStats],
        sojourn_sum: &mut [f64],
    ) {
        let slot = self.slot_counter;
        for (slice_idx, &budget) in prbs.iter().enumerate() {
            let members = &self.slice_members[slice_idx];
            let n = members.len();
            if n == 0 {
                continue;
            }
            // PRBs needed to empty each queue, and the round-robin order for
            // this slot. The order depends only on the slot index, so a slot
            // taken away never reorders the grants of the slots that remain.
            let demand: Vec<u64> = members
                .iter()
                .map(|&idx| {
                    let u = &self.ues[idx];
                    if u.attached {
                        u.queued_bits.div_ceil(bits_per_prb(u.cqi).max(1))
                    } else {
                        0
                    }
                })
                .collect();
            let start = (slot % n as u64) as usize;
            let mut grants = vec![0u64; n];
            let mut left = u64::from(budget);
            while left > 0 {
                let mut any = false;
                for k in 0..n {
                    let m = (start + k) % n;
                    if left == 0 {
                        break;
                    }
                    if grants[m] < demand[m] {
                        grants[m] += 1;
                        left -= 1;
                        any = true;
                    }
                }
                if !any {
                    break;
                }
            }
            let mut granted_now = vec![false; n];
            for (m, &count) in grants.iter().enumerate() {
                if count == 0 {
                    continue;
                }
                granted_now[m] = true;
                let idx = members[m];
                let u = &mut self.ues[idx];
                let mut capacity = count * bits_per_prb(u.cqi);
                stats[idx].prbs += count;
                while capacity > 0 {
                    let Some(head) = u.queue.front_mut() else { break };
                    let take = capacity.min(head.remaining_bits);
                    head.remaining_bits -= take;
                    capacity -= take;
                    u.queued_bits -= take;
                    stats[idx].served_bits += take;
                    if head.remaining_bits == 0 {
                        sojourn_sum[idx] += slot_end - head.arrival_s;
                        stats[idx].completed_packets += 1;
                        u.queue.pop_front();
                    }
                }
            }
            for (m, g) in granted_now.iter().enumerate() {
                if *g {
                    stats[members[m]].granted_slots += 1;
                }
            }
        }
    }
}

/// Free-function form of [`Simulator::create`].
pub fn create_sim(
    cfg: FrameConfig,
    slices: Vec<QosTarget>,
    ue_assignment: BTreeMap<u32, u32>,
    traffic: TrafficProfile,
    seed: u64,
) -> Result<Simulator> {
    Simulator::create(cfg, slices, ue_assignment, traffic, seed)
}

/// Per-(step, UE) CSV trace of simulator outcomes.
pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        write!(out, "step,ue_id,slice_id,q_mbps,d_ms")?;
        for name in FEATURE_NAMES {
            write!(out, ",{name}")?;
        }
        writeln!(out, ",sleep_ratio")?;
        Ok(TraceWriter { out })
    }

    pub fn record(&mut self, outcome: &StepOutcome) -> Result<()> {
        let step = outcome.observation.step_index;
        for ue in &outcome.observation.ues {
            write!(
                self.out,
                "{step},{},{},{},{}",
                ue.ue_id, ue.slice_id, ue.throughput_mbps, ue.delay_ms
            )?;
            for f in ue.features {
                write!(self.out, ",{f}")?;
            }
            writeln!(self.out, ",{}", outcome.sleep_ratio)?;
        }
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

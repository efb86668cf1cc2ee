//! Actor and critic heads on top of the set-encoder, plus the bipartite
//! graph-attention layer that fuses the two critic estimates.
//!
//! The dual layout has an energy (EE) actor choosing a sleep class, a slicing
//! (RS) actor emitting Gaussian logits over slices, and one critic per reward
//! stream. The single layout (SASC) shares one actor body between both action
//! heads and trains one critic on the total reward.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{
    EncodedState, EncoderConfig, FeatureLayout, FeatureNormalizer, MeanPoolMlp, StateEncoder,
    TransformerEncoder,
};
use crate::error::{Error, Result};
use crate::nn::checkpoint;
use crate::nn::dist::{Categorical, DiagGaussian};
use crate::nn::{Activation, Graph, Linear, Mlp, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::types::{
    enumerate_sleep_actions, QosTarget, SleepAction, SliceAllocation, StateObservation,
    FrameConfig,
};

/// Negative slope of the attention-score LeakyReLU.
pub const LEAKY_SLOPE: f64 = 0.2;
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Transformer,
    MeanPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticFusion {
    Gat,
    /// `V̂ := V`.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorLayout {
    Dual,
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Width of both hidden layers in every actor and critic network.
    pub hidden: usize,
    pub init_log_std: f64,
    pub encoder: EncoderKind,
    pub fusion: CriticFusion,
    pub layout: ActorLayout,
    /// When false the critics get their own encoder.
    pub share_encoder: bool,
    pub q_ref_mbps: f64,
    pub d_ref_ms: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            d: 64,
            layers: 2,
            heads: 4,
            ffn_hidden: 128,
            hidden: 128,
            init_log_std: -0.5,
            encoder: EncoderKind::Transformer,
            fusion: CriticFusion::Gat,
            layout: ActorLayout::Dual,
            share_encoder: true,
            q_ref_mbps: 10.0,
            d_ref_ms: 100.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("agent.hidden must be positive"));
        }
        if !self.init_log_std.is_finite() {
            return Err(Error::config("agent.init_log_std must be finite"));
        }
        if !(self.q_ref_mbps > 0.0 && self.d_ref_ms > 0.0) {
            return Err(Error::config("reference scales must be positive"));
        }
        self.encoder_config(1).validate()
    }

    fn encoder_config(&self, f_in: usize) -> EncoderConfig {
        EncoderConfig {
            f_in,
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
        }
    }
}

/// One joint action with the log-densities needed for the PPO ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub sleep_class: usize,
    pub sleep_action: SleepAction,
    pub sleep_log_prob: f64,
    /// Pre-softmax Gaussian sample.
    pub beta_raw: Vec<f64>,
    pub beta: SliceAllocation,
    pub beta_log_prob: f64,
}

/// Raw and fused critic values. `attention[i][j]` weighs source `i` for target
/// `j` (index 0 = energy, 1 = QoS). Under the single layout `v_beta` is 0 and
/// the attention is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticPair {
    pub v_alpha: f64,
    pub v_beta: f64,
    pub v_alpha_agg: f64,
    pub v_beta_agg: f64,
    pub attention: [[f64; 2]; 2],
}

/// Scalar parameters of the critic fusion layer.
#[derive(Clone, Copy, Debug)]
pub struct GatParams {
    pub w_s: ParamId,
    pub w_t: ParamId,
    /// `1 x 2` attention vector.
    pub p: ParamId,
}

impl GatParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, rng: &mut R) -> Self {
        GatParams {
            w_s: store.add(format!("{name}.w_s"), ParamGroup::Critic, Tensor::scalar(1.0)),
            w_t: store.add(format!("{name}.w_t"), ParamGroup::Critic, Tensor::scalar(1.0)),
            p: store.add_glorot(format!("{name}.p"), ParamGroup::Critic, 1, 2, rng),
        }
    }
}

/// Output of [`gat_aggregate`]: fused values (`B x 1`) and, per target, the
/// `B x 2` softmax weights over sources.
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub alpha: Var,
    pub beta: Var,
    pub weights: [Var; 2],
}

/// Differentiable critic fusion over a batch of raw values (`B x 1` each).
///
/// `e_ij = LeakyReLU(p0·w_s·V_i + p1·w_t·V_j)`, softmax over sources `i`,
/// `V̂_j = Σ_i γ_ij·w_s·V_i`.
pub fn gat_aggregate(g: &mut Graph, store: &ParamStore, gat: &GatParams, v_alpha: Var, v_beta: Var) -> Fused {
    let ws = g.param(store, gat.w_s);
    let wt = g.param(store, gat.w_t);
    let p = g.param(store, gat.p);
    let p0 = g.slice_cols(p, 0, 1);
    let p1 = g.slice_cols(p, 1, 1);
    let src = [g.mul(v_alpha, ws), g.mul(v_beta, ws)];
    let keys = [g.mul(src[0], p0), g.mul(src[1], p0)];
    let sources = g.concat_cols(&src);
    let mut out = [v_alpha; 2];
    let mut weights = [v_alpha; 2];
    for (j, &target) in [v_alpha, v_beta].iter().enumerate() {
        let tq = g.mul(target, wt);
        let query = g.mul(tq, p1);
        let e: Vec<Var> = keys
            .iter()
            .map(|&k| {
                let s = g.add(k, query);
                g.leaky_relu(s, LEAKY_SLOPE)
            })
            .collect();
        let scores = g.concat_cols(&e);
        let gamma = g.softmax_rows(scores);
        let mixed = g.mul(gamma, sources);
        out[j] = g.sum_cols(mixed);
        weights[j] = gamma;
    }
    Fused {
        alpha: out[0],
        beta: out[1],
        weights,
    }
}

#[derive(Clone, Debug)]
enum Heads {
    Dual {
        ee: Mlp,
        rs: Mlp,
        log_std: ParamId,
        critic_alpha: Mlp,
        critic_beta: Mlp,
        gat: Option<GatParams>,
    },
    Single {
        body: Mlp,
        ee_out: Linear,
        rs_out: Linear,
        log_std: ParamId,
        critic: Mlp,
    },
}

/// Graph nodes of one batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `B x n_classes`
    pub logits: Var,
    /// `B x I`
    pub rs_mean: Var,
    /// `1 x I`
    pub log_std: Var,
    /// `B x 1`; the single critic under the single layout.
    pub v_alpha: Var,
    pub v_beta: Option<Var>,
    pub v_alpha_agg: Var,
    pub v_beta_agg: Option<Var>,
    pub attention: Option<[Var; 2]>,
}

/// Header written next to each checkpoint so that incompatible agents refuse it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub format: u32,
    pub n_classes: usize,
    pub num_slices: usize,
    pub d: usize,
    pub f_in: usize,
    pub config_hash: String,
}

impl CheckpointMeta {
    pub fn to_text(&self) -> String {
        format!(
            "format = {}\nn_classes = {}\nnum_slices = {}\nd = {}\nf_in = {}\nconfig_hash = {}\n",
            self.format, self.n_classes, self.num_slices, self.d, self.f_in, self.config_hash
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("metadata line {}: expected `key = value`", n + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("metadata missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("metadata `{k}` is not an integer")))
        };
        Ok(CheckpointMeta {
            format: num("format")? as u32,
            n_classes: num("n_classes")?,
            num_slices: num("num_slices")?,
            d: num("d")?,
            f_in: num("f_in")?,
            config_hash: get("config_hash")?,
        })
    }
}

/// Path of the metadata sidecar for a checkpoint file.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

#[derive(Clone, Debug)]
pub struct Agent {
    cfg: AgentConfig,
    tag: String,
    frame: FrameConfig,
    layout: FeatureLayout,
    actions: Vec<SleepAction>,
    store: ParamStore,
    normalizer: FeatureNormalizer,
    encoder: StateEncoder,
    critic_encoder: Option<StateEncoder>,
    heads: Heads,
}

fn build_encoder(
    cfg: &AgentConfig,
    store: &mut ParamStore,
    name: &str,
    group: ParamGroup,
    f_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StateEncoder> {
    Ok(match cfg.encoder {
        EncoderKind::Transformer => {
            StateEncoder::Transformer(TransformerEncoder::new(store, name, group, cfg.encoder_config(f_in), rng)?)
        }
        EncoderKind::MeanPool => StateEncoder::MeanPool(MeanPoolMlp::new(store, name, group, f_in, cfg.d, rng)),
    })
}

impl Agent {
    /// Fresh agent for a frame configuration and slice table. `tag` names the
    /// variant and is folded into the configuration hash.
    pub fn new(cfg: AgentConfig, tag: &str, frame: FrameConfig, slices: Vec<QosTarget>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if slices.is_empty() {
            return Err(Error::config("an agent needs at least one slice"));
        }
        for s in &slices {
            s.validate()?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let normalizer = FeatureNormalizer::new(&mut store);
        let layout = FeatureLayout {
            slices,
            q_ref_mbps: cfg.q_ref_mbps,
            d_ref_ms: cfg.d_ref_ms,
        };
        let f_in = layout.width();
        let encoder = build_encoder(&cfg, &mut store, "encoder", ParamGroup::Actor, f_in, &mut rng)?;
        let critic_encoder = if cfg.share_encoder {
            None
        } else {
            Some(build_encoder(&cfg, &mut store, "critic_encoder", ParamGroup::Critic, f_in, &mut rng)?)
        };
        let actions = enumerate_sleep_actions(&frame);
        let (n, i, d, h) = (actions.len(), layout.slices.len(), cfg.d, cfg.hidden);
        let log_std_init = Tensor::full(1, i, cfg.init_log_std);
        let heads = match cfg.layout {
            ActorLayout::Dual => {
                let ee = Mlp::new(&mut store, "actor_ee", ParamGroup::Actor, &[d, h, h, n], Activation::Tanh, &mut rng);
                let rs = Mlp::new(&mut store, "actor_rs", ParamGroup::Actor, &[d, h, h, i], Activation::Tanh, &mut rng);
                let log_std = store.add("actor_rs.log_std", ParamGroup::Actor, log_std_init);
                let critic_alpha =
                    Mlp::new(&mut store, "critic_alpha", ParamGroup::Critic, &[d, h, h, 1], Activation::Tanh, &mut rng);
                let critic_beta =
                    Mlp::new(&mut store, "critic_beta", ParamGroup::Critic, &[d, h, h, 1], Activation::Tanh, &mut rng);
                let gat = match cfg.fusion {
                    CriticFusion::Gat => Some(GatParams::new(&mut store, "gat", &mut rng)),
                    CriticFusion::Identity => None,
                };
                Heads::Dual {
                    ee,
                    rs,
                    log_std,
                    critic_alpha,
                    critic_beta,
                    gat,
                }
            }
            ActorLayout::Single => {
                let body = Mlp::new(&mut store, "actor", ParamGroup::Actor, &[d, h, h], Activation::Tanh, &mut rng);
                let ee_out = Linear::new(&mut store, "actor.ee_out", ParamGroup::Actor, h, n, &mut rng);
                let rs_out = Linear::new(&mut store, "actor.rs_out", ParamGroup::Actor, h, i, &mut rng);
                let log_std = store.add("actor.log_std", ParamGroup::Actor, log_std_init);
                let critic = Mlp::new(&mut store, "critic", ParamGroup::Critic, &[d, h, h, 1], Activation::Tanh, &mut rng);
                Heads::Single {
                    body,
                    ee_out,
                    rs_out,
                    log_std,
                    critic,
                }
            }
        };
        Ok(Agent {
            cfg,
            tag: tag.to_string(),
            frame,
            layout,
            actions,
            store,
            normalizer,
            encoder,
            critic_encoder,
            heads,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn frame(&self) -> &FrameConfig {
        &self.frame
    }

    pub fn slices(&self) -> &[QosTarget] {
        &self.layout.slices
    }

    pub fn num_classes(&self) -> usize {
        self.actions.len()
    }

    pub fn num_slices(&self) -> usize {
        self.layout.slices.len()
    }

    pub fn input_width(&self) -> usize {
        self.layout.width()
    }

    pub fn sleep_actions(&self) -> &[SleepAction] {
        &self.actions
    }

    pub fn is_single(&self) -> bool {
        matches!(self.heads, Heads::Single { .. })
    }

    pub fn has_gat(&self) -> bool {
        matches!(self.heads, Heads::Dual { gat: Some(_), .. })
    }

    pub fn gat_params(&self) -> Option<GatParams> {
        match self.heads {
            Heads::Dual { gat, .. } => gat,
            Heads::Single { .. } => None,
        }
    }

    pub fn encoder(&self) -> &StateEncoder {
        &self.encoder
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn normalizer(&self) -> &FeatureNormalizer {
        &self.normalizer
    }

    /// Fold one observation into the running feature statistics.
    pub fn update_normalizer(&mut self, obs: &StateObservation) {
        for ue in &obs.ues {
            self.normalizer.update(&mut self.store, &ue.features);
        }
    }

    /// Normalized, augmented `K x f_in` input for the encoder.
    pub fn featurize(&self, obs: &StateObservation) -> Result<Tensor> {
        let rows = obs
            .ues
            .iter()
            .map(|ue| self.normalizer.normalize(&self.store, ue, &self.layout))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::from_rows(&rows, self.layout.width()))
    }

    pub fn encode(&self, rows: &Tensor) -> Result<EncodedState> {
        self.check_rows(rows)?;
        self.encoder.encode(&self.store, rows)
    }

    fn check_rows(&self, rows: &Tensor) -> Result<()> {
        if rows.cols() != self.layout.width() {
            return Err(Error::argument(format!(
                "feature rows have width {}, expected {}",
                rows.cols(),
                self.layout.width()
            )));
        }
        Ok(())
    }

    fn encode_batch(&self, g: &mut Graph, encoder: &StateEncoder, batch: &[&Tensor]) -> Var {
        let states: Vec<Var> = batch.iter().map(|rows| encoder.forward(g, &self.store, rows)).collect();
        if states.len() == 1 {
            states[0]
        } else {
            g.concat_rows(&states)
        }
    }

    /// Batched forward pass over per-step feature matrices.
    pub fn forward(&self, g: &mut Graph, batch: &[&Tensor]) -> Forward {
        assert!(!batch.is_empty(), "forward over an empty batch");
        let s = self.encode_batch(g, &self.encoder, batch);
        let sc = match &self.critic_encoder {
            Some(enc) => self.encode_batch(g, enc, batch),
            None => s,
        };
        self.forward_heads(g, s, sc)
    }

    /// Heads only, from already encoded actor states `s` and critic states `sc` (`B x d`).
    pub fn forward_heads(&self, g: &mut Graph, s: Var, sc: Var) -> Forward {
        let store = &self.store;
        match &self.heads {
            Heads::Dual {
                ee,
                rs,
                log_std,
                critic_alpha,
                critic_beta,
                gat,
            } => {
                let logits = ee.forward(g, store, s);
                let rs_mean = rs.forward(g, store, s);
                let log_std = g.param(store, *log_std);
                let va = critic_alpha.forward(g, store, sc);
                let vb = critic_beta.forward(g, store, sc);
                match gat {
                    Some(gat) => {
                        let fused = gat_aggregate(g, store, gat, va, vb);
                        Forward {
                            logits,
                            rs_mean,
                            log_std,
                            v_alpha: va,
                            v_beta: Some(vb),
                            v_alpha_agg: fused.alpha,
                            v_beta_agg: Some(fused.beta),
                            attention: Some(fused.weights),
                        }
                    }
                    None => Forward {
                        logits,
                        rs_mean,
                        log_std,
                        v_alpha: va,
                        v_beta: Some(vb),
                        v_alpha_agg: va,
                        v_beta_agg: Some(vb),
                        attention: None,
                    },
                }
            }
            Heads::Single {
                body,
                ee_out,
                rs_out,
                log_std,
                critic,
            } => {
                let h = body.forward(g, store, s);
                let h = g.tanh(h);
                let logits = ee_out.forward(g, store, h);
                let rs_mean = rs_out.forward(g, store, h);
                let log_std = g.param(store, *log_std);
                let v = critic.forward(g, store, sc);
                Forward {
                    logits,
                    rs_mean,
                    log_std,
                    v_alpha: v,
                    v_beta: None,
                    v_alpha_agg: v,
                    v_beta_agg: None,
                    attention: None,
                }
            }
        }
    }

    /// Action and critic values for one step. `deterministic` takes the most
    /// likely class and the Gaussian mean instead of sampling.
    pub fn step<R: Rng + ?Sized>(
        &self,
        rows: &Tensor,
        deterministic: bool,
        rng: &mut R,
    ) -> Result<(PolicyOutput, CriticPair)> {
        self.check_rows(rows)?;
        let mut g = Graph::new();
        let f = self.forward(&mut g, &[rows]);
        g.check_finite()?;
        let cat = Categorical::from_logits(g.value(f.logits).data());
        let gauss = DiagGaussian::new(g.value(f.rs_mean).data().to_vec(), g.value(f.log_std).data().to_vec());
        let (sleep_class, beta_raw) = if deterministic {
            (cat.mode(), gauss.mean.clone())
        } else {
            let c = cat.sample(rng);
            (c, gauss.sample(rng))
        };
        let policy = PolicyOutput {
            sleep_class,
            sleep_action: self.actions[sleep_class],
            sleep_log_prob: cat.log_prob(sleep_class)?,
            beta: SliceAllocation::from_logits(&beta_raw),
            beta_log_prob: gauss.log_prob(&beta_raw)?,
            beta_raw,
        };
        let scalar = |v: Var| g.value(v).item();
        let critics = match (f.v_beta, f.v_beta_agg, f.attention) {
            (Some(vb), Some(vbh), Some(w)) => {
                let (wa, wb) = (g.value(w[0]), g.value(w[1]));
                CriticPair {
                    v_alpha: scalar(f.v_alpha),
                    v_beta: scalar(vb),
                    v_alpha_agg: scalar(f.v_alpha_agg),
                    v_beta_agg: scalar(vbh),
                    attention: [[wa.get(0, 0), wb.get(0, 0)], [wa.get(0, 1), wb.get(0, 1)]],
                }
            }
            (Some(vb), Some(vbh), None) => CriticPair {
                v_alpha: scalar(f.v_alpha),
                v_beta: scalar(vb),
                v_alpha_agg: scalar(f.v_alpha_agg),
                v_beta_agg: scalar(vbh),
                attention: [[1.0, 0.0], [0.0, 1.0]],
            },
            _ => CriticPair {
                v_alpha: scalar(f.v_alpha),
                v_beta: 0.0,
                v_alpha_agg: scalar(f.v_alpha_agg),
                v_beta_agg: 0.0,
                attention: [[1.0, 0.0], [0.0, 1.0]],
            },
        };
        Ok((policy, critics))
    }

    pub fn act<R: Rng + ?Sized>(&self, rows: &Tensor, deterministic: bool, rng: &mut R) -> Result<PolicyOutput> {
        Ok(self.step(rows, deterministic, rng)?.0)
    }

    pub fn evaluate(&self, rows: &Tensor) -> Result<CriticPair> {
        Ok(self.step(rows, true, &mut ChaCha8Rng::seed_from_u64(0))?.1)
    }

    /// Hash of everything that fixes the parameter layout and its meaning.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::json!({
            "tag": self.tag,
            "agent": self.cfg,
            "frame": self.frame,
            "slices": self.layout.slices,
        });
        let digest = Sha256::digest(canonical.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            format: CHECKPOINT_FORMAT,
            n_classes: self.num_classes(),
            num_slices: self.num_slices(),
            d: self.cfg.d,
            f_in: self.input_width(),
            config_hash: self.config_hash(),
        }
    }

    /// Writes parameters to `path` and the metadata sidecar to `path.meta`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        checkpoint::write_params(&self.store, &mut bytes)?;
        fs::write(path, bytes)?;
        fs::write(meta_path(path), self.checkpoint_meta().to_text())?;
        Ok(())
    }

    /// Loads parameters saved by a compatible agent; anything else is refused
    /// before a single value is overwritten.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(meta_path(path))
            .map_err(|e| Error::Checkpoint(format!("cannot read metadata for {}: {e}", path.display())))?;
        let found = CheckpointMeta::parse(&text)?;
        let expected = self.checkpoint_meta();
        if found != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint {} does not match this agent (classes {}/{}, slices {}/{}, d {}/{}, hash {}/{})",
                path.display(),
                found.n_classes,
                expected.n_classes,
                found.num_slices,
                expected.num_slices,
                found.d,
                expected.d,
                &found.config_hash[..found.config_hash.len().min(12)],
                &expected.config_hash[..12],
            )));
        }
        let bytes = fs::read(path)?;
        checkpoint::load_into(&mut self.store, bytes.as_slice())
    }
}

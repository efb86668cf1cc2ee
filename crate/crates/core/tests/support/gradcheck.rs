//! Central finite-difference oracle for the autodiff tape.
//!
//! Each case builds a scalar loss from random inputs and parameters, then
//! compares every analytic partial derivative against
//! `(f(x + h) - f(x - h)) / 2h` with `h = 1e-6`.

use ecoran::agent::{gat_aggregate, Agent, AgentConfig, GatParams};
use ecoran::encoder::{EncoderBlock, EncoderConfig, MeanPoolMlp, StateEncoder, TransformerEncoder};
use ecoran::nn::dist::{categorical_entropy, categorical_log_prob, gaussian_log_prob};
use ecoran::nn::{
    Activation, FeedForward, Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamGroup,
    ParamStore, Tensor, Var,
};
use ecoran::{FrameConfig, QosTarget};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Disagreements below this many ulps of the loss, divided by `2h`, are
/// rounding in the difference quotient itself and count as exact.
const ROUNDOFF_ULPS: f64 = 16.0;

#[derive(Clone, Copy, Debug, Default)]
pub struct Report {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (analytic, numeric) at the worst entry.
    pub worst: (f64, f64),
}

impl Report {
    fn push(&mut self, analytic: f64, numeric: f64, loss_scale: f64) {
        let diff = (analytic - numeric).abs();
        let roundoff = ROUNDOFF_ULPS * f64::EPSILON * loss_scale.max(1.0) / (2.0 * STEP);
        let err = if diff <= roundoff { 0.0 } else { diff / analytic.abs().max(numeric.abs()) };
        if err > self.max_rel_err || err.is_nan() {
            self.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
            self.worst = (analytic, numeric);
        }
        self.checked += 1;
    }

    pub fn merge(self, other: Report) -> Report {
        let worst = if other.max_rel_err > self.max_rel_err { other.worst } else { self.worst };
        Report {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            checked: self.checked + other.checked,
            worst,
        }
    }
}

fn identity(s: &mut ParamStore) -> &mut ParamStore {
    s
}

fn loss_value<S, F>(state: &S, inputs: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Graph, &S, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, state, &vars);
    g.value(out).item()
}

/// Compare gradients of `f` with respect to every input element and every
/// parameter scalar reachable through `store_of(state)`.
pub fn check_with<S, F>(state: &mut S, store_of: fn(&mut S) -> &mut ParamStore, inputs: &[Tensor], f: F) -> Report
where
    F: Fn(&mut Graph, &S, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, state, &vars);
    let grads = g.backward(out).expect("finite forward");
    let input_grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
        .collect();
    {
        let store = store_of(state);
        store.zero_grad();
        grads.accumulate_into(store);
    }

    let mut report = Report::default();
    let mut work = inputs.to_vec();
    for (i, analytic) in input_grads.iter().enumerate() {
        for k in 0..work[i].len() {
            let x0 = work[i].data()[k];
            work[i].data_mut()[k] = x0 + STEP;
            let up = loss_value(state, &work, &f);
            work[i].data_mut()[k] = x0 - STEP;
            let down = loss_value(state, &work, &f);
            work[i].data_mut()[k] = x0;
            report.push(analytic.data()[k], (up - down) / (2.0 * STEP), up.abs().max(down.abs()));
        }
    }

    let ids: Vec<_> = store_of(state).iter().map(|(id, _)| id).collect();
    for id in ids {
        let analytic = store_of(state).get(id).grad.clone();
        for k in 0..analytic.len() {
            let x0 = store_of(state).value(id).data()[k];
            store_of(state).value_mut(id).data_mut()[k] = x0 + STEP;
            let up = loss_value(state, inputs, &f);
            store_of(state).value_mut(id).data_mut()[k] = x0 - STEP;
            let down = loss_value(state, inputs, &f);
            store_of(state).value_mut(id).data_mut()[k] = x0;
            report.push(analytic.data()[k], (up - down) / (2.0 * STEP), up.abs().max(down.abs()));
        }
    }
    report
}

pub fn check<F>(store: &mut ParamStore, inputs: &[Tensor], f: F) -> Report
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Var,
{
    check_with(store, identity, inputs, f)
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

/// Uniform values kept at least `gap` away from every point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, rows: usize, cols: usize, kinks: &[f64], gap: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| loop {
            let x: f64 = rng.random_range(-2.0..2.0);
            if kinks.iter().all(|k| (x - k).abs() > gap) {
                break x;
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// Fixed random weights `w` turn any tensor output into a scalar `Σ w ⊙ y`.
fn project(g: &mut Graph, y: Var, w: &Tensor) -> Var {
    let wv = g.input(w.clone());
    let m = g.mul(y, wv);
    g.sum(m)
}

fn weights_like(rng: &mut ChaCha8Rng, g: &Graph, y: Var) -> Tensor {
    let [r, c] = g.value(y).shape();
    uniform(rng, r, c, -1.0, 1.0)
}

/// Check an elementwise/structural op applied to the given inputs, projecting
/// its output with random weights drawn from `seed`.
fn op_case(inputs: Vec<Tensor>, seed: u64, op: impl Fn(&mut Graph, &[Var]) -> Var) -> Report {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = op(&mut g, &vars);
    let w = weights_like(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc), &g, y);
    let mut store = ParamStore::new();
    check(&mut store, &inputs, |g, _, v| {
        let y = op(g, v);
        project(g, y, &w)
    })
}

type CaseFn = fn(u64) -> Report;

/// Every primitive op, distribution helper, layer and network composite.
pub fn cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("matmul", matmul as CaseFn),
        ("matmul_bt", matmul_bt),
        ("add_broadcast", add_broadcast),
        ("sub_broadcast", sub_broadcast),
        ("mul_broadcast", mul_broadcast),
        ("scale_add_scalar_neg", scale_shift),
        ("tanh", tanh),
        ("relu", relu),
        ("leaky_relu", leaky_relu),
        ("exp", exp),
        ("log", log),
        ("square", square),
        ("softmax_rows", softmax_rows),
        ("log_softmax_rows", log_softmax_rows),
        ("layer_norm_rows", layer_norm_rows),
        ("mean_rows", mean_rows),
        ("sum_cols_sum_mean", reductions),
        ("slice_concat", slice_concat),
        ("gather", gather),
        ("minimum", minimum),
        ("clamp", clamp),
        ("huber", huber),
        ("categorical_log_prob", cat_log_prob),
        ("categorical_entropy", cat_entropy),
        ("gaussian_log_prob", gauss_log_prob),
        ("linear", linear),
        ("layer_norm", layer_norm),
        ("mlp", mlp),
        ("attention", attention),
        ("feed_forward", feed_forward),
        ("encoder_block", encoder_block),
        ("transformer_encoder", transformer_encoder),
        ("mean_pool_encoder", mean_pool_encoder),
        ("gat_aggregate", gat),
        ("actor_critic_heads", heads),
        ("agent_end_to_end", agent_end_to_end),
    ]
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize) {
    (r.random_range(1..5), r.random_range(1..5))
}

fn matmul(seed: u64) -> Report {
    let mut r = rng(seed);
    let (m, k) = dims(&mut r);
    let n = r.random_range(1..5);
    let inputs = vec![uniform(&mut r, m, k, -2.0, 2.0), uniform(&mut r, k, n, -2.0, 2.0)];
    op_case(inputs, seed, |g, v| g.matmul(v[0], v[1]))
}

fn matmul_bt(seed: u64) -> Report {
    let mut r = rng(seed);
    let (m, k) = dims(&mut r);
    let n = r.random_range(1..5);
    let inputs = vec![uniform(&mut r, m, k, -2.0, 2.0), uniform(&mut r, n, k, -2.0, 2.0)];
    op_case(inputs, seed, |g, v| g.matmul_bt(v[0], v[1]))
}

/// `(a, b)` where `b` is full, a row, a column or a scalar relative to `a`.
fn broadcast_pair(seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    let (m, n) = dims(&mut r);
    let a = uniform(&mut r, m, n, -2.0, 2.0);
    let b = match seed % 4 {
        0 => uniform(&mut r, m, n, -2.0, 2.0),
        1 => uniform(&mut r, 1, n, -2.0, 2.0),
        2 => uniform(&mut r, m, 1, -2.0, 2.0),
        _ => uniform(&mut r, 1, 1, -2.0, 2.0),
    };
    vec![a, b]
}

fn add_broadcast(seed: u64) -> Report {
    op_case(broadcast_pair(seed), seed, |g, v| g.add(v[0], v[1]))
}

fn sub_broadcast(seed: u64) -> Report {
    op_case(broadcast_pair(seed), seed, |g, v| g.sub(v[0], v[1]))
}

fn mul_broadcast(seed: u64) -> Report {
    op_case(broadcast_pair(seed), seed, |g, v| g.mul(v[0], v[1]))
}

fn scale_shift(seed: u64) -> Report {
    let mut r = rng(seed);
    let (m, n) = dims(&mut r);
    let k = r.random_range(-3.0..3.0);
    op_case(vec![uniform(&mut r, m, n, -2.0, 2.0)], seed, move |g, v| {
        let s = g.scale(v[0], k);
        let s = g.add_scalar(s, 0.7);
        g.neg(s)
    })
}

fn unary(seed: u64, lo: f64, hi: f64, op: fn(&mut Graph, Var) -> Var) -> Report {
    let mut r = rng(seed);
    let (m, n) = dims(&mut r);
    op_case(vec![uniform(&mut r, m, n, lo, hi)], seed, move |g, v| op(g, v[0]))
}

fn kinked(seed: u64, kinks: &[f64], op: fn(&mut Graph, Var) -> Var) -> Report {
    let mut r = rng(seed);
    let (m, n) = dims(&mut r);
    op_case(vec![away_from(&mut r, m, n, kinks, 1e-3)], seed, move |g, v| op(g, v[0]))
}

fn tanh(seed: u64) -> Report {
    unary(seed, -3.0, 3.0, |g, x| g.tanh(x))
}

fn relu(seed: u64) -> Report {
    kinked(seed, &[0.0], |g, x| g.relu(x))
}

fn leaky_relu(seed: u64) -> Report {
    kinked(seed, &[0.0], |g, x| g.leaky_relu(x, 0.2))
}

fn exp(seed: u64) -> Report {
    unary(seed, -2.0, 2.0, |g, x| g.exp(x))
}

fn log(seed: u64) -> Report {
    unary(seed, 0.2, 3.0, |g, x| g.log(x))
}

fn square(seed: u64) -> Report {
    unary(seed, -2.0, 2.0, |g, x| g.square(x))
}

fn softmax_rows(seed: u64) -> Report {
    unary(seed, -3.0, 3.0, |g, x| g.softmax_rows(x))
}

fn log_softmax_rows(seed: u64) -> Report {
    unary(seed, -3.0, 3.0, |g, x| g.log_softmax_rows(x))
}

fn layer_norm_rows(seed: u64) -> Report {
    let mut r = rng(seed);
    let m = r.random_range(1..4);
    let n = r.random_range(2..6);
    op_case(vec![uniform(&mut r, m, n, -2.0, 2.0)], seed, |g, v| g.layer_norm_rows(v[0], 1e-5))
}

fn mean_rows(seed: u64) -> Report {
    unary(seed, -2.0, 2.0, |g, x| g.mean_rows(x))
}

fn reductions(seed: u64) -> Report {
    unary(seed, -2.0, 2.0, |g, x| {
        let s = g.sum_cols(x);
        let t = g.square(s);
        let a = g.sum(t);
        let b = g.mean(x);
        g.add(a, b)
    })
}

fn slice_concat(seed: u64) -> Report {
    let mut r = rng(seed);
    let m = r.random_range(1..4);
    let n = r.random_range(2..6);
    let start = r.random_range(0..n - 1);
    let len = r.random_range(1..=n - start);
    let inputs = vec![uniform(&mut r, m, n, -2.0, 2.0), uniform(&mut r, m, 2, -2.0, 2.0)];
    op_case(inputs, seed, move |g, v| {
        let s = g.slice_cols(v[0], start, len);
        let c = g.concat_cols(&[s, v[1], s]);
        g.concat_rows(&[c, c])
    })
}

fn gather(seed: u64) -> Report {
    let mut r = rng(seed);
    let (m, n) = dims(&mut r);
    let idx: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
    op_case(vec![uniform(&mut r, m, n, -2.0, 2.0)], seed, move |g, v| g.gather(v[0], &idx))
}

fn minimum(seed: u64) -> Report {
    let mut r = rng(seed);
    let (m, n) = dims(&mut r);
    let a = uniform(&mut r, m, n, -2.0, 2.0);
    let mut b = uniform(&mut r, m, n, -2.0, 2.0);
    for (x, y) in a.data().iter().zip(b.data_mut()) {
        if (x - *y).abs() < 1e-3 {
            *y += 0.01;
        }
    }
    op_case(vec![a, b], seed, |g, v| g.minimum(v[0], v[1]))
}

fn clamp(seed: u64) -> Report {
    kinked(seed, &[-0.8, 0.8], |g, x| g.clamp(x, -0.8, 0.8))
}

fn huber(seed: u64) -> Report {
    kinked(seed, &[-1.0, 1.0], |g, x| g.huber(x, 1.0))
}

fn cat_log_prob(seed: u64) -> Report {
    let mut r = rng(seed);
    let (m, n) = dims(&mut r);
    let cls: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
    op_case(vec![uniform(&mut r, m, n, -3.0, 3.0)], seed, move |g, v| categorical_log_prob(g, v[0], &cls))
}

fn cat_entropy(seed: u64) -> Report {
    unary(seed, -3.0, 3.0, categorical_entropy)
}

fn gauss_log_prob(seed: u64) -> Report {
    let mut r = rng(seed);
    let (m, n) = dims(&mut r);
    let inputs = vec![
        uniform(&mut r, m, n, -2.0, 2.0),
        uniform(&mut r, 1, n, -1.5, 0.5),
        uniform(&mut r, m, n, -2.0, 2.0),
    ];
    op_case(inputs, seed, |g, v| gaussian_log_prob(g, v[0], v[1], v[2]))
}

/// Parameter-bearing case: inputs `rows x f`, a freshly built module and a
/// random projection of its output.
fn module_case<M>(
    seed: u64,
    rows: usize,
    f: usize,
    build: impl Fn(&mut ParamStore, &mut ChaCha8Rng) -> M,
    fwd: impl Fn(&M, &mut Graph, &ParamStore, Var) -> Var,
) -> Report {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let module = build(&mut store, &mut r);
    jitter(&mut store, &mut r);
    let x = uniform(&mut r, rows, f, -2.0, 2.0);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = fwd(&module, &mut g, &store, xv);
    let w = weights_like(&mut r, &g, y);
    check(&mut store, &[x], |g, s, v| {
        let y = fwd(&module, g, s, v[0]);
        project(g, y, &w)
    })
}

/// Move every parameter off its initial value (unit gains, zero biases) so the
/// check is not run at a special point.
fn jitter(store: &mut ParamStore, r: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        if p.group == ParamGroup::Frozen {
            continue;
        }
        for v in p.value.data_mut() {
            *v += r.random_range(-0.1..0.1);
        }
    }
}

fn linear(seed: u64) -> Report {
    module_case(
        seed,
        3,
        4,
        |s, r| Linear::new(s, "lin", ParamGroup::Actor, 4, 3, r),
        |m, g, s, x| m.forward(g, s, x),
    )
}

fn layer_norm(seed: u64) -> Report {
    module_case(
        seed,
        3,
        5,
        |s, _| LayerNorm::new(s, "ln", ParamGroup::Actor, 5),
        |m, g, s, x| m.forward(g, s, x),
    )
}

fn mlp(seed: u64) -> Report {
    module_case(
        seed,
        2,
        4,
        |s, r| Mlp::new(s, "mlp", ParamGroup::Critic, &[4, 5, 5, 3], Activation::Tanh, r),
        |m, g, s, x| m.forward(g, s, x),
    )
}

fn attention(seed: u64) -> Report {
    let k = 1 + (seed % 4) as usize;
    module_case(
        seed,
        k,
        4,
        |s, r| MultiHeadAttention::new(s, "mha", ParamGroup::Actor, 4, 2, r),
        |m, g, s, x| m.forward(g, s, x),
    )
}

fn feed_forward(seed: u64) -> Report {
    module_case(
        seed,
        3,
        4,
        |s, r| FeedForward::new(s, "ffn", ParamGroup::Actor, 4, 6, r),
        |m, g, s, x| m.forward(g, s, x),
    )
}

fn small_encoder(f_in: usize) -> EncoderConfig {
    EncoderConfig {
        f_in,
        d: 4,
        layers: 2,
        heads: 2,
        ffn_hidden: 6,
    }
}

fn encoder_block(seed: u64) -> Report {
    let k = 1 + (seed % 4) as usize;
    module_case(
        seed,
        k,
        4,
        |s, r| EncoderBlock {
            attention: MultiHeadAttention::new(s, "b.attn", ParamGroup::Actor, 4, 2, r),
            norm1: LayerNorm::new(s, "b.norm1", ParamGroup::Actor, 4),
            ffn: FeedForward::new(s, "b.ffn", ParamGroup::Actor, 4, 6, r),
            norm2: LayerNorm::new(s, "b.norm2", ParamGroup::Actor, 4),
        },
        |m, g, s, x| m.forward(g, s, x),
    )
}

fn transformer_encoder(seed: u64) -> Report {
    let k = 1 + (seed % 4) as usize;
    module_case(
        seed,
        k,
        5,
        |s, r| TransformerEncoder::new(s, "enc", ParamGroup::Actor, small_encoder(5), r).unwrap(),
        |m, g, s, x| {
            let h = m.embed_rows(g, s, x);
            g.mean_rows(h)
        },
    )
}

fn mean_pool_encoder(seed: u64) -> Report {
    let k = 1 + (seed % 4) as usize;
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let enc = StateEncoder::MeanPool(MeanPoolMlp::new(&mut store, "mp", ParamGroup::Actor, 5, 4, &mut r));
    jitter(&mut store, &mut r);
    let rows = uniform(&mut r, k, 5, -2.0, 2.0);
    let w = uniform(&mut r, 1, 4, -1.0, 1.0);
    // Rows enter as constants here; the check covers the parameters.
    check(&mut store, &[], |g, s, _| {
        let y = enc.forward(g, s, &rows);
        project(g, y, &w)
    })
}

fn gat(seed: u64) -> Report {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let params = GatParams::new(&mut store, "gat", &mut r);
    jitter(&mut store, &mut r);
    let b = r.random_range(1..5);
    let inputs = vec![uniform(&mut r, b, 1, -3.0, 3.0), uniform(&mut r, b, 1, -3.0, 3.0)];
    let w: Vec<Tensor> = (0..4).map(|i| uniform(&mut r, b, if i < 2 { 1 } else { 2 }, -1.0, 1.0)).collect();
    check(&mut store, &inputs, |g, s, v| {
        let f = gat_aggregate(g, s, &params, v[0], v[1]);
        let parts = [
            project(g, f.alpha, &w[0]),
            project(g, f.beta, &w[1]),
            project(g, f.weights[0], &w[2]),
            project(g, f.weights[1], &w[3]),
        ];
        let a = g.add(parts[0], parts[1]);
        let b = g.add(parts[2], parts[3]);
        g.add(a, b)
    })
}

fn small_agent(seed: u64) -> Agent {
    let cfg = AgentConfig {
        d: 4,
        layers: 1,
        heads: 2,
        ffn_hidden: 6,
        hidden: 5,
        ..AgentConfig::default()
    };
    let frame = FrameConfig::new(0, 10, 1).unwrap();
    let slices = vec![QosTarget::new(0, 0.5, 10.0).unwrap(), QosTarget::new(1, 0.5, 15.0).unwrap()];
    let mut agent = Agent::new(cfg, "gradcheck", frame, slices, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    jitter(agent.store_mut(), &mut r);
    agent
}

/// Scalar mixing every head output: logits, slicing mean and log-std, raw and
/// fused critics, and the fusion weights.
fn head_loss(g: &mut Graph, f: &ecoran::agent::Forward, w: &[Tensor]) -> Var {
    let mut parts = vec![
        project(g, f.logits, &w[0]),
        project(g, f.rs_mean, &w[1]),
        project(g, f.log_std, &w[2]),
        project(g, f.v_alpha, &w[3]),
        project(g, f.v_alpha_agg, &w[4]),
    ];
    if let (Some(vb), Some(vbh)) = (f.v_beta, f.v_beta_agg) {
        parts.push(project(g, vb, &w[3]));
        parts.push(project(g, vbh, &w[4]));
    }
    if let Some([a, b]) = f.attention {
        parts.push(project(g, a, &w[5]));
        parts.push(project(g, b, &w[5]));
    }
    let mut total = parts[0];
    for p in &parts[1..] {
        total = g.add(total, *p);
    }
    total
}

fn head_weights(r: &mut ChaCha8Rng, batch: usize, agent: &Agent) -> Vec<Tensor> {
    vec![
        uniform(r, batch, agent.num_classes(), -1.0, 1.0),
        uniform(r, batch, agent.num_slices(), -1.0, 1.0),
        uniform(r, 1, agent.num_slices(), -1.0, 1.0),
        uniform(r, batch, 1, -1.0, 1.0),
        uniform(r, batch, 1, -1.0, 1.0),
        uniform(r, batch, 2, -1.0, 1.0),
    ]
}

fn heads(seed: u64) -> Report {
    let mut agent = small_agent(seed);
    let mut r = rng(seed);
    let batch = r.random_range(1..4);
    let s = uniform(&mut r, batch, 4, -1.5, 1.5);
    let w = head_weights(&mut r, batch, &agent);
    check_with(&mut agent, Agent::store_mut, &[s.clone(), s], |g, a, v| {
        let f = a.forward_heads(g, v[0], v[1]);
        head_loss(g, &f, &w)
    })
}

fn agent_end_to_end(seed: u64) -> Report {
    let mut agent = small_agent(seed);
    let mut r = rng(seed);
    let f_in = agent.input_width();
    let rows: Vec<Tensor> = (0..2)
        .map(|_| {
            let k = r.random_range(1..4);
            uniform(&mut r, k, f_in, -2.0, 2.0)
        })
        .collect();
    let w = head_weights(&mut r, 2, &agent);
    check_with(&mut agent, Agent::store_mut, &[], |g, a, _| {
        let batch: Vec<&Tensor> = rows.iter().collect();
        let f = a.forward(g, &batch);
        head_loss(g, &f, &w)
    })
}

/// Run every case over `seeds` seeds, returning the worst report per case.
pub fn run_all(seeds: u64) -> Vec<(&'static str, Report)> {
    cases()
        .into_iter()
        .map(|(name, case)| {
            let report = (0..seeds).map(case).fold(Report::default(), Report::merge);
            (name, report)
        })
        .collect()
}

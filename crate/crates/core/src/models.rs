//! GRU baseline, Attention-GRU and Attention-GRU with the three brand-ranking
//! modifications, each with an exact, hand-derived backward pass.
//!
//! Attention variants encode the ten history steps with a GRU (time-gated when
//! the time gate is on), attend over the encoder states from the decoder's
//! initial state, then run a single decoder GRU step on `[y0; glimpse]`, where
//! `y0` is the query brand's representation. A two-way softmax over
//! `Ṽ · s1` gives `p = P(label 1)`.
//!
//! The GRU baseline runs one GRU over the history and reads `p` as the query
//! brand's entry of a softmax over the whole brand vocabulary.
//!
//! Modifications, each toggled independently:
//! 1. brand representation `M_embed · o_k + v_k` (see [`BrandRepr::Combined`]);
//! 2. per-action matrices `M_click`, `M_purchase` applied to the brand
//!    representation instead of concatenating an action one-hot;
//! 3. a time gate `T = σ(W_t x + σ(Q_t Δt))` multiplying the candidate state.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataset::{ActionType, BrandTable, EncodedInstance};
use crate::error::{Error, Result};
use crate::nn::{axpy, sigmoid, softmax_into, Matrix, ParamTensors};
use crate::train::instance_loss;

pub const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrandRepr {
    /// Engineered feature vector `v_k`.
    Features,
    /// Learned embedding column `M_embed[:, k]`.
    OneHot,
    /// `M_embed[:, k] + v_k`.
    Combined,
}

impl BrandRepr {
    pub fn uses_embedding(self) -> bool {
        !matches!(self, BrandRepr::Features)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub attention_size: usize,
    pub brand_repr: BrandRepr,
    pub use_attention: bool,
    pub use_action_matrices: bool,
    pub use_time_gate: bool,
    /// Learn the initial recurrent state instead of fixing it at zero.
    pub learn_initial_state: bool,
    /// Feed gaps to the model in days rather than raw seconds.
    pub time_in_days: bool,
    pub brand_vocab_size: usize,
    pub feature_dim: usize,
}

impl ModelConfig {
    pub const DEFAULT_HIDDEN: usize = 256;

    fn base(brand_vocab_size: usize, feature_dim: usize) -> Self {
        ModelConfig {
            hidden_size: Self::DEFAULT_HIDDEN,
            attention_size: Self::DEFAULT_HIDDEN,
            brand_repr: BrandRepr::Features,
            use_attention: true,
            use_action_matrices: false,
            use_time_gate: false,
            learn_initial_state: false,
            time_in_days: true,
            brand_vocab_size,
            feature_dim,
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden_size = hidden;
        self.attention_size = hidden;
        self
    }

    /// Width of one encoder input `x_m`.
    pub fn input_dim(&self) -> usize {
        self.feature_dim
            + if self.use_action_matrices { 0 } else { 2 }
            + if self.use_time_gate { 0 } else { 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.feature_dim == 0 || self.brand_vocab_size == 0 {
            return Err(Error::Contract(format!("degenerate model config {self:?}")));
        }
        if self.use_attention && self.attention_size == 0 {
            return Err(Error::Contract("attention size must be positive".into()));
        }
        Ok(())
    }
}

/// Named model variants compared in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Gru,
    AttentionGru,
    AttentionGru3m,
    NoMod1,
    NoMod2,
    NoMod3,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::AttentionGru3m,
        Variant::NoMod1,
        Variant::NoMod2,
        Variant::NoMod3,
        Variant::Gru,
        Variant::AttentionGru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gru => "GRU",
            Variant::AttentionGru => "Attention-GRU",
            Variant::AttentionGru3m => "Attention-GRU-3M",
            Variant::NoMod1 => "No Modification 1",
            Variant::NoMod2 => "No Modification 2",
            Variant::NoMod3 => "No Modification 3",
        }
    }

    /// Model config of this variant. Dropping modification 1 keeps only the
    /// learned embedding (`OneHot`); the plain baselines use brand features.
    pub fn config(self, brand_vocab_size: usize, feature_dim: usize, hidden: usize) -> ModelConfig {
        let base = ModelConfig::base(brand_vocab_size, feature_dim).with_hidden(hidden);
        let mods = |m1: bool, m2: bool, m3: bool| ModelConfig {
            brand_repr: if m1 { BrandRepr::Combined } else { BrandRepr::OneHot },
            use_action_matrices: m2,
            use_time_gate: m3,
            ..base
        };
        match self {
            Variant::Gru => ModelConfig {
                use_attention: false,
                ..base
            },
            Variant::AttentionGru => base,
            Variant::AttentionGru3m => mods(true, true, true),
            Variant::NoMod1 => mods(false, true, true),
            Variant::NoMod2 => mods(true, false, true),
            Variant::NoMod3 => mods(true, true, false),
        }
    }

    /// The variant whose architecture `config` describes, ignoring sizes and
    /// the initial-state and time-unit flags.
    pub fn identify(config: &ModelConfig) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| {
            let c = v.config(config.brand_vocab_size, config.feature_dim, config.hidden_size);
            ModelConfig {
                attention_size: config.attention_size,
                learn_initial_state: config.learn_initial_state,
                time_in_days: config.time_in_days,
                ..c
            } == *config
        })
    }
}

/// Weights of one GRU cell: `W_*` is `hidden × input`, `U_*` is `hidden × hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub w_z: Matrix,
    pub u_z: Matrix,
    pub w_r: Matrix,
    pub u_r: Matrix,
    pub w_h: Matrix,
    pub u_h: Matrix,
}

impl GruWeights {
    fn zeros(hidden: usize, input: usize) -> Self {
        GruWeights {
            w_z: Matrix::zeros(hidden, input),
            u_z: Matrix::zeros(hidden, hidden),
            w_r: Matrix::zeros(hidden, input),
            u_r: Matrix::zeros(hidden, hidden),
            w_h: Matrix::zeros(hidden, input),
            u_h: Matrix::zeros(hidden, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u_z.rows()
    }

    pub fn input(&self) -> usize {
        self.w_z.cols()
    }
}

/// `W_t` (`hidden × input`) and `Q_t` (`hidden × 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGate {
    pub w_t: Matrix,
    pub q_t: Matrix,
}

/// Additive attention: `e_j = vᵀ tanh(W_a s + U_a h_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub w_a: Matrix,
    pub u_a: Matrix,
    pub v: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: GruWeights,
    pub time_gate: Option<TimeGate>,
    pub attention: Option<Attention>,
    pub decoder: Option<GruWeights>,
    /// `2 × hidden` with attention, `N × hidden` for the GRU baseline.
    pub output: Matrix,
    /// `d × N`.
    pub embed: Option<Matrix>,
    pub m_click: Option<Matrix>,
    pub m_purchase: Option<Matrix>,
    pub initial_state: Option<Matrix>,
}

impl ModelParams {
    /// All-zero parameters of the right shapes.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_size;
        let d = config.feature_dim;
        let n = config.brand_vocab_size;
        let input = config.input_dim();
        Ok(ModelParams {
            encoder: GruWeights::zeros(h, input),
            time_gate: config.use_time_gate.then(|| TimeGate {
                w_t: Matrix::zeros(h, input),
                q_t: Matrix::zeros(h, 1),
            }),
            attention: config.use_attention.then(|| Attention {
                w_a: Matrix::zeros(config.attention_size, h),
                u_a: Matrix::zeros(config.attention_size, h),
                v: Matrix::zeros(config.attention_size, 1),
            }),
            decoder: config.use_attention.then(|| GruWeights::zeros(h, d + h)),
            output: Matrix::zeros(if config.use_attention { 2 } else { n }, h),
            embed: config.brand_repr.uses_embedding().then(|| Matrix::zeros(d, n)),
            m_click: config.use_action_matrices.then(|| Matrix::zeros(d, d)),
            m_purchase: config.use_action_matrices.then(|| Matrix::zeros(d, d)),
            initial_state: config.learn_initial_state.then(|| Matrix::zeros(h, 1)),
        })
    }

    /// Glorot-uniform weights; small embeddings; action matrices near identity;
    /// zero initial state.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut p = ModelParams::zeros(config)?;
        let glorot = |m: &mut Matrix, rng: &mut R| {
            let a = (6.0 / (m.rows() + m.cols()) as f64).sqrt();
            fill_uniform(m, a, rng);
        };
        let init_gru = |g: &mut GruWeights, rng: &mut R| {
            for m in [&mut g.w_z, &mut g.u_z, &mut g.w_r, &mut g.u_r, &mut g.w_h, &mut g.u_h] {
                glorot(m, rng);
            }
        };
        init_gru(&mut p.encoder, rng);
        if let Some(t) = p.time_gate.as_mut() {
            glorot(&mut t.w_t, rng);
            glorot(&mut t.q_t, rng);
        }
        if let Some(a) = p.attention.as_mut() {
            glorot(&mut a.w_a, rng);
            glorot(&mut a.u_a, rng);
            glorot(&mut a.v, rng);
        }
        if let Some(d) = p.decoder.as_mut() {
            init_gru(d, rng);
        }
        glorot(&mut p.output, rng);
        if let Some(e) = p.embed.as_mut() {
            fill_uniform(e, 0.01, rng);
        }
        for m in [p.m_click.as_mut(), p.m_purchase.as_mut()].into_iter().flatten() {
            fill_uniform(m, 0.01, rng);
            for i in 0..m.rows() {
                m.set(i, i, m.get(i, i) + 1.0);
            }
        }
        Ok(p)
    }

    /// Zero tensors with the same layout, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn fill(&mut self, value: f64) {
        for (_, m) in self.tensors_mut() {
            m.fill(value);
        }
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, m) in self.tensors_mut() {
            m.scale(factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, m)| m.sum_squares()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    fn action_matrix(&self, action: ActionType) -> Option<&Matrix> {
        match action {
            ActionType::Click => self.m_click.as_ref(),
            ActionType::Purchase => self.m_purchase.as_ref(),
        }
    }

    fn action_matrix_mut(&mut self, action: ActionType) -> Option<&mut Matrix> {
        match action {
            ActionType::Click => self.m_click.as_mut(),
            ActionType::Purchase => self.m_purchase.as_mut(),
        }
    }
}

fn fill_uniform<R: Rng + ?Sized>(m: &mut Matrix, bound: f64, rng: &mut R) {
    let dist = Uniform::new_inclusive(-bound, bound);
    for v in m.as_mut_slice() {
        *v = dist.sample(rng);
    }
}

fn gru_tensors<'a>(prefix: Prefix, g: &'a GruWeights, out: &mut Vec<(&'static str, &'a Matrix)>) {
    let names = prefix.names();
    out.extend([
        (names[0], &g.w_z),
        (names[1], &g.u_z),
        (names[2], &g.w_r),
        (names[3], &g.u_r),
        (names[4], &g.w_h),
        (names[5], &g.u_h),
    ]);
}

fn gru_tensors_mut<'a>(
    prefix: Prefix,
    g: &'a mut GruWeights,
    out: &mut Vec<(&'static str, &'a mut Matrix)>,
) {
    let names = prefix.names();
    out.extend([
        (names[0], &mut g.w_z),
        (names[1], &mut g.u_z),
        (names[2], &mut g.w_r),
        (names[3], &mut g.u_r),
        (names[4], &mut g.w_h),
        (names[5], &mut g.u_h),
    ]);
}

#[derive(Clone, Copy)]
enum Prefix {
    Encoder,
    Decoder,
}

impl Prefix {
    fn names(self) -> [&'static str; 6] {
        match self {
            Prefix::Encoder => [
                "encoder.W_z",
                "encoder.U_z",
                "encoder.W_r",
                "encoder.U_r",
                "encoder.W_h",
                "encoder.U_h",
            ],
            Prefix::Decoder => [
                "decoder.W_z",
                "decoder.U_z",
                "decoder.W_r",
                "decoder.U_r",
                "decoder.W_h",
                "decoder.U_h",
            ],
        }
    }
}

impl ParamTensors for ModelParams {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = Vec::with_capacity(24);
        gru_tensors(Prefix::Encoder, &self.encoder, &mut out);
        if let Some(t) = &self.time_gate {
            out.push(("time_gate.W_t", &t.w_t));
            out.push(("time_gate.Q_t", &t.q_t));
        }
        if let Some(a) = &self.attention {
            out.push(("attention.W_a", &a.w_a));
            out.push(("attention.U_a", &a.u_a));
            out.push(("attention.v", &a.v));
        }
        if let Some(d) = &self.decoder {
            gru_tensors(Prefix::Decoder, d, &mut out);
        }
        out.push(("output.V", &self.output));
        if let Some(e) = &self.embed {
            out.push(("M_embed", e));
        }
        if let Some(m) = &self.m_click {
            out.push(("M_click", m));
        }
        if let Some(m) = &self.m_purchase {
            out.push(("M_purchase", m));
        }
        if let Some(s) = &self.initial_state {
            out.push(("s_0", s));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = Vec::with_capacity(24);
        gru_tensors_mut(Prefix::Encoder, &mut self.encoder, &mut out);
        if let Some(t) = &mut self.time_gate {
            out.push(("time_gate.W_t", &mut t.w_t));
            out.push(("time_gate.Q_t", &mut t.q_t));
        }
        if let Some(a) = &mut self.attention {
            out.push(("attention.W_a", &mut a.w_a));
            out.push(("attention.U_a", &mut a.u_a));
            out.push(("attention.v", &mut a.v));
        }
        if let Some(d) = &mut self.decoder {
            gru_tensors_mut(Prefix::Decoder, d, &mut out);
        }
        out.push(("output.V", &mut self.output));
        if let Some(e) = &mut self.embed {
            out.push(("M_embed", e));
        }
        if let Some(m) = &mut self.m_click {
            out.push(("M_click", m));
        }
        if let Some(m) = &mut self.m_purchase {
            out.push(("M_purchase", m));
        }
        if let Some(s) = &mut self.initial_state {
            out.push(("s_0", s));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

/// Representation of brand `k` with feature vector `features` (`v_k`).
pub fn brand_repr(
    k: usize,
    features: &[f64],
    params: &ModelParams,
    mode: BrandRepr,
) -> Result<Vec<f64>> {
    match mode {
        BrandRepr::Features => Ok(features.to_vec()),
        BrandRepr::OneHot | BrandRepr::Combined => {
            let embed = params
                .embed
                .as_ref()
                .ok_or_else(|| Error::Contract("model has no brand embedding".into()))?;
            if k >= embed.cols() {
                return Err(Error::Vocabulary(format!("index {k} of {}", embed.cols())));
            }
            let mut r = vec![0.0; embed.rows()];
            embed.column_into(k, &mut r);
            if mode == BrandRepr::Combined {
                if features.len() != r.len() {
                    return Err(Error::Contract(format!(
                        "feature vector is {}-wide, embedding is {}",
                        features.len(),
                        r.len()
                    )));
                }
                axpy(1.0, features, &mut r);
            }
            Ok(r)
        }
    }
}

/// Step input from a brand representation and its action.
///
/// With action matrices: `M_action · r`. Without: `[r, one_hot(action)]`.
pub fn action_transform(r: &[f64], action: ActionType, params: &ModelParams) -> Vec<f64> {
    match params.action_matrix(action) {
        Some(m) => m.matvec(r),
        None => {
            let mut x = Vec::with_capacity(r.len() + 2);
            x.extend_from_slice(r);
            x.extend(action.one_hot());
            x
        }
    }
}

/// Everything one GRU step needs for its backward pass.
#[derive(Debug, Clone)]
struct GruCache {
    x: Vec<f64>,
    s_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    /// `r ⊙ s_prev`
    rs: Vec<f64>,
    /// candidate `tanh(W_h x + U_h (r ⊙ s_prev))`
    c: Vec<f64>,
    gate: Option<GateCache>,
    s: Vec<f64>,
}

#[derive(Debug, Clone)]
struct GateCache {
    dt: f64,
    /// `σ(Q_t Δt)`
    u: Vec<f64>,
    /// `T`
    t: Vec<f64>,
}

fn gru_forward(
    w: &GruWeights,
    gate: Option<(&TimeGate, f64)>,
    x: Vec<f64>,
    s_prev: Vec<f64>,
) -> GruCache {
    let h = w.hidden();
    let mut z = vec![0.0; h];
    let mut r = vec![0.0; h];
    let mut c = vec![0.0; h];
    w.w_z.matvec_into(&x, &mut z);
    w.u_z.matvec_acc(&s_prev, &mut z);
    z.iter_mut().for_each(|v| *v = sigmoid(*v));
    w.w_r.matvec_into(&x, &mut r);
    w.u_r.matvec_acc(&s_prev, &mut r);
    r.iter_mut().for_each(|v| *v = sigmoid(*v));
    let rs: Vec<f64> = r.iter().zip(&s_prev).map(|(a, b)| a * b).collect();
    w.w_h.matvec_into(&x, &mut c);
    w.u_h.matvec_acc(&rs, &mut c);
    c.iter_mut().for_each(|v| *v = v.tanh());

    let gate = gate.map(|(tg, dt)| {
        let u: Vec<f64> = tg.q_t.as_slice().iter().map(|q| sigmoid(q * dt)).collect();
        let mut t = u.clone();
        tg.w_t.matvec_acc(&x, &mut t);
        t.iter_mut().for_each(|v| *v = sigmoid(*v));
        GateCache { dt, u, t }
    });
    let s = (0..h)
        .map(|i| {
            let cand = match &gate {
                Some(g) => g.t[i] * c[i],
                None => c[i],
            };
            z[i] * cand + (1.0 - z[i]) * s_prev[i]
        })
        .collect();
    GruCache {
        x,
        s_prev,
        z,
        r,
        rs,
        c,
        gate,
        s,
    }
}

/// Backward of one step. Accumulates weight gradients and writes `dx`, `ds_prev`.
fn gru_backward(
    w: &GruWeights,
    gate: Option<&TimeGate>,
    cache: &GruCache,
    ds: &[f64],
    gw: &mut GruWeights,
    ggate: Option<&mut TimeGate>,
    dx: &mut [f64],
    ds_prev: &mut [f64],
) {
    let h = w.hidden();
    let mut da_z = vec![0.0; h];
    let mut da_r = vec![0.0; h];
    let mut da_c = vec![0.0; h];
    let mut da_t = vec![0.0; h];
    for i in 0..h {
        let z = cache.z[i];
        let c = cache.c[i];
        let t = cache.gate.as_ref().map_or(1.0, |g| g.t[i]);
        da_z[i] = ds[i] * (t * c - cache.s_prev[i]) * z * (1.0 - z);
        da_c[i] = ds[i] * z * t * (1.0 - c * c);
        if cache.gate.is_some() {
            da_t[i] = ds[i] * z * c * t * (1.0 - t);
        }
        ds_prev[i] = ds[i] * (1.0 - z);
    }
    // through U_h (r ⊙ s_prev)
    let mut drs = vec![0.0; h];
    w.u_h.matvec_t_acc(&da_c, &mut drs);
    for i in 0..h {
        let r = cache.r[i];
        da_r[i] = drs[i] * cache.s_prev[i] * r * (1.0 - r);
        ds_prev[i] += drs[i] * r;
    }
    w.u_z.matvec_t_acc(&da_z, ds_prev);
    w.u_r.matvec_t_acc(&da_r, ds_prev);

    dx.iter_mut().for_each(|v| *v = 0.0);
    w.w_z.matvec_t_acc(&da_z, dx);
    w.w_r.matvec_t_acc(&da_r, dx);
    w.w_h.matvec_t_acc(&da_c, dx);

    gw.w_z.outer_acc(&da_z, &cache.x);
    gw.u_z.outer_acc(&da_z, &cache.s_prev);
    gw.w_r.outer_acc(&da_r, &cache.x);
    gw.u_r.outer_acc(&da_r, &cache.s_prev);
    gw.w_h.outer_acc(&da_c, &cache.x);
    gw.u_h.outer_acc(&da_c, &cache.rs);

    if let (Some(tg), Some(gg), Some(gc)) = (gate, ggate, &cache.gate) {
        tg.w_t.matvec_t_acc(&da_t, dx);
        gg.w_t.outer_acc(&da_t, &cache.x);
        for i in 0..h {
            let u = gc.u[i];
            gg.q_t.as_mut_slice()[i] += da_t[i] * u * (1.0 - u) * gc.dt;
        }
    }
}

/// `s = z ⊙ tanh(W_h x + U_h (r ⊙ s_prev)) + (1 − z) ⊙ s_prev`.
pub fn gru_step(x: &[f64], s_prev: &[f64], weights: &GruWeights) -> Result<Vec<f64>> {
    check_gru_shapes(x, s_prev, weights)?;
    Ok(gru_forward(weights, None, x.to_vec(), s_prev.to_vec()).s)
}

/// GRU step whose candidate is also filtered by `T = σ(W_t x + σ(Q_t Δt))`.
///
/// `delta_t` is used as given; the model converts seconds to days before
/// calling this when `time_in_days` is set.
pub fn time_gated_gru_step(
    x: &[f64],
    s_prev: &[f64],
    delta_t: f64,
    weights: &GruWeights,
    gate: &TimeGate,
) -> Result<Vec<f64>> {
    check_gru_shapes(x, s_prev, weights)?;
    if !(delta_t >= 0.0) {
        return Err(Error::Contract(format!("delta_t must be >= 0, got {delta_t}")));
    }
    if gate.w_t.shape() != weights.w_z.shape() || gate.q_t.shape() != (weights.hidden(), 1) {
        return Err(Error::Contract("time gate shapes do not match the cell".into()));
    }
    Ok(gru_forward(weights, Some((gate, delta_t)), x.to_vec(), s_prev.to_vec()).s)
}

fn check_gru_shapes(x: &[f64], s_prev: &[f64], w: &GruWeights) -> Result<()> {
    if x.len() != w.input() || s_prev.len() != w.hidden() {
        return Err(Error::Contract(format!(
            "GRU cell is {}→{}, got input {} and state {}",
            w.input(),
            w.hidden(),
            x.len(),
            s_prev.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct AttentionCache {
    s_prev: Vec<f64>,
    /// `tanh(W_a s + U_a h_j)` per position
    hidden: Vec<Vec<f64>>,
    alpha: Vec<f64>,
}

fn attend_forward(att: &Attention, s_prev: &[f64], h: &[Vec<f64>]) -> (AttentionCache, Vec<f64>) {
    let a = att.w_a.rows();
    let mut base = vec![0.0; a];
    att.w_a.matvec_into(s_prev, &mut base);
    let mut scores = Vec::with_capacity(h.len());
    let mut hidden = Vec::with_capacity(h.len());
    for hj in h {
        let mut t = base.clone();
        att.u_a.matvec_acc(hj, &mut t);
        t.iter_mut().for_each(|v| *v = v.tanh());
        scores.push(crate::nn::dot(att.v.as_slice(), &t));
        hidden.push(t);
    }
    let mut alpha = vec![0.0; h.len()];
    softmax_into(&scores, &mut alpha);
    let mut g = vec![0.0; h[0].len()];
    for (aj, hj) in alpha.iter().zip(h) {
        axpy(*aj, hj, &mut g);
    }
    (
        AttentionCache {
            s_prev: s_prev.to_vec(),
            hidden,
            alpha,
        },
        g,
    )
}

/// Attention weights over `h` and the glimpse `g = Σ α_j h_j`.
pub fn attend(s_prev: &[f64], h: &[Vec<f64>], att: &Attention) -> Result<(Vec<f64>, Vec<f64>)> {
    if h.is_empty() {
        return Err(Error::Contract("attention over an empty sequence".into()));
    }
    if s_prev.len() != att.w_a.cols() || h.iter().any(|hj| hj.len() != att.u_a.cols()) {
        return Err(Error::Contract("attention input widths do not match".into()));
    }
    let (cache, g) = attend_forward(att, s_prev, h);
    Ok((cache.alpha, g))
}

fn attend_backward(
    att: &Attention,
    cache: &AttentionCache,
    h: &[Vec<f64>],
    dg: &[f64],
    gatt: &mut Attention,
    dh: &mut [Vec<f64>],
    ds_prev: &mut [f64],
) {
    let dalpha: Vec<f64> = h.iter().map(|hj| crate::nn::dot(dg, hj)).collect();
    let mean: f64 = cache.alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
    let a = att.w_a.rows();
    let mut dpre_sum = vec![0.0; a];
    for j in 0..h.len() {
        axpy(cache.alpha[j], dg, &mut dh[j]);
        let de = cache.alpha[j] * (dalpha[j] - mean);
        if de == 0.0 {
            continue;
        }
        let t = &cache.hidden[j];
        axpy(de, t, gatt.v.as_mut_slice());
        let dpre: Vec<f64> = t
            .iter()
            .zip(att.v.as_slice())
            .map(|(ti, vi)| de * vi * (1.0 - ti * ti))
            .collect();
        gatt.u_a.outer_acc(&dpre, &h[j]);
        att.u_a.matvec_t_acc(&dpre, &mut dh[j]);
        axpy(1.0, &dpre, &mut dpre_sum);
    }
    gatt.w_a.outer_acc(&dpre_sum, &cache.s_prev);
    att.w_a.matvec_t_acc(&dpre_sum, ds_prev);
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

#[derive(Debug, Clone)]
struct StepCache {
    brand: usize,
    action: ActionType,
    /// brand representation before the action transform
    repr: Vec<f64>,
    gru: GruCache,
}

#[derive(Debug, Clone)]
struct DecoderCache {
    attention: AttentionCache,
    gru: GruCache,
}

/// Activations kept by [`Model::forward`] for [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    key: InstanceKey,
    steps: Vec<StepCache>,
    decoder: Option<DecoderCache>,
    /// softmax output (2 entries with attention, N without)
    probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct InstanceKey {
    query: usize,
    brands: Vec<usize>,
    label: u8,
}

impl InstanceKey {
    fn of(inst: &EncodedInstance) -> Self {
        InstanceKey {
            query: inst.query,
            brands: inst.history.iter().map(|s| s.brand).collect(),
            label: inst.label,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub p: f64,
    pub cache: ForwardCache,
}

impl ForwardCache {
    /// Attention weights over the history (attention models only).
    pub fn attention_weights(&self) -> Option<&[f64]> {
        self.decoder.as_ref().map(|d| d.attention.alpha.as_slice())
    }

    /// Encoder states `h_1..h_L`.
    pub fn encoder_states(&self) -> impl Iterator<Item = &[f64]> {
        self.steps.iter().map(|s| s.gru.s.as_slice())
    }

    pub fn output_distribution(&self) -> &[f64] {
        &self.probs
    }
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        let expected = ModelParams::zeros(&config)?;
        let ok = expected.tensors().len() == params.tensors().len()
            && expected
                .tensors()
                .iter()
                .zip(params.tensors())
                .all(|((n1, a), (n2, b))| *n1 == n2 && a.shape() == b.shape());
        if !ok {
            return Err(Error::Contract("parameters do not match the model config".into()));
        }
        Ok(Model { config, params })
    }

    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let params = ModelParams::init(&config, rng)?;
        Ok(Model { config, params })
    }

    fn time_value(&self, seconds: f64) -> f64 {
        if self.config.time_in_days {
            seconds / SECONDS_PER_DAY
        } else {
            seconds
        }
    }

    fn check_instance(&self, inst: &EncodedInstance, table: &BrandTable) -> Result<()> {
        let n = self.config.brand_vocab_size;
        if table.vocab.len() != n || table.feature_dim() != self.config.feature_dim {
            return Err(Error::Contract(format!(
                "brand table is {}×{}, model expects {}×{}",
                table.vocab.len(),
                table.feature_dim(),
                n,
                self.config.feature_dim
            )));
        }
        if inst.history.is_empty() {
            return Err(Error::Contract("instance has an empty history".into()));
        }
        if inst.query >= n || inst.history.iter().any(|s| s.brand >= n) {
            return Err(Error::Vocabulary(format!("brand index out of range 0..{n}")));
        }
        if let Some(s) = inst.history.iter().find(|s| !(s.delta_t >= 0.0)) {
            return Err(Error::Contract(format!("delta_t must be >= 0, got {}", s.delta_t)));
        }
        Ok(())
    }

    fn initial_state(&self) -> Vec<f64> {
        match &self.params.initial_state {
            Some(s) => s.as_slice().to_vec(),
            None => vec![0.0; self.config.hidden_size],
        }
    }

    /// Probability that the user acts on the query brand, plus the activations
    /// needed by [`Model::backward`].
    pub fn forward(&self, inst: &EncodedInstance, table: &BrandTable) -> Result<Forward> {
        self.check_instance(inst, table)?;
        let cfg = &self.config;
        let p = &self.params;
        let gate = p.time_gate.as_ref();

        // Attention models start the encoder at zero and apply s_0 to the
        // decoder; the GRU baseline applies s_0 to its only GRU.
        let mut state = if cfg.use_attention {
            vec![0.0; cfg.hidden_size]
        } else {
            self.initial_state()
        };
        let mut steps = Vec::with_capacity(inst.history.len());
        for step in &inst.history {
            let repr = brand_repr(step.brand, table.features_of(step.brand), p, cfg.brand_repr)?;
            let mut x = action_transform(&repr, step.action, p);
            let dt = self.time_value(step.delta_t);
            if !cfg.use_time_gate {
                x.push(dt);
            }
            let gru = gru_forward(&p.encoder, gate.map(|g| (g, dt)), x, state);
            state = gru.s.clone();
            steps.push(StepCache {
                brand: step.brand,
                action: step.action,
                repr,
                gru,
            });
        }

        let (decoder, probs, p_label1) = if cfg.use_attention {
            let att = p.attention.as_ref().expect("attention params");
            let dec = p.decoder.as_ref().expect("decoder params");
            let s0 = self.initial_state();
            let h: Vec<Vec<f64>> = steps.iter().map(|s| s.gru.s.clone()).collect();
            let (attention, g) = attend_forward(att, &s0, &h);
            let mut x = brand_repr(inst.query, table.features_of(inst.query), p, cfg.brand_repr)?;
            x.extend_from_slice(&g);
            let gru = gru_forward(dec, None, x, s0);
            let mut logits = vec![0.0; 2];
            p.output.matvec_into(&gru.s, &mut logits);
            let mut probs = vec![0.0; 2];
            softmax_into(&logits, &mut probs);
            let p1 = probs[1];
            (
                Some(DecoderCache { attention, gru }),
                probs,
                p1,
            )
        } else {
            let mut logits = vec![0.0; cfg.brand_vocab_size];
            p.output.matvec_into(&state, &mut logits);
            let mut probs = vec![0.0; cfg.brand_vocab_size];
            softmax_into(&logits, &mut probs);
            let p1 = probs[inst.query];
            (None, probs, p1)
        };

        Ok(Forward {
            p: p_label1,
            cache: ForwardCache {
                key: InstanceKey::of(inst),
                steps,
                decoder,
                probs,
            },
        })
    }

    pub fn predict(&self, inst: &EncodedInstance, table: &BrandTable) -> Result<f64> {
        Ok(self.forward(inst, table)?.p)
    }

    /// Weighted log loss of one instance at the current parameters.
    pub fn loss(&self, inst: &EncodedInstance, table: &BrandTable, negative_weight: f64) -> Result<f64> {
        let p = self.predict(inst, table)?;
        Ok(instance_loss(p, inst.label, negative_weight))
    }

    /// Accumulates the exact gradient of the instance loss into `grads` and
    /// returns the loss.
    ///
    /// The output-layer gradient is taken on the logits, so it stays finite
    /// even when `p` saturates beyond the loss clamp.
    pub fn backward(
        &self,
        inst: &EncodedInstance,
        table: &BrandTable,
        fwd: &Forward,
        negative_weight: f64,
        grads: &mut ModelParams,
    ) -> Result<f64> {
        let cache = &fwd.cache;
        if cache.key != InstanceKey::of(inst) {
            return Err(Error::Contract("forward cache belongs to a different instance".into()));
        }
        if table.feature_dim() != self.config.feature_dim {
            return Err(Error::Contract("brand table does not match the model".into()));
        }
        let cfg = &self.config;
        let p = &self.params;
        let h = cfg.hidden_size;
        let w = negative_weight;
        let label = inst.label;
        let loss = instance_loss(fwd.p, label, w);

        // dL/dlogits
        let probs = &cache.probs;
        let dlogits: Vec<f64> = if cfg.use_attention {
            let p1 = probs[1];
            if label == 1 {
                vec![1.0 - p1, p1 - 1.0]
            } else {
                vec![-w * p1, w * p1]
            }
        } else {
            let q = inst.query;
            if label == 1 {
                probs
                    .iter()
                    .enumerate()
                    .map(|(i, &pi)| if i == q { pi - 1.0 } else { pi })
                    .collect()
            } else {
                let pq = probs[q];
                let rest: f64 = probs
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != q)
                    .map(|(_, v)| v)
                    .sum();
                probs
                    .iter()
                    .enumerate()
                    .map(|(i, &pi)| {
                        if i == q {
                            w * pq
                        } else if rest > 0.0 {
                            -w * pq * pi / rest
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
        };

        // gradient flowing into each encoder state h_j
        let n_steps = cache.steps.len();
        let mut dh = vec![vec![0.0; h]; n_steps];
        let mut ds0 = vec![0.0; h];

        if let Some(dec) = &cache.decoder {
            let att = p.attention.as_ref().expect("attention params");
            let dec_w = p.decoder.as_ref().expect("decoder params");
            grads.output.outer_acc(&dlogits, &dec.gru.s);
            let mut ds1 = vec![0.0; h];
            p.output.matvec_t_acc(&dlogits, &mut ds1);

            let mut dx = vec![0.0; dec_w.input()];
            let mut ds_dec0 = vec![0.0; h];
            gru_backward(
                dec_w,
                None,
                &dec.gru,
                &ds1,
                grads.decoder.as_mut().expect("decoder grads"),
                None,
                &mut dx,
                &mut ds_dec0,
            );
            let d = cfg.feature_dim;
            let (dquery, dg) = dx.split_at(d);
            self.repr_backward(inst.query, dquery, grads);

            let hs: Vec<Vec<f64>> = cache.steps.iter().map(|s| s.gru.s.clone()).collect();
            attend_backward(
                att,
                &dec.attention,
                &hs,
                dg,
                grads.attention.as_mut().expect("attention grads"),
                &mut dh,
                &mut ds_dec0,
            );
            axpy(1.0, &ds_dec0, &mut ds0);
        } else {
            let last = &cache.steps[n_steps - 1].gru.s;
            grads.output.outer_acc(&dlogits, last);
            p.output.matvec_t_acc(&dlogits, &mut dh[n_steps - 1]);
        }

        // back through time
        let gate = p.time_gate.as_ref();
        let mut carry = vec![0.0; h];
        let mut dx = vec![0.0; p.encoder.input()];
        let mut ds_prev = vec![0.0; h];
        for (j, step) in cache.steps.iter().enumerate().rev() {
            let mut ds = std::mem::take(&mut dh[j]);
            axpy(1.0, &carry, &mut ds);
            gru_backward(
                &p.encoder,
                gate,
                &step.gru,
                &ds,
                &mut grads.encoder,
                grads.time_gate.as_mut(),
                &mut dx,
                &mut ds_prev,
            );
            std::mem::swap(&mut carry, &mut ds_prev);

            let d = cfg.feature_dim;
            let drepr: Vec<f64> = match p.action_matrix(step.action) {
                Some(m) => {
                    let da = &dx[..d];
                    grads
                        .action_matrix_mut(step.action)
                        .expect("action matrix grads")
                        .outer_acc(da, &step.repr);
                    let mut dr = vec![0.0; d];
                    m.matvec_t_acc(da, &mut dr);
                    dr
                }
                None => dx[..d].to_vec(),
            };
            self.repr_backward(step.brand, &drepr, grads);
        }
        if !cfg.use_attention {
            axpy(1.0, &carry, &mut ds0);
        }
        if let Some(gs0) = grads.initial_state.as_mut() {
            axpy(1.0, &ds0, gs0.as_mut_slice());
        }
        Ok(loss)
    }

    fn repr_backward(&self, brand: usize, drepr: &[f64], grads: &mut ModelParams) {
        if self.config.brand_repr.uses_embedding() {
            grads
                .embed
                .as_mut()
                .expect("embedding grads")
                .add_to_column(brand, drepr);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{EncodedStep, Vocabulary};
    use crate::nn::finite_diff_check;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn toy_table(n: usize, d: usize, seed: u64) -> BrandTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<String> = (0..n).map(|i| format!("b{i}")).collect();
        let features: BTreeMap<String, Vec<f64>> = ids
            .iter()
            .map(|id| (id.clone(), (0..d).map(|_| rng.gen_range(0.0..1.0)).collect()))
            .collect();
        BrandTable::new(Vocabulary::new(ids), &features, d).unwrap()
    }

    fn toy_instance(n: usize, len: usize, label: u8, seed: u64) -> EncodedInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncodedInstance {
            history: (0..len)
                .map(|_| EncodedStep {
                    brand: rng.gen_range(0..n),
                    action: if rng.gen_bool(0.3) {
                        ActionType::Purchase
                    } else {
                        ActionType::Click
                    },
                    delta_t: rng.gen_range(60.0..400_000.0),
                })
                .collect(),
            query: rng.gen_range(0..n),
            label,
        }
    }

    fn all_configs(n: usize, d: usize, hidden: usize) -> Vec<ModelConfig> {
        let mut out = vec![Variant::Gru.config(n, d, hidden)];
        for bits in 0..8u8 {
            let mut c = Variant::AttentionGru.config(n, d, hidden);
            c.brand_repr = if bits & 1 != 0 { BrandRepr::Combined } else { BrandRepr::Features };
            c.use_action_matrices = bits & 2 != 0;
            c.use_time_gate = bits & 4 != 0;
            out.push(c);
        }
        out
    }

    fn gradient_error(config: ModelConfig, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::init(config, &mut rng).unwrap();
        gradient_error_of(model, seed)
    }

    fn gradient_error_of(model: Model, seed: u64) -> f64 {
        let config = model.config;
        let n = config.brand_vocab_size;
        let table = toy_table(n, config.feature_dim, seed);
        let inst = toy_instance(n, 4, (seed % 2) as u8, seed + 100);
        let fwd = model.forward(&inst, &table).unwrap();
        let mut grads = model.params.zeros_like();
        model.backward(&inst, &table, &fwd, 0.5, &mut grads).unwrap();
        let report = finite_diff_check(
            &model.params,
            |p| {
                let m = Model { config, params: p.clone() };
                m.loss(&inst, &table, 0.5).unwrap()
            },
            &grads,
            1e-5,
        )
        .unwrap();
        report.max_rel_error
    }

    /// Entry-wise check that tolerates finite-difference noise on entries
    /// whose gradient is itself below ~1e-7.
    fn assert_gradients_close(model: &Model, seed: u64) {
        let config = model.config;
        let table = toy_table(config.brand_vocab_size, config.feature_dim, seed);
        let inst = toy_instance(config.brand_vocab_size, 4, 0, seed + 100);
        let fwd = model.forward(&inst, &table).unwrap();
        let mut grads = model.params.zeros_like();
        model.backward(&inst, &table, &fwd, 0.5, &mut grads).unwrap();
        let mut probe = model.clone();
        let h = 1e-5;
        for (t, (name, g)) in grads.tensors().into_iter().enumerate() {
            for i in 0..g.len() {
                let orig = probe.params.tensors()[t].1.as_slice()[i];
                probe.params.tensors_mut()[t].1.as_mut_slice()[i] = orig + h;
                let plus = probe.loss(&inst, &table, 0.5).unwrap();
                probe.params.tensors_mut()[t].1.as_mut_slice()[i] = orig - h;
                let minus = probe.loss(&inst, &table, 0.5).unwrap();
                probe.params.tensors_mut()[t].1.as_mut_slice()[i] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = g.as_slice()[i];
                let abs = (a - numeric).abs();
                let rel = abs / (a.abs() + numeric.abs()).max(1e-8);
                assert!(
                    rel <= 1e-4 || abs <= 1e-10,
                    "{config:?} {name}[{i}]: analytic {a:e}, numeric {numeric:e}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for config in all_configs(5, 6, 8) {
            for seed in 0..2 {
                let err = gradient_error(config, seed);
                assert!(err <= 1e-4, "{config:?} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn gradients_with_learned_initial_state() {
        for mut config in all_configs(5, 6, 8) {
            config.learn_initial_state = true;
            config.brand_repr = BrandRepr::OneHot;
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut model = Model::init(config, &mut rng).unwrap();
            // the default ±0.01 embedding leaves gradients near the
            // finite-difference noise floor
            let embed = model.params.embed.as_mut().unwrap();
            for v in embed.as_mut_slice() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let s0 = model.params.initial_state.as_mut().unwrap();
            for v in s0.as_mut_slice() {
                *v = rng.gen_range(-0.5..0.5);
            }
            if let Some(att) = model.params.attention.as_mut() {
                for v in att.w_a.as_mut_slice().iter_mut().chain(att.v.as_mut_slice()) {
                    *v = rng.gen_range(-2.0..2.0);
                }
            }
            assert_gradients_close(&model, 3);
        }
    }

    #[test]
    fn zero_weights_give_half() {
        let table = toy_table(4, 6, 1);
        let inst = toy_instance(4, 10, 1, 2);
        for v in [Variant::AttentionGru, Variant::AttentionGru3m, Variant::NoMod2] {
            let config = v.config(4, 6, 5);
            let model = Model::new(config, ModelParams::zeros(&config).unwrap()).unwrap();
            assert_eq!(model.predict(&inst, &table).unwrap(), 0.5);
        }
    }

    #[test]
    fn brand_repr_modes() {
        let config = Variant::AttentionGru3m.config(2, 3, 4);
        let mut params = ModelParams::zeros(&config).unwrap();
        let v = [0.1, 0.2, 0.3];
        assert_eq!(brand_repr(1, &v, &params, BrandRepr::Combined).unwrap(), v.to_vec());
        let embed = params.embed.as_mut().unwrap();
        *embed = Matrix::from_vec(3, 2, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]).unwrap();
        assert_eq!(brand_repr(0, &[0.0; 3], &params, BrandRepr::Combined).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(brand_repr(1, &v, &params, BrandRepr::OneHot).unwrap(), vec![4.0, 5.0, 6.0]);
        assert_eq!(brand_repr(1, &v, &params, BrandRepr::Features).unwrap(), v.to_vec());
        assert!(matches!(
            brand_repr(2, &v, &params, BrandRepr::OneHot),
            Err(Error::Vocabulary(_))
        ));
    }

    #[test]
    fn action_transform_cases() {
        let config = Variant::AttentionGru3m.config(2, 2, 4);
        let mut params = ModelParams::zeros(&config).unwrap();
        params.m_click = Some(Matrix::identity(2));
        params.m_purchase = Some(Matrix::zeros(2, 2));
        assert_eq!(action_transform(&[3.0, 4.0], ActionType::Click, &params), vec![3.0, 4.0]);
        assert_eq!(action_transform(&[3.0, 4.0], ActionType::Purchase, &params), vec![0.0, 0.0]);
        params.m_purchase = Some(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(action_transform(&[1.0, 2.0], ActionType::Purchase, &params), vec![5.0, 11.0]);

        let plain = ModelParams::zeros(&Variant::AttentionGru.config(2, 2, 4)).unwrap();
        assert_eq!(
            action_transform(&[3.0, 4.0], ActionType::Purchase, &plain),
            vec![3.0, 4.0, 1.0, 0.0]
        );
    }

    fn scalar_cell(wz: f64, uz: f64, wr: f64, ur: f64, wh: f64, uh: f64) -> GruWeights {
        let m = |v| Matrix::from_vec(1, 1, vec![v]).unwrap();
        GruWeights {
            w_z: m(wz),
            u_z: m(uz),
            w_r: m(wr),
            u_r: m(ur),
            w_h: m(wh),
            u_h: m(uh),
        }
    }

    #[test]
    fn gru_step_cases() {
        let zero = GruWeights::zeros(3, 2);
        assert_eq!(gru_step(&[1.0, -1.0], &[0.0; 3], &zero).unwrap(), vec![0.0; 3]);
        assert_eq!(gru_step(&[1.0, -1.0], &[1.0; 3], &zero).unwrap(), vec![0.5; 3]);

        // scalar recurrence evaluated by hand
        let w = scalar_cell(0.1, 0.2, 0.3, 0.4, 0.5, 0.6);
        let (x, s) = (1.0f64, 0.5f64);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let z = sig(0.1 * x + 0.2 * s);
        let r = sig(0.3 * x + 0.4 * s);
        let c = (0.5 * x + 0.6 * r * s).tanh();
        let expected = z * c + (1.0 - z) * s;
        assert_abs_diff_eq!(gru_step(&[x], &[s], &w).unwrap()[0], expected, epsilon = 1e-15);
        assert!(gru_step(&[1.0, 2.0], &[s], &w).is_err());
    }

    #[test]
    fn time_gate_cases() {
        let zero = GruWeights::zeros(2, 2);
        let gate = TimeGate {
            w_t: Matrix::zeros(2, 2),
            q_t: Matrix::zeros(2, 1),
        };
        let s = time_gated_gru_step(&[1.0, 2.0], &[1.0, -1.0], 5.0, &zero, &gate).unwrap();
        assert_eq!(s, vec![0.5, -0.5]);
        // with Q_t = 0 the gap does not matter
        let w = scalar_cell(0.3, -0.2, 0.1, 0.4, 0.9, 0.5);
        let g = TimeGate {
            w_t: Matrix::from_vec(1, 1, vec![0.7]).unwrap(),
            q_t: Matrix::zeros(1, 1),
        };
        let a = time_gated_gru_step(&[0.4], &[0.2], 1.0, &w, &g).unwrap();
        let b = time_gated_gru_step(&[0.4], &[0.2], 1e6, &w, &g).unwrap();
        assert_eq!(a, b);
        assert!(time_gated_gru_step(&[0.4], &[0.2], -1.0, &w, &g).is_err());

        // Q_t = 1, gap 0 vs 10: gate input sigma(0)=0.5 vs sigma(10)
        let g = TimeGate {
            w_t: Matrix::from_vec(1, 1, vec![0.2]).unwrap(),
            q_t: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (x, s) = (0.4f64, 0.2f64);
        let z = sig(0.3 * x - 0.2 * s);
        let r = sig(0.1 * x + 0.4 * s);
        let c = (0.9 * x + 0.5 * r * s).tanh();
        for dt in [0.0, 10.0] {
            let t = sig(0.2 * x + sig(dt));
            let expected = z * t * c + (1.0 - z) * s;
            let got = time_gated_gru_step(&[x], &[s], dt, &w, &g).unwrap()[0];
            assert_abs_diff_eq!(got, expected, epsilon = 1e-15);
        }
        let s0 = time_gated_gru_step(&[x], &[s], 0.0, &w, &g).unwrap()[0];
        let s10 = time_gated_gru_step(&[x], &[s], 10.0, &w, &g).unwrap()[0];
        assert!(s10 > s0);
        assert_abs_diff_eq!(sig(sig(0.0)), 0.622_459_3, epsilon = 1e-7);
    }

    #[test]
    fn attention_cases() {
        let att = Attention {
            w_a: Matrix::zeros(2, 2),
            u_a: Matrix::from_vec(2, 2, vec![0.3, -0.1, 0.7, 0.2]).unwrap(),
            v: Matrix::column_vector(&[1.0, -0.5]),
        };
        let h = vec![vec![0.2, 0.4]; 3];
        let (alpha, g) = attend(&[0.1, 0.1], &h, &att).unwrap();
        for a in &alpha {
            assert_abs_diff_eq!(*a, 1.0 / 3.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(g[0], 0.2, epsilon = 1e-15);

        let (alpha, g) = attend(&[0.0, 0.0], &[vec![0.3, -0.9]], &att).unwrap();
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(g, vec![0.3, -0.9]);

        // one attention unit: score_j = v * tanh(u * h_j). Choose v, u so the
        // scores are ln 2 and 0.
        let target = 2f64.ln();
        let att = Attention {
            w_a: Matrix::zeros(1, 1),
            u_a: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            v: Matrix::column_vector(&[1.0]),
        };
        let h1 = target.atanh();
        let (alpha, g) = attend(&[0.0], &[vec![h1], vec![0.0]], &att).unwrap();
        assert_abs_diff_eq!(alpha[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(alpha[1], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[0], 2.0 * h1 / 3.0, epsilon = 1e-12);
        assert!(attend(&[0.0], &[], &att).is_err());
    }

    #[test]
    fn backward_is_bounded_at_saturation() {
        let config = Variant::AttentionGru.config(3, 4, 4);
        let mut params = ModelParams::zeros(&config).unwrap();
        // force p -> 1 through a huge output weight on a saturated state
        params.decoder.as_mut().unwrap().w_z.fill(50.0);
        params.decoder.as_mut().unwrap().w_h.fill(50.0);
        params.output = Matrix::from_vec(2, 4, vec![-1e3, -1e3, -1e3, -1e3, 1e3, 1e3, 1e3, 1e3]).unwrap();
        let model = Model::new(config, params).unwrap();
        let table = toy_table(3, 4, 9);
        let mut inst = toy_instance(3, 10, 1, 4);
        let fwd = model.forward(&inst, &table).unwrap();
        assert_eq!(fwd.p, 1.0);
        for label in [1, 0] {
            inst.label = label;
            let fwd = model.forward(&inst, &table).unwrap();
            let mut grads = model.params.zeros_like();
            let loss = model.backward(&inst, &table, &fwd, 1.0, &mut grads).unwrap();
            assert!(loss.is_finite());
            assert!(grads.is_finite());
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let config = Variant::AttentionGru3m.config(5, 6, 4);
        let model = Model::init(config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let table = toy_table(5, 6, 0);
        let a = toy_instance(5, 10, 1, 1);
        let b = toy_instance(5, 10, 1, 2);
        let fwd = model.forward(&a, &table).unwrap();
        let mut grads = model.params.zeros_like();
        assert!(matches!(
            model.backward(&b, &table, &fwd, 0.5, &mut grads),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn untouched_embedding_columns_get_zero_gradient() {
        let config = Variant::AttentionGru3m.config(6, 4, 5);
        let model = Model::init(config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let table = toy_table(6, 4, 5);
        let mut inst = toy_instance(6, 10, 0, 7);
        for s in inst.history.iter_mut() {
            s.brand %= 3;
        }
        inst.query = 3;
        let fwd = model.forward(&inst, &table).unwrap();
        let mut grads = model.params.zeros_like();
        model.backward(&inst, &table, &fwd, 0.5, &mut grads).unwrap();
        let e = grads.embed.unwrap();
        for k in 4..6 {
            assert!((0..4).all(|r| e.get(r, k) == 0.0), "column {k}");
        }
        assert!((0..4).any(|r| e.get(r, 3) != 0.0));
    }

    #[test]
    fn negative_gap_rejected() {
        let config = Variant::AttentionGru3m.config(5, 6, 4);
        let model = Model::init(config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let table = toy_table(5, 6, 0);
        let mut inst = toy_instance(5, 10, 1, 1);
        inst.history[3].delta_t = -1.0;
        assert!(matches!(model.forward(&inst, &table), Err(Error::Contract(_))));
    }

    #[test]
    fn wrong_table_width_rejected() {
        let config = Variant::AttentionGru3m.config(5, 6, 4);
        let model = Model::init(config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let table = toy_table(5, 7, 0);
        let inst = toy_instance(5, 10, 1, 1);
        assert!(matches!(model.forward(&inst, &table), Err(Error::Contract(_))));
    }

    #[test]
    fn gap_only_reaches_plain_models_through_the_input() {
        // Mod 3 off: the gap is the last input entry; zeroing its encoder
        // columns makes the model blind to gaps.
        let config = Variant::NoMod3.config(5, 6, 4);
        let mut model = Model::init(config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let last = config.input_dim() - 1;
        for m in [&mut model.params.encoder.w_z, &mut model.params.encoder.w_r, &mut model.params.encoder.w_h] {
            for r in 0..m.rows() {
                m.set(r, last, 0.0);
            }
        }
        let table = toy_table(5, 6, 1);
        let inst = toy_instance(5, 10, 1, 3);
        let mut other = inst.clone();
        for s in other.history.iter_mut() {
            s.delta_t *= 7.0;
        }
        assert_eq!(model.predict(&inst, &table).unwrap(), model.predict(&other, &table).unwrap());
    }

    #[test]
    fn determinism() {
        let config = Variant::AttentionGru3m.config(5, 6, 8);
        let a = Model::init(config, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = Model::init(config, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let table = toy_table(5, 6, 0);
        let inst = toy_instance(5, 10, 1, 1);
        assert_eq!(
            a.predict(&inst, &table).unwrap().to_bits(),
            b.predict(&inst, &table).unwrap().to_bits()
        );
    }

    #[test]
    fn tensor_names_are_unique() {
        let mut c = Variant::AttentionGru3m.config(5, 6, 8);
        c.learn_initial_state = true;
        let p = ModelParams::zeros(&c).unwrap();
        let names: Vec<_> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(names.len(), dedup.len());
        assert_eq!(names.len(), 22);
    }
}

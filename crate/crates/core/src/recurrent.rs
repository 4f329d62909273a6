//! Recurrent cores and full models.
//!
//! * [`gru_step`] / [`lstm_step`]: banks of independent cells, one per module.
//! * [`s2rm_step`] / [`s2rm_query`]: the spatially structured model; every
//!   module shares the attention parameters and owns its GRU and embedding.
//! * [`baseline_aggregate`], [`baseline_step`], [`baseline_query`]: a single
//!   recurrent core fed with the sum of position-aware encodings.
//! * [`tto_step`]: the stateless oracle given next-step observations.
//!
//! [`Model`] bundles a configuration with its [`ParamStore`] and dispatches
//! to the right pipeline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    bind_attention, bind_gate, init_attention, init_gate, input_attention, inter_cell_attention,
    output_attention, AttentionOptions, AttentionVars, GateVars, HeadShape,
};
use crate::codec::{bind_mlp, decode, encode, encode_with_position, init_mlp, MlpVars, CROP_PIXELS};
use crate::error::{dim_err, Error, Result};
use crate::geometry::{embed_positions, kernel_batch, KernelConfig, ModuleEmbeddings};
use crate::init::fan_in_uniform;
use crate::tensorcore::{BoundParams, Graph, ParamStore, Tensor, Var};

/// Name of the module-embedding bank in a model's parameter store.
pub const EMBEDDING_PARAM: &str = "modules";

/// A set of local observations: crop centers `(row, col)` and flattened
/// 11×11 crops, row-major, one crop per center.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Observations {
    centers: Vec<[f64; 2]>,
    crops: Vec<f64>,
}

impl Observations {
    pub fn new(centers: Vec<[f64; 2]>, crops: Vec<f64>) -> Result<Self> {
        if crops.len() != centers.len() * CROP_PIXELS {
            return dim_err(format!(
                "{} centers need {} crop values, got {}",
                centers.len(),
                centers.len() * CROP_PIXELS,
                crops.len()
            ));
        }
        if crops.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("crop values must lie in [0, 1]".into()));
        }
        Ok(Self { centers, crops })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[[f64; 2]] {
        &self.centers
    }

    pub fn crops(&self) -> &[f64] {
        &self.crops
    }

    pub fn crop(&self, a: usize) -> &[f64] {
        &self.crops[a * CROP_PIXELS..(a + 1) * CROP_PIXELS]
    }

    /// Observations in the given order of indices.
    pub fn select(&self, order: &[usize]) -> Self {
        Self {
            centers: order.iter().map(|&a| self.centers[a]).collect(),
            crops: order.iter().flat_map(|&a| self.crop(a).iter().copied()).collect(),
        }
    }

    fn crops_tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.len(), CROP_PIXELS], self.crops.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Spatially structured model with GRU modules.
    S2Gru,
    BaselineGru,
    BaselineLstm,
    /// Time-travelling oracle.
    Tto,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::S2Gru => "s2gru",
            ModelKind::BaselineGru => "baseline-gru",
            ModelKind::BaselineLstm => "baseline-lstm",
            ModelKind::Tto => "tto",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "s2gru" => Ok(ModelKind::S2Gru),
            "baseline-gru" => Ok(ModelKind::BaselineGru),
            "baseline-lstm" => Ok(ModelKind::BaselineLstm),
            "tto" => Ok(ModelKind::Tto),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }

    fn code(self) -> u32 {
        match self {
            ModelKind::S2Gru => 0,
            ModelKind::BaselineGru => 1,
            ModelKind::BaselineLstm => 2,
            ModelKind::Tto => 3,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        [ModelKind::S2Gru, ModelKind::BaselineGru, ModelKind::BaselineLstm, ModelKind::Tto]
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown model kind code {c}")))
    }
}

/// Architecture of every model kind. Fields that a kind does not use are
/// ignored by it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Number of modules `M`.
    pub modules: usize,
    /// Hidden width per module `H`.
    pub hidden: usize,
    /// Sphere embedding size `d`.
    pub embed_dim: usize,
    /// Observation encoding width `E`.
    pub encoding: usize,
    pub kernel: KernelConfig,
    pub input_heads: HeadShape,
    pub inter_heads: HeadShape,
    pub attention: AttentionOptions,
    pub gate_hidden: usize,
    /// Hidden width of the encoder and decoder perceptrons.
    pub codec_hidden: usize,
    /// State width of the baseline core and of the oracle output.
    pub baseline_hidden: usize,
    /// Hidden width of the oracle perceptron.
    pub tto_hidden: usize,
    /// Positions must lie in `[0, domain]^2`.
    pub domain: f64,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    /// Small configuration that trains on a desktop.
    pub fn desk(kind: ModelKind) -> Self {
        Self {
            kind,
            modules: 4,
            hidden: 32,
            embed_dim: 16,
            encoding: 64,
            kernel: KernelConfig { epsilon: 4.0, tau: 0.6 },
            input_heads: HeadShape { heads: 2, key: 16, value: 32 },
            inter_heads: HeadShape { heads: 2, key: 16, value: 32 },
            attention: AttentionOptions::default(),
            gate_hidden: 32,
            codec_hidden: 256,
            baseline_hidden: 128,
            tto_hidden: 128,
            domain: 48.0,
            seed: 0,
        }
    }

    /// Published bouncing-ball configuration.
    pub fn paper(kind: ModelKind) -> Self {
        Self {
            kind,
            modules: 10,
            hidden: 128,
            embed_dim: 16,
            encoding: 128,
            kernel: KernelConfig { epsilon: 1.0, tau: 0.6 },
            input_heads: HeadShape { heads: 2, key: 16, value: 128 },
            inter_heads: HeadShape { heads: 4, key: 16, value: 128 },
            attention: AttentionOptions::default(),
            gate_hidden: 64,
            codec_hidden: 256,
            baseline_hidden: 512,
            tto_hidden: 512,
            domain: 48.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("modules", self.modules),
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
            ("encoding", self.encoding),
            ("input heads", self.input_heads.heads),
            ("input key", self.input_heads.key),
            ("input value", self.input_heads.value),
            ("inter heads", self.inter_heads.heads),
            ("inter key", self.inter_heads.key),
            ("inter value", self.inter_heads.value),
            ("gate_hidden", self.gate_hidden),
            ("codec_hidden", self.codec_hidden),
            ("baseline_hidden", self.baseline_hidden),
            ("tto_hidden", self.tto_hidden),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a multiple of 4 for planar positions",
                self.embed_dim
            )));
        }
        if !(self.domain > 0.0 && self.domain.is_finite()) {
            return Err(Error::Config(format!("domain {} must be positive", self.domain)));
        }
        self.kernel.validate()
    }

    /// Flat numeric encoding used by checkpoints.
    pub fn to_words(&self) -> Vec<u64> {
        let h = |s: HeadShape| [s.heads as u64, s.key as u64, s.value as u64];
        let mut w = vec![
            self.kind.code() as u64,
            self.modules as u64,
            self.hidden as u64,
            self.embed_dim as u64,
            self.encoding as u64,
            self.kernel.epsilon.to_bits(),
            self.kernel.tau.to_bits(),
        ];
        w.extend(h(self.input_heads));
        w.extend(h(self.inter_heads));
        w.extend([
            self.attention.scale_scores as u64,
            self.attention.pre_softmax_mask as u64,
            self.gate_hidden as u64,
            self.codec_hidden as u64,
            self.baseline_hidden as u64,
            self.tto_hidden as u64,
            self.domain.to_bits(),
            self.seed,
        ]);
        w
    }

    pub fn from_words(w: &[u64]) -> Result<Self> {
        if w.len() != Self::WORDS {
            return Err(Error::Config(format!("model config needs {} words, got {}", Self::WORDS, w.len())));
        }
        let u = |i: usize| w[i] as usize;
        let head = |i: usize| HeadShape { heads: u(i), key: u(i + 1), value: u(i + 2) };
        let cfg = Self {
            kind: ModelKind::from_code(w[0] as u32)?,
            modules: u(1),
            hidden: u(2),
            embed_dim: u(3),
            encoding: u(4),
            kernel: KernelConfig { epsilon: f64::from_bits(w[5]), tau: f64::from_bits(w[6]) },
            input_heads: head(7),
            inter_heads: head(10),
            attention: AttentionOptions { scale_scores: w[13] != 0, pre_softmax_mask: w[14] != 0 },
            gate_hidden: u(15),
            codec_hidden: u(16),
            baseline_hidden: u(17),
            tto_hidden: u(18),
            domain: f64::from_bits(w[19]),
            seed: w[20],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub const WORDS: usize = 21;
}

/// Recurrent state: `h` is `(M, H)` for the structured model and `(1, width)`
/// for the baseline and oracle; `c` is the memory of LSTM cores.
#[derive(Clone, Copy)]
pub struct State<'g> {
    pub h: Var<'g>,
    pub c: Option<Var<'g>>,
}

/// Parameters of a bank of `M` independent GRU cells.
#[derive(Clone, Copy)]
pub struct GruVars<'g> {
    pub wz: Var<'g>,
    pub uz: Var<'g>,
    pub bz: Var<'g>,
    pub wr: Var<'g>,
    pub ur: Var<'g>,
    pub br: Var<'g>,
    pub wh: Var<'g>,
    pub uh: Var<'g>,
    pub bh: Var<'g>,
}

/// Parameters of a bank of `M` independent LSTM cells; gates are input `i`,
/// forget `f`, output `o` and candidate `g`.
#[derive(Clone, Copy)]
pub struct LstmVars<'g> {
    pub w: [Var<'g>; 4],
    pub u: [Var<'g>; 4],
    pub b: [Var<'g>; 4],
}

const GRU_GATES: [&str; 3] = ["z", "r", "h"];
const LSTM_GATES: [&str; 4] = ["i", "f", "o", "g"];

fn init_cell_bank(
    store: &mut ParamStore,
    prefix: &str,
    gates: &[&str],
    modules: usize,
    input: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for gate in gates {
        store.insert(format!("{prefix}.w{gate}"), fan_in_uniform(&[modules, input, hidden], input, rng))?;
        store.insert(format!("{prefix}.u{gate}"), fan_in_uniform(&[modules, hidden, hidden], hidden, rng))?;
        store.insert(format!("{prefix}.b{gate}"), Tensor::zeros(&[modules, hidden]))?;
    }
    Ok(())
}

/// Registers a bank of `modules` GRU cells under `prefix`.
pub fn init_gru(
    store: &mut ParamStore,
    prefix: &str,
    modules: usize,
    input: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    init_cell_bank(store, prefix, &GRU_GATES, modules, input, hidden, rng)
}

/// Registers a bank of `modules` LSTM cells under `prefix`.
pub fn init_lstm(
    store: &mut ParamStore,
    prefix: &str,
    modules: usize,
    input: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    init_cell_bank(store, prefix, &LSTM_GATES, modules, input, hidden, rng)
}

pub fn bind_gru<'g>(p: &BoundParams<'g>, prefix: &str) -> Result<GruVars<'g>> {
    let get = |n: &str| p.get(&format!("{prefix}.{n}"));
    Ok(GruVars {
        wz: get("wz")?,
        uz: get("uz")?,
        bz: get("bz")?,
        wr: get("wr")?,
        ur: get("ur")?,
        br: get("br")?,
        wh: get("wh")?,
        uh: get("uh")?,
        bh: get("bh")?,
    })
}

pub fn bind_lstm<'g>(p: &BoundParams<'g>, prefix: &str) -> Result<LstmVars<'g>> {
    let get = |kind: &str| -> Result<[Var<'g>; 4]> {
        Ok([
            p.get(&format!("{prefix}.{kind}i"))?,
            p.get(&format!("{prefix}.{kind}f"))?,
            p.get(&format!("{prefix}.{kind}o"))?,
            p.get(&format!("{prefix}.{kind}g"))?,
        ])
    };
    Ok(LstmVars { w: get("w")?, u: get("u")?, b: get("b")? })
}

/// `x W + h U + b` per module for `x: (M, I)`, `W: (M, I, H)`, `h: (M, H)`.
fn bank_affine<'g>(x: &Var<'g>, w: &Var<'g>, h: &Var<'g>, u: &Var<'g>, b: &Var<'g>) -> Result<Var<'g>> {
    x.contract("mi,mih->mh", w)?.add(&h.contract("mj,mjh->mh", u)?)?.add(b)
}

fn check_bank(u: &Var, h: &Var, w: &Var) -> Result<()> {
    let (us, hs, ws) = (u.shape(), h.shape(), w.shape());
    if us.len() != 2 || hs.len() != 2 || ws.len() != 3 || us[0] != ws[0] || hs[0] != ws[0] || us[1] != ws[1] || hs[1] != ws[2] {
        return dim_err(format!("cell bank with input {us:?}, state {hs:?}, weights {ws:?}"));
    }
    Ok(())
}

/// One step of a GRU bank: inputs `u: (M, I)`, previous states `h: (M, H)`.
pub fn gru_step<'g>(u: &Var<'g>, h: &Var<'g>, p: &GruVars<'g>) -> Result<Var<'g>> {
    check_bank(u, h, &p.wz)?;
    let z = bank_affine(u, &p.wz, h, &p.uz, &p.bz)?.sigmoid();
    let r = bank_affine(u, &p.wr, h, &p.ur, &p.br)?.sigmoid();
    let gated = r.mul(h)?;
    let cand = bank_affine(u, &p.wh, &gated, &p.uh, &p.bh)?.tanh();
    z.one_minus().mul(h)?.add(&z.mul(&cand)?)
}

/// One step of an LSTM bank; returns `(h, c)`.
pub fn lstm_step<'g>(u: &Var<'g>, h: &Var<'g>, c: &Var<'g>, p: &LstmVars<'g>) -> Result<(Var<'g>, Var<'g>)> {
    check_bank(u, h, &p.w[0])?;
    if c.shape() != h.shape() {
        return dim_err(format!("memory {:?} vs state {:?}", c.shape(), h.shape()));
    }
    let pre = |k: usize| bank_affine(u, &p.w[k], h, &p.u[k], &p.b[k]);
    let i = pre(0)?.sigmoid();
    let f = pre(1)?.sigmoid();
    let o = pre(2)?.sigmoid();
    let g = pre(3)?.tanh();
    let c_next = f.mul(c)?.add(&i.mul(&g)?)?;
    let h_next = o.mul(&c_next.tanh())?;
    Ok((h_next, c_next))
}

/// Bound parameters of the structured model.
#[derive(Clone, Copy)]
pub struct S2rmVars<'g> {
    pub encoder: MlpVars<'g>,
    pub input: AttentionVars<'g>,
    pub input_gate: GateVars<'g>,
    pub inter: AttentionVars<'g>,
    pub inter_gate: GateVars<'g>,
    pub cells: GruVars<'g>,
    pub embeddings: Var<'g>,
    pub decoder: MlpVars<'g>,
}

fn check_domain(points: &[[f64; 2]], domain: f64) -> Result<()> {
    for p in points {
        if !p.iter().all(|v| (0.0..=domain).contains(v)) {
            return Err(Error::Input(format!("position {p:?} outside [0, {domain}]^2")));
        }
    }
    Ok(())
}

/// One step of the structured model: encode, address observations to
/// modules through the kernel, let modules exchange state, update cells.
pub fn s2rm_step<'g>(
    obs: &Observations,
    h: &Var<'g>,
    p: &S2rmVars<'g>,
    cfg: &ModelConfig,
) -> Result<Var<'g>> {
    check_domain(obs.centers(), cfg.domain)?;
    let g = h.graph();
    let observed = if obs.is_empty() {
        None
    } else {
        let e = encode(&g.constant(obs.crops_tensor()?), &p.encoder)?;
        let s = g.constant(embed_positions(obs.centers(), cfg.embed_dim)?);
        let local = kernel_batch(&p.embeddings, &s, &cfg.kernel)?;
        Some((e, local))
    };
    let u = input_attention(observed.as_ref().map(|(e, l)| (e, l)), h, &p.input, &p.input_gate, &cfg.attention)?.out;
    let pair = kernel_batch(&p.embeddings, &p.embeddings, &cfg.kernel)?;
    let hbar = inter_cell_attention(h, &pair, &p.inter, &p.inter_gate, &cfg.attention)?.out;
    gru_step(&u, &hbar, &p.cells)
}

/// Crop logits `(Q, 121)` at query positions; reads `h` without changing it.
pub fn s2rm_query<'g>(
    h: &Var<'g>,
    queries: &[[f64; 2]],
    p: &S2rmVars<'g>,
    cfg: &ModelConfig,
) -> Result<Var<'g>> {
    check_domain(queries, cfg.domain)?;
    let g = h.graph();
    let s = g.constant(embed_positions(queries, cfg.embed_dim)?);
    let z = kernel_batch(&s, &p.embeddings, &cfg.kernel)?;
    let d = output_attention(h, &z)?;
    decode(&Var::concat(&[d, s], 1)?, &p.decoder)
}

/// Sum of position-aware encodings, `(1, E)`; zero for an empty set.
pub fn baseline_aggregate<'g>(
    g: &'g Graph,
    obs: &Observations,
    encoder: &MlpVars<'g>,
    cfg: &ModelConfig,
) -> Result<Var<'g>> {
    check_domain(obs.centers(), cfg.domain)?;
    if obs.is_empty() {
        return Ok(g.constant(Tensor::zeros(&[1, encoder.output_width()])));
    }
    let crops = g.constant(obs.crops_tensor()?);
    let s = g.constant(embed_positions(obs.centers(), cfg.embed_dim)?);
    let width = encoder.output_width();
    encode_with_position(&crops, &s, encoder)?.reduce_sum(0)?.reshape(&[1, width])
}

/// Recurrent core of the baseline.
#[derive(Clone, Copy)]
pub enum CoreVars<'g> {
    Gru(GruVars<'g>),
    Lstm(LstmVars<'g>),
}

/// One step of the baseline core on aggregate `r: (1, E)`.
pub fn baseline_step<'g>(r: &Var<'g>, state: &State<'g>, core: &CoreVars<'g>) -> Result<State<'g>> {
    match core {
        CoreVars::Gru(p) => Ok(State { h: gru_step(r, &state.h, p)?, c: None }),
        CoreVars::Lstm(p) => {
            let c = state.c.ok_or_else(|| Error::Input("LSTM core needs a memory state".into()))?;
            let (h, c) = lstm_step(r, &state.h, &c, p)?;
            Ok(State { h, c: Some(c) })
        }
    }
}

/// Crop logits `(Q, 121)` from a single state vector `h: (1, width)`.
pub fn baseline_query<'g>(
    h: &Var<'g>,
    queries: &[[f64; 2]],
    decoder: &MlpVars<'g>,
    cfg: &ModelConfig,
) -> Result<Var<'g>> {
    check_domain(queries, cfg.domain)?;
    let hs = h.shape();
    if hs.len() != 2 || hs[0] != 1 {
        return dim_err(format!("baseline state must be (1, width), got {hs:?}"));
    }
    let g = h.graph();
    let s = g.constant(embed_positions(queries, cfg.embed_dim)?);
    let ones = g.constant(Tensor::ones(&[queries.len(), 1]));
    let tiled = ones.contract("qo,oj->qj", h)?;
    decode(&Var::concat(&[tiled, s], 1)?, decoder)
}

/// Stateless oracle: maps the aggregate of next-step observations to a state.
pub fn tto_step<'g>(r_next: &Var<'g>, mlp: &MlpVars<'g>) -> Result<Var<'g>> {
    mlp.forward(r_next)
}

/// A model: configuration plus parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

/// Parameters of any model kind, bound to one graph.
pub enum ModelVars<'g> {
    S2(S2rmVars<'g>),
    Baseline { encoder: MlpVars<'g>, core: CoreVars<'g>, decoder: MlpVars<'g> },
    Tto { encoder: MlpVars<'g>, mlp: MlpVars<'g>, decoder: MlpVars<'g> },
}

impl Model {
    /// Freshly initialized parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Self::init_params(&config)?;
        Ok(Self { config, params })
    }

    /// Reassembles a model from stored parameters, checking that names and
    /// shapes match the configuration.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::init_params(&config)?;
        let expected: Vec<(&str, &[usize])> = reference.iter().map(|(n, t)| (n, t.shape())).collect();
        let found: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != found {
            return Err(Error::Config("stored parameters do not match the model configuration".into()));
        }
        Ok(Self { config, params })
    }

    fn init_params(cfg: &ModelConfig) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.embed_dim;
        match cfg.kind {
            ModelKind::S2Gru => {
                let (e, h) = (cfg.encoding, cfg.hidden);
                init_mlp(&mut store, "enc", CROP_PIXELS, cfg.codec_hidden, e, &mut rng)?;
                init_attention(&mut store, "att_in", e, h, e, e, cfg.input_heads, &mut rng)?;
                init_gate(&mut store, "gate_in", e, cfg.gate_hidden, &mut rng)?;
                init_attention(&mut store, "att_ic", h, h, h, h, cfg.inter_heads, &mut rng)?;
                init_gate(&mut store, "gate_ic", h, cfg.gate_hidden, &mut rng)?;
                init_gru(&mut store, "gru", cfg.modules, e, h, &mut rng)?;
                let bank = ModuleEmbeddings::at_random_positions(cfg.modules, d, cfg.domain, cfg.seed ^ 0x9e37_79b9_7f4a_7c15)?;
                store.insert(EMBEDDING_PARAM, bank.rows)?;
                init_mlp(&mut store, "dec", h + d, cfg.codec_hidden, CROP_PIXELS, &mut rng)?;
            }
            ModelKind::BaselineGru | ModelKind::BaselineLstm => {
                let (e, h) = (cfg.encoding, cfg.baseline_hidden);
                init_mlp(&mut store, "enc", CROP_PIXELS + d, cfg.codec_hidden, e, &mut rng)?;
                if cfg.kind == ModelKind::BaselineGru {
                    init_gru(&mut store, "core", 1, e, h, &mut rng)?;
                } else {
                    init_lstm(&mut store, "core", 1, e, h, &mut rng)?;
                }
                init_mlp(&mut store, "dec", h + d, cfg.codec_hidden, CROP_PIXELS, &mut rng)?;
            }
            ModelKind::Tto => {
                let (e, h) = (cfg.encoding, cfg.baseline_hidden);
                init_mlp(&mut store, "enc", CROP_PIXELS + d, cfg.codec_hidden, e, &mut rng)?;
                init_mlp(&mut store, "tto", e, cfg.tto_hidden, h, &mut rng)?;
                init_mlp(&mut store, "dec", h + d, cfg.codec_hidden, CROP_PIXELS, &mut rng)?;
            }
        }
        Ok(store)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Module embeddings of the structured model.
    pub fn module_embeddings(&self) -> Option<ModuleEmbeddings> {
        self.params.get(EMBEDDING_PARAM).map(|rows| ModuleEmbeddings { rows: rows.clone() })
    }

    /// Collects the typed parameter handles from `bound`.
    pub fn vars<'g>(&self, p: &BoundParams<'g>) -> Result<ModelVars<'g>> {
        Ok(match self.config.kind {
            ModelKind::S2Gru => ModelVars::S2(S2rmVars {
                encoder: bind_mlp(p, "enc")?,
                input: bind_attention(p, "att_in")?,
                input_gate: bind_gate(p, "gate_in")?,
                inter: bind_attention(p, "att_ic")?,
                inter_gate: bind_gate(p, "gate_ic")?,
                cells: bind_gru(p, "gru")?,
                embeddings: p.get(EMBEDDING_PARAM)?,
                decoder: bind_mlp(p, "dec")?,
            }),
            ModelKind::BaselineGru => ModelVars::Baseline {
                encoder: bind_mlp(p, "enc")?,
                core: CoreVars::Gru(bind_gru(p, "core")?),
                decoder: bind_mlp(p, "dec")?,
            },
            ModelKind::BaselineLstm => ModelVars::Baseline {
                encoder: bind_mlp(p, "enc")?,
                core: CoreVars::Lstm(bind_lstm(p, "core")?),
                decoder: bind_mlp(p, "dec")?,
            },
            ModelKind::Tto => ModelVars::Tto {
                encoder: bind_mlp(p, "enc")?,
                mlp: bind_mlp(p, "tto")?,
                decoder: bind_mlp(p, "dec")?,
            },
        })
    }

    /// Shapes of `(h, c)` in the model's state.
    pub fn state_shapes(&self) -> (Vec<usize>, Option<Vec<usize>>) {
        let cfg = &self.config;
        match cfg.kind {
            ModelKind::S2Gru => (vec![cfg.modules, cfg.hidden], None),
            ModelKind::BaselineGru | ModelKind::Tto => (vec![1, cfg.baseline_hidden], None),
            ModelKind::BaselineLstm => {
                (vec![1, cfg.baseline_hidden], Some(vec![1, cfg.baseline_hidden]))
            }
        }
    }

    /// All-zero state.
    pub fn initial_state<'g>(&self, g: &'g Graph) -> State<'g> {
        let (h, c) = self.state_shapes();
        State { h: g.constant(Tensor::zeros(&h)), c: c.map(|c| g.constant(Tensor::zeros(&c))) }
    }

    /// Advances the state by one step on `obs`. The oracle ignores `obs`
    /// and needs `lookahead`, the observations of the next step.
    pub fn step<'g>(
        &self,
        vars: &ModelVars<'g>,
        state: &State<'g>,
        obs: &Observations,
        lookahead: Option<&Observations>,
    ) -> Result<State<'g>> {
        let g = state.h.graph();
        match vars {
            ModelVars::S2(p) => Ok(State { h: s2rm_step(obs, &state.h, p, &self.config)?, c: None }),
            ModelVars::Baseline { encoder, core, .. } => {
                let r = baseline_aggregate(g, obs, encoder, &self.config)?;
                baseline_step(&r, state, core)
            }
            ModelVars::Tto { encoder, mlp, .. } => {
                let next = lookahead.ok_or_else(|| {
                    Error::Input("the oracle needs the next step's observations".into())
                })?;
                let r = baseline_aggregate(g, next, encoder, &self.config)?;
                Ok(State { h: tto_step(&r, mlp)?, c: None })
            }
        }
    }

    /// Crop logits `(Q, 121)` at `queries`; the state is not modified.
    pub fn query<'g>(&self, vars: &ModelVars<'g>, state: &State<'g>, queries: &[[f64; 2]]) -> Result<Var<'g>> {
        if queries.is_empty() {
            return Err(Error::Input("at least one query position is required".into()));
        }
        match vars {
            ModelVars::S2(p) => s2rm_query(&state.h, queries, p, &self.config),
            ModelVars::Baseline { decoder, .. } | ModelVars::Tto { decoder, .. } => {
                baseline_query(&state.h, queries, decoder, &self.config)
            }
        }
    }
}

/// Runs a model step by step outside of training, keeping the state as
/// plain tensors between steps.
pub struct Runner<'m> {
    model: &'m Model,
    h: Tensor,
    c: Option<Tensor>,
}

impl<'m> Runner<'m> {
    pub fn new(model: &'m Model) -> Self {
        let (h, c) = model.state_shapes();
        Self { model, h: Tensor::zeros(&h), c: c.map(|c| Tensor::zeros(&c)) }
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.model);
    }

    pub fn state(&self) -> (&Tensor, Option<&Tensor>) {
        (&self.h, self.c.as_ref())
    }

    fn with_state<T>(&self, f: impl for<'g> FnOnce(&'g Graph, &ModelVars<'g>, State<'g>) -> Result<T>) -> Result<T> {
        let g = Graph::new();
        let bound = self.model.params.bind_frozen(&g);
        let vars = self.model.vars(&bound)?;
        let state = State { h: g.constant(self.h.clone()), c: self.c.clone().map(|c| g.constant(c)) };
        f(&g, &vars, state)
    }

    pub fn observe(&mut self, obs: &Observations, lookahead: Option<&Observations>) -> Result<()> {
        let model = self.model;
        let (h, c) = self.with_state(|_, vars, state| {
            let next = model.step(vars, &state, obs, lookahead)?;
            Ok(((*next.h.value()).clone(), next.c.map(|c| (*c.value()).clone())))
        })?;
        if !h.is_finite() {
            return Err(Error::Numeric("model state became non-finite".into()));
        }
        self.h = h;
        self.c = c;
        Ok(())
    }

    /// Predicted pixel probabilities `(Q, 121)`.
    pub fn predict(&self, queries: &[[f64; 2]]) -> Result<Tensor> {
        let model = self.model;
        self.with_state(|_, vars, state| Ok((*model.query(vars, &state, queries)?.sigmoid().value()).clone()))
    }

    /// Raw logits `(Q, 121)`.
    pub fn logits(&self, queries: &[[f64; 2]]) -> Result<Tensor> {
        let model = self.model;
        self.with_state(|_, vars, state| Ok((*model.query(vars, &state, queries)?.value()).clone()))
    }
}

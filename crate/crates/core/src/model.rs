//! The hierarchical VAE.
//!
//! Every bar of every key is encoded on its own by a bidirectional LSTM. The
//! resulting embeddings feed the latent posterior and two tree attention
//! heads: a vertical head across the keys of each bar and a horizontal head
//! across bar summaries. Each bar-key embedding is concatenated with its two
//! soft-parent contexts. A conductor LSTM runs once per bar over the latent
//! code and the key-averaged augmented embeddings. Its output initializes a
//! key-shared decoder LSTM that emits one categorical over pitches and rest
//! per step and key.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::config::{ConfigError, KeyValueDoc};
use crate::framing::{self, FramingError, Record};
use crate::losses::{focal_var, kl_var, permutation_var, FocalConfig, LossBreakdown, LossWeights};
use crate::midi_io::{KeyedRoll, STEPS_PER_BAR};
use crate::numerics::rng::{sample_categorical, standard_normal_vec};
use crate::numerics::{Matrix, ModelRng, Tape, Var};
use crate::tree_attention::{context_var, marginals_var, potentials_var, AttentionVars, TreeError, TreeMarginals};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VHVA";
pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 4.0;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("checkpoint: {0}")]
    Framing(#[from] FramingError),
    #[error("checkpoint config: {0}")]
    ConfigDoc(#[from] ConfigError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_keys: usize,
    pub n_bars: usize,
    /// Sounded pitch count; the vocabulary adds one rest token.
    pub n_pitches: usize,
    pub embed_dim: usize,
    pub enc_hidden: usize,
    pub latent_dim: usize,
    pub attn_hidden: usize,
    pub conductor_hidden: usize,
    pub dec_hidden: usize,
    pub global_attention: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_keys: 2,
            n_bars: 16,
            n_pitches: crate::midi_io::N_PITCHES,
            embed_dim: 32,
            enc_hidden: 128,
            latent_dim: 32,
            attn_hidden: 32,
            conductor_hidden: 64,
            dec_hidden: 64,
            global_attention: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "n_keys",
        "n_bars",
        "n_pitches",
        "embed_dim",
        "enc_hidden",
        "latent_dim",
        "attn_hidden",
        "conductor_hidden",
        "dec_hidden",
        "global_attention",
        "seed",
    ];

    pub fn pitch_vocab(&self) -> usize {
        self.n_pitches + 1
    }

    pub fn rest(&self) -> u8 {
        self.n_pitches as u8
    }

    pub fn steps(&self) -> usize {
        self.n_bars * STEPS_PER_BAR
    }

    /// Width of one bar-key embedding (forward and backward states).
    pub fn enc_dim(&self) -> usize {
        2 * self.enc_hidden
    }

    /// Width of an augmented embedding: itself plus two contexts.
    pub fn aug_dim(&self) -> usize {
        3 * self.enc_dim()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("n_keys", self.n_keys),
            ("n_bars", self.n_bars),
            ("n_pitches", self.n_pitches),
            ("embed_dim", self.embed_dim),
            ("enc_hidden", self.enc_hidden),
            ("latent_dim", self.latent_dim),
            ("attn_hidden", self.attn_hidden),
            ("conductor_hidden", self.conductor_hidden),
            ("dec_hidden", self.dec_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if self.n_pitches > 254 {
            return Err(ModelError::Config(format!("n_pitches {} exceeds 254", self.n_pitches)));
        }
        if self.n_keys > self.n_pitches {
            return Err(ModelError::Config("n_keys cannot exceed n_pitches".into()));
        }
        Ok(())
    }

    pub fn to_doc(&self) -> KeyValueDoc {
        let mut d = KeyValueDoc::default();
        d.set("n_keys", self.n_keys);
        d.set("n_bars", self.n_bars);
        d.set("n_pitches", self.n_pitches);
        d.set("embed_dim", self.embed_dim);
        d.set("enc_hidden", self.enc_hidden);
        d.set("latent_dim", self.latent_dim);
        d.set("attn_hidden", self.attn_hidden);
        d.set("conductor_hidden", self.conductor_hidden);
        d.set("dec_hidden", self.dec_hidden);
        d.set("global_attention", self.global_attention);
        d.set("seed", self.seed);
        d
    }

    /// Overwrites the fields present in `doc`; other keys are ignored.
    pub fn apply_doc(&mut self, doc: &KeyValueDoc) -> Result<(), ConfigError> {
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = doc.get(stringify!($field))? {
                    self.$field = v;
                }
            )*};
        }
        take!(
            n_keys,
            n_bars,
            n_pitches,
            embed_dim,
            enc_hidden,
            latent_dim,
            attn_hidden,
            conductor_hidden,
            dec_hidden,
            global_attention,
            seed
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(f64),
    Zeros,
    /// LSTM bias: zero except the forget-gate block, which starts at 1.
    ForgetBias(usize),
}

fn param_layout(cfg: &ModelConfig) -> Vec<(String, (usize, usize), Init)> {
    let (e, v, h, d, l, a) =
        (cfg.embed_dim, cfg.pitch_vocab(), cfg.enc_hidden, cfg.enc_dim(), cfg.latent_dim, cfg.attn_hidden);
    let (c, g, aug) = (cfg.conductor_hidden, cfg.dec_hidden, cfg.aug_dim());
    let u = |fan_in: usize| Init::Uniform(1.0 / (fan_in as f64).sqrt());
    let mut out: Vec<(String, (usize, usize), Init)> = vec![
        ("embed".into(), (e, v), Init::Uniform(0.5)),
        ("start".into(), (e, 1), Init::Uniform(0.5)),
    ];
    for dir in ["enc_fwd", "enc_bwd"] {
        out.push((format!("{dir}.wx"), (4 * h, e), u(e)));
        out.push((format!("{dir}.wh"), (4 * h, h), u(h)));
        out.push((format!("{dir}.b"), (4 * h, 1), Init::ForgetBias(h)));
    }
    for head in ["mu", "logvar"] {
        out.push((format!("{head}.w"), (l, d), u(d)));
        out.push((format!("{head}.b"), (l, 1), Init::Zeros));
    }
    for head in ["vert", "horiz"] {
        out.push((format!("{head}.w1"), (a, d), u(d)));
        out.push((format!("{head}.w2"), (a, d), u(d)));
        out.push((format!("{head}.b"), (a, 1), Init::Zeros));
        out.push((format!("{head}.s"), (a, 1), u(a)));
        out.push((format!("{head}.b_root"), (a, 1), Init::Zeros));
        out.push((format!("{head}.s_root"), (a, 1), u(a)));
    }
    out.push(("cond.wx".into(), (4 * c, l + aug), u(l + aug)));
    out.push(("cond.wh".into(), (4 * c, c), u(c)));
    out.push(("cond.b".into(), (4 * c, 1), Init::ForgetBias(c)));
    out.push(("dec_init.w".into(), (2 * g, c), u(c)));
    out.push(("dec_init.b".into(), (2 * g, 1), Init::Zeros));
    out.push(("dec.wctx".into(), (4 * g, c + aug), u(c + aug)));
    out.push(("dec.wx".into(), (4 * g, e), u(e)));
    out.push(("dec.wh".into(), (4 * g, g), u(g)));
    out.push(("dec.b".into(), (4 * g, 1), Init::ForgetBias(g)));
    out.push(("out.w".into(), (v, g), u(g)));
    out.push(("out.b".into(), (v, 1), Init::Zeros));
    out
}

/// Named parameter matrices, iterated in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
}

impl ParamStore {
    /// Seeded initialization from `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = crate::numerics::seeded(cfg.seed);
        let mut params = BTreeMap::new();
        for (name, (r, c), init) in param_layout(cfg) {
            let m = match init {
                Init::Uniform(bound) => {
                    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-bound..bound)).collect())
                }
                Init::Zeros => Matrix::zeros(r, c),
                Init::ForgetBias(hidden) => {
                    let mut m = Matrix::zeros(r, c);
                    for k in hidden..2 * hidden {
                        m[(k, 0)] = 1.0;
                    }
                    m
                }
            };
            params.insert(name, m);
        }
        Ok(Self { params })
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Matrix::len).sum()
    }

    /// Checks names and shapes against the layout implied by `cfg`.
    pub fn check(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        cfg.validate()?;
        let layout = param_layout(cfg);
        if layout.len() != self.params.len() {
            return Err(ModelError::Shape(format!("{} parameters, config expects {}", self.params.len(), layout.len())));
        }
        for (name, shape, _) in layout {
            match self.params.get(&name) {
                None => return Err(ModelError::Shape(format!("missing parameter `{name}`"))),
                Some(m) if m.shape() != shape => {
                    return Err(ModelError::Shape(format!(
                        "parameter `{name}` has shape {:?}, config expects {shape:?}",
                        m.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct LstmVars {
    wx: Var,
    wh: Var,
    b: Var,
}

#[derive(Clone, Copy)]
struct AffineVars {
    w: Var,
    b: Var,
}

struct ModelVars {
    embed: Var,
    start: Var,
    enc_fwd: LstmVars,
    enc_bwd: LstmVars,
    mu: AffineVars,
    logvar: AffineVars,
    vert: AttentionVars,
    horiz: AttentionVars,
    cond: LstmVars,
    dec_init: AffineVars,
    dec_ctx: Var,
    dec: LstmVars,
    out: AffineVars,
}

/// One forward pass recorded on a tape.
struct Net<'a> {
    t: Tape,
    v: ModelVars,
    cfg: &'a ModelConfig,
    leaves: Vec<Var>,
}

impl<'a> Net<'a> {
    fn new(store: &ParamStore, cfg: &'a ModelConfig, trainable: bool) -> Self {
        let mut t = Tape::new();
        let mut bound = BTreeMap::new();
        let mut leaves = Vec::with_capacity(store.len());
        for (name, m) in store.iter() {
            let var = if trainable { t.leaf(m.clone()) } else { t.constant(m.clone()) };
            leaves.push(var);
            bound.insert(name.to_string(), var);
        }
        let p = |n: &str| *bound.get(n).unwrap_or_else(|| panic!("parameter `{n}` missing from store"));
        let lstm = |pre: &str| LstmVars { wx: p(&format!("{pre}.wx")), wh: p(&format!("{pre}.wh")), b: p(&format!("{pre}.b")) };
        let affine = |pre: &str| AffineVars { w: p(&format!("{pre}.w")), b: p(&format!("{pre}.b")) };
        let attn = |pre: &str| AttentionVars {
            w1: p(&format!("{pre}.w1")),
            w2: p(&format!("{pre}.w2")),
            b: p(&format!("{pre}.b")),
            s: p(&format!("{pre}.s")),
            b_root: p(&format!("{pre}.b_root")),
            s_root: p(&format!("{pre}.s_root")),
        };
        let v = ModelVars {
            embed: p("embed"),
            start: p("start"),
            enc_fwd: lstm("enc_fwd"),
            enc_bwd: lstm("enc_bwd"),
            mu: affine("mu"),
            logvar: affine("logvar"),
            vert: attn("vert"),
            horiz: attn("horiz"),
            cond: lstm("cond"),
            dec_init: affine("dec_init"),
            dec_ctx: p("dec.wctx"),
            dec: lstm("dec"),
            out: affine("out"),
        };
        Self { t, v, cfg, leaves }
    }

    fn zeros(&mut self, rows: usize) -> Var {
        self.t.constant(Matrix::zeros(rows, 1))
    }

    fn encode_bar_key(&mut self, tokens: &[u8]) -> Var {
        let h = self.cfg.enc_hidden;
        let embs: Vec<Var> = tokens.iter().map(|&tok| self.t.embed(self.v.embed, usize::from(tok))).collect();
        let mut fwd = self.zeros(2 * h);
        for &e in &embs {
            fwd = self.t.lstm(e, fwd, self.v.enc_fwd.wx, self.v.enc_fwd.wh, self.v.enc_fwd.b);
        }
        let mut bwd = self.zeros(2 * h);
        for &e in embs.iter().rev() {
            bwd = self.t.lstm(e, bwd, self.v.enc_bwd.wx, self.v.enc_bwd.wh, self.v.enc_bwd.b);
        }
        let hf = self.t.slice_rows(fwd, 0, h);
        let hb = self.t.slice_rows(bwd, 0, h);
        self.t.concat_rows(&[hf, hb])
    }

    /// Bar-key embeddings of bar `bar`, one per key.
    fn encode_bar(&mut self, roll: &KeyedRoll, bar: usize) -> Vec<Var> {
        let range = bar * STEPS_PER_BAR..(bar + 1) * STEPS_PER_BAR;
        (0..roll.keys())
            .map(|k| {
                let tokens: Vec<u8> = range.clone().map(|t| roll.slot(t, k)).collect();
                self.encode_bar_key(&tokens)
            })
            .collect()
    }

    fn posterior(&mut self, bar_means: &[Var]) -> (Var, Var) {
        let pooled = self.t.mean_n(bar_means);
        let mu = self.t.affine(self.v.mu.w, pooled, self.v.mu.b);
        let raw = self.t.affine(self.v.logvar.w, pooled, self.v.logvar.b);
        (mu, self.t.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX))
    }

    fn reparameterize(&mut self, mu: Var, log_var: Var, eps: &[f64]) -> Var {
        let half = self.t.scale(log_var, 0.5);
        let sd = self.t.exp(half);
        let noise = self.t.constant(Matrix::column(eps));
        let shift = self.t.mul(sd, noise);
        self.t.add(mu, shift)
    }

    /// Returns the context matrix (one column per node) and stacked marginals.
    fn tree_context(&mut self, nodes: &[Var], head: AttentionVars, causal: bool) -> Result<(Var, Var), TreeError> {
        let h = self.t.hstack(nodes);
        let (theta, root) = potentials_var(&mut self.t, h, &head, causal);
        let marg = marginals_var(&mut self.t, theta, root)?;
        Ok((context_var(&mut self.t, h, marg), marg))
    }

    fn augment(&mut self, y: Var, vert_ctx: Var, key: usize, horiz_ctx: Var, bar: usize) -> Var {
        let cv = self.t.column(vert_ctx, key);
        let ch = self.t.column(horiz_ctx, bar);
        self.t.concat_rows(&[y, cv, ch])
    }

    fn conductor_step(&mut self, state: Var, z: Var, yhat_bar: &[Var]) -> (Var, Var) {
        let pooled = self.t.mean_n(yhat_bar);
        let input = self.t.concat_rows(&[z, pooled]);
        let state = self.t.lstm(input, state, self.v.cond.wx, self.v.cond.wh, self.v.cond.b);
        let e = self.t.slice_rows(state, 0, self.cfg.conductor_hidden);
        (state, e)
    }

    /// Initial decoder state and gate bias of one bar and key.
    fn decoder_setup(&mut self, e: Var, yhat: Var) -> (Var, Var) {
        let pre = self.t.affine(self.v.dec_init.w, e, self.v.dec_init.b);
        let state = self.t.tanh(pre);
        let ctx = self.t.concat_rows(&[e, yhat]);
        let bias = self.t.affine(self.v.dec_ctx, ctx, self.v.dec.b);
        (state, bias)
    }

    fn decoder_step(&mut self, prev: Var, state: Var, bias: Var) -> (Var, Var) {
        let state = self.t.lstm(prev, state, self.v.dec.wx, self.v.dec.wh, bias);
        let h = self.t.slice_rows(state, 0, self.cfg.dec_hidden);
        let logits = self.t.affine(self.v.out.w, h, self.v.out.b);
        (state, self.t.softmax(logits))
    }
}

/// Tape handles of a teacher-forced pass.
struct TeacherPass {
    mu: Var,
    log_var: Var,
    /// `dists[t][k]`.
    dists: Vec<Vec<Var>>,
    vertical: Vec<Var>,
    horizontal: Var,
}

fn check_roll(cfg: &ModelConfig, roll: &KeyedRoll) -> Result<(), ModelError> {
    if roll.steps() != cfg.steps() || roll.keys() != cfg.n_keys || roll.n_pitches() != cfg.n_pitches {
        return Err(ModelError::Shape(format!(
            "window has {} steps, {} keys, {} pitches; model expects {}, {}, {}",
            roll.steps(),
            roll.keys(),
            roll.n_pitches(),
            cfg.steps(),
            cfg.n_keys,
            cfg.n_pitches
        )));
    }
    Ok(())
}

fn teacher_pass(net: &mut Net<'_>, roll: &KeyedRoll, eps: Option<&[f64]>) -> Result<TeacherPass, ModelError> {
    let cfg = net.cfg;
    let (bars, keys) = (cfg.n_bars, cfg.n_keys);
    let y: Vec<Vec<Var>> = (0..bars).map(|u| net.encode_bar(roll, u)).collect();
    let ybar: Vec<Var> = y.iter().map(|ys| net.t.mean_n(ys)).collect();
    let (mu, log_var) = net.posterior(&ybar);
    let z = match eps {
        Some(e) => net.reparameterize(mu, log_var, e),
        None => mu,
    };

    let mut vert_ctx = Vec::with_capacity(bars);
    let mut vertical = Vec::with_capacity(bars);
    for ys in &y {
        let (ctx, marg) = net.tree_context(ys, net.v.vert, false)?;
        vert_ctx.push(ctx);
        vertical.push(marg);
    }
    let (horiz_ctx, horizontal) = net.tree_context(&ybar, net.v.horiz, !cfg.global_attention)?;

    let mut cond = net.zeros(2 * cfg.conductor_hidden);
    let mut prev = vec![net.v.start; keys];
    let mut dists = Vec::with_capacity(cfg.steps());
    for u in 0..bars {
        let yhat: Vec<Var> = (0..keys).map(|j| net.augment(y[u][j], vert_ctx[u], j, horiz_ctx, u)).collect();
        let (next, e) = net.conductor_step(cond, z, &yhat);
        cond = next;
        let mut setup: Vec<(Var, Var)> = yhat.iter().map(|&yh| net.decoder_setup(e, yh)).collect();
        for t in u * STEPS_PER_BAR..(u + 1) * STEPS_PER_BAR {
            let mut row = Vec::with_capacity(keys);
            for j in 0..keys {
                let (state, dist) = net.decoder_step(prev[j], setup[j].0, setup[j].1);
                setup[j].0 = state;
                row.push(dist);
                prev[j] = net.t.embed(net.v.embed, usize::from(roll.slot(t, j)));
            }
            dists.push(row);
        }
    }
    Ok(TeacherPass { mu, log_var, dists, vertical, horizontal })
}

/// Per bar and key embeddings plus their key means.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingGrid {
    /// `bar_key[u][j]`.
    pub bar_key: Vec<Vec<Vec<f64>>>,
    pub bars: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedEncoding {
    /// `yhat[u][j]`: embedding, vertical context, horizontal context.
    pub yhat: Vec<Vec<Vec<f64>>>,
    pub vertical_context: Vec<Vec<Vec<f64>>>,
    pub horizontal_context: Vec<Vec<f64>>,
    pub vertical: Vec<TreeMarginals>,
    pub horizontal: TreeMarginals,
}

pub fn encode(store: &ParamStore, cfg: &ModelConfig, roll: &KeyedRoll) -> Result<(EncodingGrid, Posterior), ModelError> {
    check_roll(cfg, roll)?;
    let mut net = Net::new(store, cfg, false);
    let y: Vec<Vec<Var>> = (0..cfg.n_bars).map(|u| net.encode_bar(roll, u)).collect();
    let ybar: Vec<Var> = y.iter().map(|ys| net.t.mean_n(ys)).collect();
    let (mu, log_var) = net.posterior(&ybar);
    let val = |net: &Net<'_>, v: Var| net.t.value(v).data().to_vec();
    let grid = EncodingGrid {
        bar_key: y.iter().map(|ys| ys.iter().map(|&v| val(&net, v)).collect()).collect(),
        bars: ybar.iter().map(|&v| val(&net, v)).collect(),
    };
    Ok((grid, Posterior { mu: val(&net, mu), log_var: val(&net, log_var) }))
}

/// `z = mu + exp(log_var / 2) * eps` with `log_var` clamped to its range.
pub fn sample_latent(mu: &[f64], log_var: &[f64], rng: &mut ModelRng) -> Vec<f64> {
    let eps = standard_normal_vec(rng, mu.len());
    mu.iter()
        .zip(log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).exp() * e)
        .collect()
}

/// Vertical and horizontal attention over a grid. `global` lets every bar
/// attend to every other bar instead of only earlier ones.
pub fn attend(
    store: &ParamStore,
    cfg: &ModelConfig,
    grid: &EncodingGrid,
    global: bool,
) -> Result<AugmentedEncoding, ModelError> {
    let mut net = Net::new(store, cfg, false);
    let y: Vec<Vec<Var>> = grid
        .bar_key
        .iter()
        .map(|ys| ys.iter().map(|v| net.t.constant(Matrix::column(v))).collect())
        .collect();
    let ybar: Vec<Var> = grid.bars.iter().map(|v| net.t.constant(Matrix::column(v))).collect();
    let mut vert_ctx = Vec::new();
    let mut vertical = Vec::new();
    for ys in &y {
        let (ctx, marg) = net.tree_context(ys, net.v.vert, false)?;
        vert_ctx.push(ctx);
        vertical.push(TreeMarginals::from_stacked(net.t.value(marg)));
    }
    let (hctx, hmarg) = net.tree_context(&ybar, net.v.horiz, !global)?;
    let yhat = (0..y.len())
        .map(|u| {
            (0..y[u].len())
                .map(|j| {
                    let v = net.augment(y[u][j], vert_ctx[u], j, hctx, u);
                    net.t.value(v).data().to_vec()
                })
                .collect()
        })
        .collect();
    let columns = |m: &Matrix| (0..m.cols()).map(|c| m.col_vec(c)).collect::<Vec<_>>();
    Ok(AugmentedEncoding {
        yhat,
        vertical_context: vert_ctx.iter().map(|&c| columns(net.t.value(c))).collect(),
        horizontal_context: columns(net.t.value(hctx)),
        vertical,
        horizontal: TreeMarginals::from_stacked(net.t.value(hmarg)),
    })
}

/// Draws a token, redrawing among the untaken ones when a sounded pitch
/// repeats one already chosen at this step. Returns whether a redraw happened.
fn draw_distinct(dist: &[f64], taken: &[u8], rest: u8, rng: &mut ModelRng) -> (u8, bool) {
    let tok = sample_categorical(rng, dist) as u8;
    if tok == rest || !taken.contains(&tok) {
        return (tok, false);
    }
    let masked: Vec<f64> =
        dist.iter().enumerate().map(|(v, &p)| if taken.contains(&(v as u8)) && v as u8 != rest { 0.0 } else { p }).collect();
    let fallback = if masked.iter().sum::<f64>() > 0.0 { sample_categorical(rng, &masked) as u8 } else { rest };
    (fallback, true)
}

/// Decodes from fixed augmented encodings. With a teacher the previous
/// token is read from it; otherwise tokens are drawn from the emitted
/// distributions. Returns `dists[t][k]`.
pub fn decode(
    store: &ParamStore,
    cfg: &ModelConfig,
    z: &[f64],
    aug: &AugmentedEncoding,
    teacher: Option<&KeyedRoll>,
    rng: &mut ModelRng,
) -> Result<Vec<Vec<Vec<f64>>>, ModelError> {
    if let Some(roll) = teacher {
        check_roll(cfg, roll)?;
    }
    if aug.yhat.len() != cfg.n_bars || aug.yhat.iter().any(|b| b.len() != cfg.n_keys) || z.len() != cfg.latent_dim {
        return Err(ModelError::Shape("augmented encoding or latent does not match the config".into()));
    }
    let mut net = Net::new(store, cfg, false);
    let zv = net.t.constant(Matrix::column(z));
    let mut cond = net.zeros(2 * cfg.conductor_hidden);
    let mut prev = vec![net.v.start; cfg.n_keys];
    let mut out = Vec::with_capacity(cfg.steps());
    for u in 0..cfg.n_bars {
        let yhat: Vec<Var> = aug.yhat[u].iter().map(|v| net.t.constant(Matrix::column(v))).collect();
        let (next, e) = net.conductor_step(cond, zv, &yhat);
        cond = next;
        let mut setup: Vec<(Var, Var)> = yhat.iter().map(|&yh| net.decoder_setup(e, yh)).collect();
        for t in u * STEPS_PER_BAR..(u + 1) * STEPS_PER_BAR {
            let mut row = Vec::with_capacity(cfg.n_keys);
            let mut taken = Vec::with_capacity(cfg.n_keys);
            for j in 0..cfg.n_keys {
                let (state, dist) = net.decoder_step(prev[j], setup[j].0, setup[j].1);
                setup[j].0 = state;
                let d = net.t.value(dist).data().to_vec();
                let tok = match teacher {
                    Some(roll) => roll.slot(t, j),
                    None => draw_distinct(&d, &taken, cfg.rest(), rng).0,
                };
                taken.push(tok);
                prev[j] = net.t.embed(net.v.embed, usize::from(tok));
                row.push(d);
            }
            out.push(row);
        }
    }
    Ok(out)
}

/// Per-key argmax at one step. A sounded pitch already claimed by an earlier
/// key falls through to that key's next most probable token (ties break
/// towards the lower token).
pub fn resolve_argmax(dists: &[&[f64]], rest: u8) -> Vec<u8> {
    let mut chosen: Vec<u8> = Vec::with_capacity(dists.len());
    for d in dists {
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
        let tok = order
            .into_iter()
            .map(|v| v as u8)
            .find(|&v| v == rest || !chosen.contains(&v))
            .unwrap_or(rest);
        chosen.push(tok);
    }
    chosen
}

/// Reorders one step's tokens into slot order: sounded pitches descending,
/// rests last.
pub fn canonicalize_step(tokens: &mut [u8], rest: u8) {
    tokens.sort_by(|&a, &b| match (a == rest, b == rest) {
        (true, true) => std::cmp::Ordering::Equal,
        (true, false) => std::cmp::Ordering::Greater,
        (false, true) => std::cmp::Ordering::Less,
        (false, false) => b.cmp(&a),
    });
}

fn canonical_roll(cfg: &ModelConfig, mut slots: Vec<u8>) -> KeyedRoll {
    for row in slots.chunks_mut(cfg.n_keys) {
        canonicalize_step(row, cfg.rest());
    }
    KeyedRoll::from_slots(cfg.steps(), cfg.n_keys, cfg.n_pitches, slots).expect("resolved tokens are distinct")
}

/// Teacher-forced per-step distributions `dists[t][k]` for a window, with
/// the latent drawn from the posterior.
pub fn reconstruct_dists(
    store: &ParamStore,
    cfg: &ModelConfig,
    roll: &KeyedRoll,
    rng: &mut ModelRng,
) -> Result<Vec<Vec<Vec<f64>>>, ModelError> {
    check_roll(cfg, roll)?;
    let eps = standard_normal_vec(rng, cfg.latent_dim);
    let mut net = Net::new(store, cfg, false);
    let pass = teacher_pass(&mut net, roll, Some(&eps))?;
    Ok(pass.dists.iter().map(|row| row.iter().map(|&d| net.t.value(d).data().to_vec()).collect()).collect())
}

/// Teacher-forced argmax reconstruction of a window.
pub fn reconstruct(
    store: &ParamStore,
    cfg: &ModelConfig,
    roll: &KeyedRoll,
    rng: &mut ModelRng,
) -> Result<KeyedRoll, ModelError> {
    let dists = reconstruct_dists(store, cfg, roll, rng)?;
    let mut slots = Vec::with_capacity(cfg.steps() * cfg.n_keys);
    for row in &dists {
        let refs: Vec<&[f64]> = row.iter().map(Vec::as_slice).collect();
        slots.extend(resolve_argmax(&refs, cfg.rest()));
    }
    Ok(canonical_roll(cfg, slots))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub roll: KeyedRoll,
    /// Sounded tokens drawn by the decoder.
    pub emissions: usize,
    /// Draws that repeated a pitch already chosen at the same step.
    pub collisions: usize,
}

impl SampleOutput {
    pub fn collision_rate(&self) -> f64 {
        if self.emissions == 0 {
            0.0
        } else {
            self.collisions as f64 / self.emissions as f64
        }
    }
}

/// Free-running generation from `z ~ N(0, I)`.
///
/// A bar is not known before it is decoded, so bar `u` is attended with the
/// encoding of bar `u - 1` standing in for its own. The first bar is drafted
/// from an all-rest stand-in, which looks the same to every key, and then
/// decoded again from the draft's encoding; only that second pass counts
/// towards the output. Once decoded, each bar is re-encoded and its real
/// embedding joins the horizontal attention for later bars.
pub fn sample(store: &ParamStore, cfg: &ModelConfig, rng: &mut ModelRng) -> Result<SampleOutput, ModelError> {
    let z = standard_normal_vec(rng, cfg.latent_dim);
    let mut net = Net::new(store, cfg, false);
    let zv = net.t.constant(Matrix::column(&z));
    let keys = cfg.n_keys;
    let rest_bar = vec![cfg.rest(); STEPS_PER_BAR];
    let silent = net.encode_bar_key(&rest_bar);
    let start = SamplerState { cond: net.zeros(2 * cfg.conductor_hidden), prev: vec![net.v.start; keys] };
    let mut bar_means: Vec<Var> = Vec::with_capacity(cfg.n_bars);

    let (draft, _) = sample_bar(&mut net, zv, &[], &vec![silent; keys], &start, 0, rng)?;
    let mut stand_in: Vec<Var> = draft.tokens.iter().map(|toks| net.encode_bar_key(toks)).collect();
    let mut state = start;
    let mut slots = vec![0u8; cfg.steps() * keys];
    let (mut emissions, mut collisions) = (0, 0);
    for u in 0..cfg.n_bars {
        let (bar, next) = sample_bar(&mut net, zv, &bar_means, &stand_in, &state, u, rng)?;
        state = next;
        emissions += bar.emissions;
        collisions += bar.collisions;
        for (j, toks) in bar.tokens.iter().enumerate() {
            for (s, &tok) in toks.iter().enumerate() {
                slots[(u * STEPS_PER_BAR + s) * keys + j] = tok;
            }
        }
        stand_in = bar.tokens.iter().map(|toks| net.encode_bar_key(toks)).collect();
        bar_means.push(net.t.mean_n(&stand_in));
    }
    Ok(SampleOutput { roll: canonical_roll(cfg, slots), emissions, collisions })
}

/// Recurrent state carried between sampled bars.
#[derive(Clone)]
struct SamplerState {
    cond: Var,
    prev: Vec<Var>,
}

struct SampledBar {
    /// `tokens[j][s]`.
    tokens: Vec<Vec<u8>>,
    emissions: usize,
    collisions: usize,
}

fn sample_bar(
    net: &mut Net<'_>,
    zv: Var,
    bar_means: &[Var],
    stand_in: &[Var],
    state: &SamplerState,
    u: usize,
    rng: &mut ModelRng,
) -> Result<(SampledBar, SamplerState), ModelError> {
    let cfg = net.cfg;
    let keys = stand_in.len();
    let (vctx, _) = net.tree_context(stand_in, net.v.vert, false)?;
    let mut prefix = bar_means.to_vec();
    prefix.push(net.t.mean_n(stand_in));
    let (hctx, _) = net.tree_context(&prefix, net.v.horiz, !cfg.global_attention)?;
    let yhat: Vec<Var> = (0..keys).map(|j| net.augment(stand_in[j], vctx, j, hctx, u)).collect();
    let (cond, e) = net.conductor_step(state.cond, zv, &yhat);
    let mut setup: Vec<(Var, Var)> = yhat.iter().map(|&yh| net.decoder_setup(e, yh)).collect();
    let mut prev = state.prev.clone();
    let mut bar = SampledBar { tokens: vec![Vec::with_capacity(STEPS_PER_BAR); keys], emissions: 0, collisions: 0 };
    for _ in 0..STEPS_PER_BAR {
        let mut taken = Vec::with_capacity(keys);
        for j in 0..keys {
            let (st, dist) = net.decoder_step(prev[j], setup[j].0, setup[j].1);
            setup[j].0 = st;
            let (tok, collided) = draw_distinct(net.t.value(dist).data(), &taken, cfg.rest(), rng);
            if tok != cfg.rest() || collided {
                bar.emissions += 1;
            }
            bar.collisions += usize::from(collided);
            taken.push(tok);
            bar.tokens[j].push(tok);
            prev[j] = net.t.embed(net.v.embed, usize::from(tok));
        }
    }
    Ok((bar, SamplerState { cond, prev }))
}

/// Loss of one teacher window and the gradient of `total` for every
/// parameter, in store order.
pub struct LossAndGrads {
    pub breakdown: LossBreakdown,
    pub grads: Vec<(String, Matrix)>,
}

/// Loss breakdown and gradients for one window. `eps` is the reparameterization
/// noise; the window's key order is used as given. The focal and permutation
/// terms are both averaged over steps.
pub fn loss_and_grads(
    store: &ParamStore,
    cfg: &ModelConfig,
    roll: &KeyedRoll,
    eps: &[f64],
    focal: FocalConfig,
    weights: LossWeights,
) -> Result<LossAndGrads, ModelError> {
    check_roll(cfg, roll)?;
    let mut net = Net::new(store, cfg, true);
    let pass = teacher_pass(&mut net, roll, Some(eps))?;
    let t = &mut net.t;
    let mut focal_terms = Vec::with_capacity(cfg.steps() * cfg.n_keys);
    let mut perm_terms = Vec::with_capacity(cfg.steps());
    for (step, row) in pass.dists.iter().enumerate() {
        for (k, &d) in row.iter().enumerate() {
            focal_terms.push(focal_var(t, d, usize::from(roll.slot(step, k)), focal));
        }
        perm_terms.push(permutation_var(t, row, cfg.n_pitches));
    }
    let recon = t.mean_n(&focal_terms);
    let perm = t.mean_n(&perm_terms);
    let kl = kl_var(t, pass.mu, pass.log_var);
    let kl_w = t.scale(kl, weights.kl);
    let perm_w = t.scale(perm, weights.perm);
    let total = t.add_n(&[recon, kl_w, perm_w]);

    let breakdown = LossBreakdown::new(t.value(recon).scalar(), t.value(kl).scalar(), t.value(perm).scalar(), weights);
    let mut g = t.backward(total);
    let grads = store
        .iter()
        .zip(&net.leaves)
        .map(|((name, m), &leaf)| {
            let (r, c) = m.shape();
            (name.to_string(), g.take(leaf).unwrap_or_else(|| Matrix::zeros(r, c)))
        })
        .collect();
    Ok(LossAndGrads { breakdown, grads })
}

/// Posterior mean of a window, without sampling.
pub fn posterior_mean(store: &ParamStore, cfg: &ModelConfig, roll: &KeyedRoll) -> Result<Vec<f64>, ModelError> {
    Ok(encode(store, cfg, roll)?.1.mu)
}

/// Vertical (per bar) and horizontal marginals of a window.
pub fn attention_marginals(
    store: &ParamStore,
    cfg: &ModelConfig,
    roll: &KeyedRoll,
) -> Result<(Vec<TreeMarginals>, TreeMarginals), ModelError> {
    check_roll(cfg, roll)?;
    let mut net = Net::new(store, cfg, false);
    let pass = teacher_pass(&mut net, roll, None)?;
    let vertical = pass.vertical.iter().map(|&m| TreeMarginals::from_stacked(net.t.value(m))).collect();
    Ok((vertical, TreeMarginals::from_stacked(net.t.value(pass.horizontal))))
}

pub fn checkpoint_bytes(store: &ParamStore, cfg: &ModelConfig) -> Vec<u8> {
    let records: Vec<Record> = store
        .iter()
        .map(|(name, m)| Record { name: name.to_string(), dims: vec![m.rows(), m.cols()], data: m.data().to_vec() })
        .collect();
    framing::encode(CHECKPOINT_MAGIC, &records, &cfg.to_doc().render())
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ParamStore, ModelConfig), ModelError> {
    let (records, trailer) = framing::decode(bytes, CHECKPOINT_MAGIC)?;
    let doc = KeyValueDoc::parse(&trailer)?;
    doc.reject_unknown(ModelConfig::KEYS)?;
    let mut cfg = ModelConfig::default();
    cfg.apply_doc(&doc)?;
    let mut params = BTreeMap::new();
    for r in records {
        if r.dims.len() != 2 {
            return Err(ModelError::Checkpoint(format!("parameter `{}` has {} dimensions, expected 2", r.name, r.dims.len())));
        }
        let m = Matrix::from_vec(r.dims[0], r.dims[1], r.data);
        if params.insert(r.name.clone(), m).is_some() {
            return Err(ModelError::Checkpoint(format!("duplicate parameter `{}`", r.name)));
        }
    }
    let store = ParamStore { params };
    store.check(&cfg)?;
    Ok((store, cfg))
}

pub fn save_checkpoint(store: &ParamStore, cfg: &ModelConfig, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, checkpoint_bytes(store, cfg))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, ModelConfig), ModelError> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

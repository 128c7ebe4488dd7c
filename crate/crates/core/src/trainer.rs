//! Adam training loop with per-window key permutation, global-norm gradient
//! clipping, KL warmup and periodic held-out evaluation.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{ConfigError, KeyValueDoc};
use crate::eval_metrics::{confusion, ConfusionCounts, Rates};
use crate::losses::{kl_anneal, FocalConfig, LossWeights};
use crate::midi_io::{recompose, Window};
use crate::model::{loss_and_grads, reconstruct, ModelConfig, ModelError, ParamStore};
use crate::numerics::rng::standard_normal_vec;
use crate::numerics::{seeded, Matrix, ModelRng};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}; first non-finite gradient in `{parameter}`")]
    NonFinite { step: usize, parameter: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub kl_warmup_steps: usize,
    pub beta_max: f64,
    pub lambda_pl: f64,
    pub focal: FocalConfig,
    /// Shuffle key slots of every window before each use.
    pub permute_keys: bool,
    pub seed: u64,
    /// Telemetry interval in optimizer steps; 0 disables evaluation rows.
    pub eval_every: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 5.0,
            kl_warmup_steps: 2000,
            beta_max: 0.2,
            lambda_pl: 0.1,
            focal: FocalConfig::default(),
            permute_keys: true,
            seed: 0,
            eval_every: 100,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// Keys understood by [`TrainConfig::apply_doc`]. The seed is shared with
    /// the model configuration and is not listed.
    pub const KEYS: &'static [&'static str] = &[
        "epochs",
        "batch_size",
        "learning_rate",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "grad_clip_norm",
        "kl_warmup_steps",
        "beta_max",
        "lambda_pl",
        "focal_gamma",
        "focal_alpha",
        "permute_keys",
        "eval_every",
        "max_steps",
    ];

    pub fn to_doc(&self) -> KeyValueDoc {
        let mut d = KeyValueDoc::default();
        d.set("epochs", self.epochs);
        d.set("batch_size", self.batch_size);
        d.set("learning_rate", self.learning_rate);
        d.set("adam_beta1", self.adam_beta1);
        d.set("adam_beta2", self.adam_beta2);
        d.set("adam_eps", self.adam_eps);
        d.set("grad_clip_norm", self.grad_clip_norm);
        d.set("kl_warmup_steps", self.kl_warmup_steps);
        d.set("beta_max", self.beta_max);
        d.set("lambda_pl", self.lambda_pl);
        d.set("focal_gamma", self.focal.gamma);
        d.set("focal_alpha", self.focal.alpha);
        d.set("permute_keys", self.permute_keys);
        d.set("eval_every", self.eval_every);
        d.set("max_steps", self.max_steps.map_or_else(|| "none".to_string(), |m| m.to_string()));
        d
    }

    /// Overwrites the fields present in `doc`; other keys are ignored.
    /// `max_steps = none` removes the step cap.
    pub fn apply_doc(&mut self, doc: &KeyValueDoc) -> Result<(), ConfigError> {
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = doc.get(stringify!($field))? {
                    self.$field = v;
                }
            )*};
        }
        take!(
            epochs,
            batch_size,
            learning_rate,
            adam_beta1,
            adam_beta2,
            adam_eps,
            grad_clip_norm,
            kl_warmup_steps,
            beta_max,
            lambda_pl,
            permute_keys,
            eval_every
        );
        if let Some(v) = doc.get("focal_gamma")? {
            self.focal.gamma = v;
        }
        if let Some(v) = doc.get("focal_alpha")? {
            self.focal.alpha = v;
        }
        match doc.get_raw("max_steps") {
            Some("none") => self.max_steps = None,
            Some(_) => self.max_steps = doc.get("max_steps")?,
            None => {}
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("grad_clip_norm", self.grad_clip_norm),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("epochs and batch_size must be at least 1".into()));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(TrainError::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.focal.gamma < 0.0 || !(self.focal.alpha > 0.0 && self.focal.alpha <= 1.0) {
            return Err(TrainError::Config("focal gamma must be >= 0 and alpha in (0, 1]".into()));
        }
        if self.beta_max < 0.0 || self.lambda_pl < 0.0 {
            return Err(TrainError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRow {
    pub step: usize,
    pub recon: f64,
    pub kl: f64,
    pub perm: f64,
    pub ppv: Option<f64>,
    pub tpr: Option<f64>,
}

pub const TELEMETRY_HEADER: &str = "step,recon,kl,perm,ppv,tpr";

pub fn telemetry_csv(rows: &[TelemetryRow]) -> String {
    let opt = |x: Option<f64>| x.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
    let mut out = String::from(TELEMETRY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{},{}\n",
            r.step,
            r.recon,
            r.kl,
            r.perm,
            opt(r.ppv),
            opt(r.tpr)
        ));
    }
    out
}

/// Per-step training losses, one entry per optimizer update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub recon: f64,
    pub kl: f64,
    pub perm: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub store: ParamStore,
    pub telemetry: Vec<TelemetryRow>,
    pub losses: Vec<StepLoss>,
}

/// Scales `grads` so their joint Frobenius norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store.iter().map(|(_, p)| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, store: &mut ParamStore, grads: &[Matrix], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (((pk, mk), vk), &gk) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mk = b1 * *mk + (1.0 - b1) * gk;
                *vk = b2 * *vk + (1.0 - b2) * gk * gk;
                *pk -= cfg.learning_rate * (*mk / c1) / ((*vk / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

fn random_permutation(rng: &mut ModelRng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Pooled confusion counts of teacher-forced reconstructions.
pub fn evaluate(
    store: &ParamStore,
    cfg: &ModelConfig,
    windows: &[Window],
    rng: &mut ModelRng,
) -> Result<ConfusionCounts, ModelError> {
    let mut total = ConfusionCounts::default();
    for w in windows {
        let rec = reconstruct(store, cfg, &w.roll, rng)?;
        total += confusion(&recompose(&rec), &recompose(&w.roll)).expect("reconstruction keeps the window shape");
    }
    Ok(total)
}

/// Trains from `store` on `corpus`; telemetry evaluates on `held_out`
/// (the training corpus when empty).
pub fn train(
    corpus: &[Window],
    held_out: &[Window],
    mut store: ParamStore,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    tcfg.validate()?;
    store.check(cfg)?;
    let eval_set = if held_out.is_empty() { corpus } else { held_out };
    let mut rng = seeded(tcfg.seed);
    let mut adam = Adam::new(&store);
    let mut telemetry = Vec::new();
    let mut losses = Vec::new();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..corpus.len()).collect();

    'epochs: for _ in 0..tcfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(tcfg.batch_size) {
            if tcfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let weights = LossWeights {
                kl: kl_anneal(step, tcfg.kl_warmup_steps, tcfg.beta_max),
                perm: tcfg.lambda_pl,
            };
            let mut grads: Vec<Matrix> = store.iter().map(|(_, p)| Matrix::zeros(p.rows(), p.cols())).collect();
            let mut acc = StepLoss { recon: 0.0, kl: 0.0, perm: 0.0, total: 0.0 };
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let roll = &corpus[idx].roll;
                let roll = if tcfg.permute_keys { roll.permute_keys(&random_permutation(&mut rng, roll.keys())) } else { roll.clone() };
                let eps = standard_normal_vec(&mut rng, cfg.latent_dim);
                let out = loss_and_grads(&store, cfg, &roll, &eps, tcfg.focal, weights)?;
                for (g, (_, gi)) in grads.iter_mut().zip(&out.grads) {
                    g.add_scaled(gi, scale);
                }
                let b = out.breakdown;
                acc.recon += scale * b.recon_focal;
                acc.kl += scale * b.kl;
                acc.perm += scale * b.perm;
                acc.total += scale * b.total;
            }
            if !acc.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                let parameter = store
                    .iter()
                    .zip(&grads)
                    .find(|((_, p), g)| !g.is_finite() || !p.is_finite())
                    .map_or_else(|| "(loss only)".to_string(), |((n, _), _)| n.to_string());
                return Err(TrainError::NonFinite { step, parameter });
            }
            clip_global_norm(&mut grads, tcfg.grad_clip_norm);
            adam.step(&mut store, &grads, tcfg);
            losses.push(acc);
            step += 1;

            if tcfg.eval_every > 0 && step % tcfg.eval_every == 0 {
                let mut eval_rng = seeded(tcfg.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let rates: Rates = evaluate(&store, cfg, eval_set, &mut eval_rng)?.rates();
                telemetry.push(TelemetryRow {
                    step,
                    recon: acc.recon,
                    kl: acc.kl,
                    perm: acc.perm,
                    ppv: rates.ppv,
                    tpr: rates.tpr,
                });
            }
        }
    }
    Ok(TrainReport { store, telemetry, losses })
}

/// Seeded shuffle followed by a split. Both sides are non-empty whenever
/// there are at least two items.
pub fn split_corpus<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), TrainError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(TrainError::Config(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut seeded(seed));
    let n = items.len();
    let mut n_train = (fraction * n as f64).round() as usize;
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    }
    let pick = |ids: &[usize]| ids.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    Ok((pick(&idx[..n_train]), pick(&idx[n_train..])))
}

/// Derives an independent stream from a base seed.
pub fn derived_seed(seed: u64, salt: u64) -> u64 {
    seeded(seed ^ salt.wrapping_mul(0xd1b5_4a32_d192_ed03)).random()
}

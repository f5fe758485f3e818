//! The assembled network: MISS substitution, input projection, CLS tokens,
//! positional encoding, masked encoder and heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, AttnScale, EncoderConfig};
use crate::error::{Error, Result};
use crate::graphprep::FeatureMatrix;
use crate::heads::{self, LossTerms, LossWeights, PredictionBundle, Predictions};
use crate::moeproj::{projection, ProjectOptions, ProjectionDims, RoutingRecord};
use crate::numkit::{
    finite_diff_check, init, store_grads, Binder, GradCheckReport, ParamStore, Real, Tape, Tensor,
    Var,
};
use crate::seqbuild::{
    build_self_sequence, mask_for_len, resolve_flags, seq_len, MissFlags, MissPolicy, TokenBatch,
    SLOT_CLS_S, SLOT_TEXT, SLOT_VISUAL,
};

const INIT_STD: f64 = 0.02;
const EVAL_CHUNK: usize = 1024;

/// Where the cold-start prediction comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentMode {
    /// The student-CLS head of the transformer itself.
    #[default]
    Selfteach,
    /// A separate perceptron on the concatenated self features, taught by
    /// the teacher.
    Separate,
}

impl std::str::FromStr for StudentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "selfteach" => Ok(StudentMode::Selfteach),
            "separate" => Ok(StudentMode::Separate),
            other => Err(Error::input(
                "student",
                format!("expected `selfteach` or `separate`, got `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_in: usize,
    pub classes: usize,
    pub k: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub scale: AttnScale,
    /// Registered projection strategy name (`moe` or `shared`).
    pub projection: String,
    pub experts: usize,
    pub k_hat: usize,
    pub dropout_in: f64,
    pub dropout_hidden: f64,
    pub student: StudentMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 0,
            classes: 0,
            k: 2,
            hidden_dim: 512,
            layers: 2,
            heads: 2,
            ffn_mult: 2,
            scale: AttnScale::D,
            projection: "moe".into(),
            experts: 6,
            k_hat: 2,
            dropout_in: 0.2,
            dropout_hidden: 0.5,
            student: StudentMode::Selfteach,
        }
    }
}

impl ModelConfig {
    pub fn seq_len(&self) -> usize {
        seq_len(self.k)
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d: self.hidden_dim,
            heads: self.heads,
            layers: self.layers,
            ffn_mult: self.ffn_mult,
            scale: self.scale,
            attn_dropout: self.dropout_hidden,
            ffn_dropout: self.dropout_hidden,
        }
    }

    pub fn projection_dims(&self) -> ProjectionDims {
        ProjectionDims {
            d_in: self.d_in,
            d: self.hidden_dim,
            len: self.seq_len(),
            experts: self.experts,
            k_hat: self.k_hat,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 {
            return Err(Error::input("d_in", "feature width must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::input("classes", format!("need at least 2, got {}", self.classes)));
        }
        if self.k == 0 {
            return Err(Error::input("k", "hop count must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_in) {
            return Err(Error::input("dropout_in", format!("{} outside [0, 1)", self.dropout_in)));
        }
        self.encoder().validate()?;
        projection::<f32>(&self.projection, &self.projection_dims())?;
        Ok(())
    }
}

/// Training-time switches for one forward pass.
pub struct ForwardOptions<'a, R: ?Sized> {
    /// Dropout source; `None` runs in eval mode.
    pub rng: Option<&'a mut R>,
    pub route_override: Option<&'a [bool]>,
}

impl<R: ?Sized> Default for ForwardOptions<'_, R> {
    fn default() -> Self {
        Self {
            rng: None,
            route_override: None,
        }
    }
}

pub struct Forward {
    pub pred: Predictions,
    pub moe_loss: Option<Var>,
    pub routing: Option<RoutingRecord>,
    /// Output of the separate student, when configured.
    pub separate: Option<Var>,
}

impl Forward {
    /// The distribution used for cold-start predictions.
    pub fn student(&self) -> Var {
        self.separate.unwrap_or(self.pred.z_s)
    }
}

/// Registers every parameter of a fresh model, in a fixed order.
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let (d_in, d) = (cfg.d_in, cfg.hidden_dim);
    store.insert("tokens.miss_text", init::normal(rng, vec![1, d_in], INIT_STD))?;
    store.insert("tokens.miss_visual", init::normal(rng, vec![1, d_in], INIT_STD))?;
    store.insert("tokens.cls_s", init::normal(rng, vec![1, d], INIT_STD))?;
    store.insert("tokens.cls_t", init::normal(rng, vec![1, d], INIT_STD))?;
    let proj = projection::<f32>(&cfg.projection, &cfg.projection_dims())?;
    let mut dyn_rng = ChaCha8Rng::seed_from_u64(rng.random());
    proj.init_params(&mut store, &mut dyn_rng)?;
    encoder::init_params(&cfg.encoder(), cfg.seq_len(), &mut store, rng)?;
    heads::init_params(&mut store, rng, d, cfg.classes)?;
    if cfg.student == StudentMode::Separate {
        heads::init_mlp(&mut store, rng, "student", 2 * d_in, d, cfg.classes)?;
    }
    Ok(store)
}

/// Runs the network on `batch`. Full sequences yield student and teacher
/// outputs; self-only sequences (three slots) yield the student alone.
pub fn forward<T: Real, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    params: &mut Binder<'_, T>,
    batch: &TokenBatch,
    mut opts: ForwardOptions<'_, R>,
) -> Result<Forward> {
    let (n, len, d_in) = (batch.n, batch.len, batch.d_in);
    if d_in != cfg.d_in {
        return Err(Error::input("d_in", format!("batch width {d_in}, model expects {}", cfg.d_in)));
    }
    if len != cfg.seq_len() && len != crate::seqbuild::SELF_LEN {
        return Err(Error::input(
            "k",
            format!("sequence length {len} does not match K = {}", cfg.k),
        ));
    }
    let flags = resolve_flags::<ChaCha8Rng>(n, MissPolicy::Fixed(&batch.miss_flags))?;

    // Input-space token table: batch tokens, then the two MISS rows.
    let base = tape.constant(Tensor::from_rows(
        n * len,
        d_in,
        batch.seq.iter().map(|&v| T::lit(v as f64)).collect(),
    ));
    let miss_t = params.get(tape, "tokens.miss_text");
    let miss_v = params.get(tape, "tokens.miss_visual");
    let table = tape.concat_rows(&[base, miss_t, miss_v])?;
    let (miss_t_row, miss_v_row) = (n * len, n * len + 1);

    let is_cls = |slot: usize| slot == SLOT_CLS_S || (len > crate::seqbuild::SELF_LEN && slot == len - 1);
    let mut src = Vec::new();
    let mut positions = Vec::new();
    // U rows come from [projected; cls_s; cls_t]
    enum Pick {
        Routed(usize),
        ClsS,
        ClsT,
    }
    let mut picks = Vec::with_capacity(n * len);
    for (b, f) in flags.iter().enumerate() {
        for slot in 0..len {
            if slot == SLOT_CLS_S {
                picks.push(Pick::ClsS);
                continue;
            }
            if is_cls(slot) {
                picks.push(Pick::ClsT);
                continue;
            }
            let row = if slot == SLOT_TEXT && f.text_missing {
                miss_t_row
            } else if slot == SLOT_VISUAL && f.visual_missing {
                miss_v_row
            } else {
                b * len + slot
            };
            picks.push(Pick::Routed(src.len()));
            src.push(row);
            positions.push(slot);
        }
    }
    let routed = positions.len();
    let assemble: Vec<usize> = picks
        .into_iter()
        .map(|p| match p {
            Pick::Routed(r) => r,
            Pick::ClsS => routed,
            Pick::ClsT => routed + 1,
        })
        .collect();

    let s = tape.gather_rows(table, src)?;
    let proj = projection::<T>(&cfg.projection, &cfg.projection_dims())?;
    let out = proj.project(
        tape,
        params,
        s,
        &positions,
        ProjectOptions {
            route_override: opts.route_override,
        },
    )?;
    let cls_s = params.get(tape, "tokens.cls_s");
    let cls_t = params.get(tape, "tokens.cls_t");
    let pool = tape.concat_rows(&[out.tokens, cls_s, cls_t])?;
    let u = tape.gather_rows(pool, assemble)?;
    let u = encoder::maybe_dropout(tape, u, cfg.dropout_in, opts.rng.as_deref_mut())?;
    let h = encoder::add_positions(tape, params, u, n, len)?;
    let mask = mask_for_len(len);
    let h = encoder::encode(tape, params, &cfg.encoder(), h, n, &mask, opts.rng.as_deref_mut())?;
    let pred = heads::predict(tape, params, h, n, len)?;

    let separate = if cfg.student == StudentMode::Separate {
        let mut x = Vec::with_capacity(n * 2 * d_in);
        for (b, f) in flags.iter().enumerate() {
            for (slot, missing) in [(SLOT_TEXT, f.text_missing), (SLOT_VISUAL, f.visual_missing)] {
                if missing {
                    x.extend(std::iter::repeat_n(T::zero(), d_in));
                } else {
                    x.extend(batch.token(b, slot).iter().map(|&v| T::lit(v as f64)));
                }
            }
        }
        let x = tape.constant(Tensor::from_rows(n, 2 * d_in, x));
        Some(heads::mlp_probs(tape, params, "student", x)?)
    } else {
        None
    };
    Ok(Forward {
        pred,
        moe_loss: out.aux_loss,
        routing: out.routing,
        separate,
    })
}

/// Loss of a full-sequence forward pass.
pub fn loss_terms<T: Real>(
    tape: &mut Tape<T>,
    fwd: &Forward,
    labels: &[i64],
    weights: &LossWeights,
) -> Result<LossTerms> {
    heads::total_loss(tape, &fwd.pred, fwd.separate, None, labels, fwd.moe_loss, weights)
}

/// Trained parameters plus the configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct NtsFormer {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl NtsFormer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&config, &mut rng)?;
        Ok(Self { config, params })
    }

    /// Eval-mode forward on full sequences.
    pub fn predict(&self, batch: &TokenBatch) -> Result<PredictionBundle> {
        let mut tape = Tape::<f32>::new();
        let mut bind = Binder::new(&self.params);
        let fwd = forward::<f32, ChaCha8Rng>(&self.config, &mut tape, &mut bind, batch, ForwardOptions::default())?;
        let mut bundle = PredictionBundle::from_tape(&tape, &fwd.pred)?;
        if let Some(sep) = fwd.separate {
            bundle.z_s = tape.value(sep).data().to_vec();
        }
        Ok(bundle)
    }

    /// Student probabilities from self features alone. A missing matrix
    /// marks that modality missing for every node; `flags` adds per-node
    /// choices on top.
    pub fn infer_cold_start(
        &self,
        x_t: Option<&FeatureMatrix>,
        x_v: Option<&FeatureMatrix>,
        flags: Option<&[MissFlags]>,
    ) -> Result<Vec<f32>> {
        let d_in = self.config.d_in;
        let n = match (x_t, x_v) {
            (Some(t), _) => t.n,
            (None, Some(v)) => v.n,
            (None, None) => {
                return Err(Error::input("features", "both modalities absent"));
            }
        };
        let zeros_t;
        let zeros_v;
        let xt = match x_t {
            Some(t) => t,
            None => {
                zeros_t = FeatureMatrix::zeros(n, d_in, crate::graphprep::Modality::Text);
                &zeros_t
            }
        };
        let xv = match x_v {
            Some(v) => v,
            None => {
                zeros_v = FeatureMatrix::zeros(n, d_in, crate::graphprep::Modality::Visual);
                &zeros_v
            }
        };
        if xt.d != d_in || xv.d != d_in || xt.n != xv.n {
            return Err(Error::input(
                "features",
                format!("expected two {n}x{d_in} matrices, got {}x{} and {}x{}", xt.n, xt.d, xv.n, xv.d),
            ));
        }
        let mut all_flags = match flags {
            Some(f) if f.len() != n => {
                return Err(Error::input("miss_flags", format!("{} flags for {n} nodes", f.len())));
            }
            Some(f) => f.to_vec(),
            None => vec![MissFlags::NONE; n],
        };
        for f in &mut all_flags {
            f.text_missing |= x_t.is_none();
            f.visual_missing |= x_v.is_none();
        }
        let nodes: Vec<usize> = (0..n).collect();
        let mut out = Vec::with_capacity(n * self.config.classes);
        for chunk in nodes.chunks(EVAL_CHUNK) {
            let mut batch = build_self_sequence(xt, xv, chunk)?;
            batch.miss_flags = chunk.iter().map(|&i| all_flags[i]).collect();
            let mut tape = Tape::<f32>::new();
            let mut bind = Binder::new(&self.params);
            let fwd = forward::<f32, ChaCha8Rng>(
                &self.config,
                &mut tape,
                &mut bind,
                &batch,
                ForwardOptions::default(),
            )?;
            out.extend_from_slice(tape.value(fwd.student()).data());
        }
        Ok(out)
    }
}

/// Redraws every parameter at unit scale: matrices `N(0, 1/rows)`, vectors
/// around their initial value with spread 0.1. Gives a generic point for
/// gradient checks, away from the near-degenerate layer-norm inputs of a
/// fresh initialization.
pub fn randomize_params<R: Rng + ?Sized>(params: &mut ParamStore<f32>, rng: &mut R) {
    use rand_distr::{Distribution, Normal};
    for p in params.iter_mut() {
        let shape = p.tensor.shape().to_vec();
        let (keep, std) = match shape.as_slice() {
            [rows, _] if *rows > 1 => (0.0, 1.0 / (*rows as f64).sqrt()),
            _ => (1.0, 0.1),
        };
        let dist = Normal::new(0.0, std).expect("finite std");
        for v in p.tensor.data_mut() {
            *v = keep * *v + dist.sample(rng) as f32;
        }
    }
}

/// Compares analytic gradients of the full loss with 64-bit central
/// differences. Dropout is off. Expert routing and the teacher target of the
/// self-teaching term are held at their values under the unperturbed
/// parameters, so the differenced function is the one the tape differentiates.
pub fn gradient_check(
    model: &NtsFormer,
    batch: &TokenBatch,
    labels: &[i64],
    weights: &LossWeights,
    step: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let params = model.params.cast::<f64>();
    let cfg = &model.config;
    type Frozen<'a> = Option<(&'a [bool], &'a Tensor<f64>)>;
    let eval = |p: &ParamStore<f64>, frozen: Frozen<'_>| -> Result<(Tape<f64>, Var, Forward)> {
        let mut tape = Tape::<f64>::new();
        let mut bind = Binder::new(p);
        let fwd = forward::<f64, ChaCha8Rng>(
            cfg,
            &mut tape,
            &mut bind,
            batch,
            ForwardOptions {
                rng: None,
                route_override: frozen.map(|f| f.0),
            },
        )?;
        let target = frozen.map(|f| tape.constant(f.1.clone()));
        let terms = heads::total_loss(
            &mut tape,
            &fwd.pred,
            fwd.separate,
            target,
            labels,
            fwd.moe_loss,
            weights,
        )?;
        Ok((tape, terms.total, fwd))
    };
    let (tape, loss, fwd) = eval(&params, None)?;
    let grads = tape.backward(loss)?;
    let mut with_grads = params.clone();
    store_grads(&mut with_grads, &grads);
    let teacher = fwd
        .pred
        .teacher
        .ok_or_else(|| Error::contract("gradient_check", "needs full sequences"))?;
    let target = tape.value(teacher.z_t).clone();
    let route = fwd.routing.map(|r| r.topk).unwrap_or_default();
    finite_diff_check(
        |p| {
            let (t, l, _) = eval(p, Some((&route, &target)))?;
            Ok(t.value(l).item())
        },
        &with_grads,
        step,
        samples,
        seed,
    )
}

//! Student and teacher classifiers and the training objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{init, Binder, ParamStore, Real, Tape, Tensor, Var};
use crate::seqbuild::{SELF_LEN, SLOT_CLS_S};

const INIT_STD: f64 = 0.02;

/// Registers a two-layer perceptron `d_in → hidden → classes` under `prefix`.
pub fn init_mlp<R: Rng + ?Sized>(
    store: &mut ParamStore<f32>,
    rng: &mut R,
    prefix: &str,
    d_in: usize,
    hidden: usize,
    classes: usize,
) -> Result<()> {
    store.insert(format!("{prefix}.w1"), init::trunc_normal(rng, vec![d_in, hidden], INIT_STD))?;
    store.insert(format!("{prefix}.b1"), Tensor::zeros(vec![hidden]))?;
    store.insert(format!("{prefix}.w2"), init::trunc_normal(rng, vec![hidden, classes], INIT_STD))?;
    store.insert(format!("{prefix}.b2"), Tensor::zeros(vec![classes]))?;
    Ok(())
}

pub fn init_params<R: Rng + ?Sized>(
    store: &mut ParamStore<f32>,
    rng: &mut R,
    d: usize,
    classes: usize,
) -> Result<()> {
    if classes < 2 {
        return Err(Error::input("classes", format!("need at least 2, got {classes}")));
    }
    init_mlp(store, rng, "head_s", d, d, classes)?;
    init_mlp(store, rng, "head_t", d, d, classes)
}

/// `softmax(W2·GELU(W1·x + b1) + b2)` row-wise.
pub fn mlp_probs<T: Real>(
    tape: &mut Tape<T>,
    params: &mut Binder<'_, T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w1 = params.get(tape, &format!("{prefix}.w1"));
    let b1 = params.get(tape, &format!("{prefix}.b1"));
    let w2 = params.get(tape, &format!("{prefix}.w2"));
    let b2 = params.get(tape, &format!("{prefix}.b2"));
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.gelu(h);
    let z = tape.matmul(h, w2)?;
    let z = tape.add_row(z, b2)?;
    tape.softmax_rows(z)
}

/// Head outputs on a tape. Teacher fields are absent for self-only input.
#[derive(Debug, Clone, Copy)]
pub struct Predictions {
    pub z_s: Var,
    pub teacher: Option<TeacherVars>,
}

#[derive(Debug, Clone, Copy)]
pub struct TeacherVars {
    pub z_t1: Var,
    pub z_t2: Var,
    pub z_t: Var,
}

/// Student reads the student-CLS state; the teacher reads the last two
/// states and averages the two probability rows.
pub fn predict<T: Real>(
    tape: &mut Tape<T>,
    params: &mut Binder<'_, T>,
    h: Var,
    batch: usize,
    len: usize,
) -> Result<Predictions> {
    if tape.value(h).rows() != batch * len {
        return Err(Error::dim("predict", format!("expected {} rows", batch * len)));
    }
    let pick = |slot: usize| (0..batch).map(|b| b * len + slot).collect::<Vec<_>>();
    let hs = tape.gather_rows(h, pick(SLOT_CLS_S))?;
    let z_s = mlp_probs(tape, params, "head_s", hs)?;
    let teacher = if len > SELF_LEN {
        let h1 = tape.gather_rows(h, pick(len - 1))?;
        let h2 = tape.gather_rows(h, pick(len - 2))?;
        let z_t1 = mlp_probs(tape, params, "head_t", h1)?;
        let z_t2 = mlp_probs(tape, params, "head_t", h2)?;
        let sum = tape.add(z_t1, z_t2)?;
        let z_t = tape.scale(sum, T::lit(0.5));
        Some(TeacherVars { z_t1, z_t2, z_t })
    } else {
        None
    };
    Ok(Predictions { z_s, teacher })
}

/// Plain-value copy of a prediction set.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBundle {
    pub n: usize,
    pub classes: usize,
    pub z_s: Vec<f32>,
    pub z_t1: Vec<f32>,
    pub z_t2: Vec<f32>,
    pub z_t: Vec<f32>,
}

impl PredictionBundle {
    pub fn from_tape<T: Real>(tape: &Tape<T>, p: &Predictions) -> Result<Self> {
        let t = p
            .teacher
            .ok_or_else(|| Error::contract("bundle", "teacher outputs need the full sequence"))?;
        let grab = |v: Var| -> Vec<f32> { tape.value(v).data().iter().map(|x| x.as_f64() as f32).collect() };
        let zs = tape.value(p.z_s);
        Ok(Self {
            n: zs.rows(),
            classes: zs.cols(),
            z_s: grab(p.z_s),
            z_t1: grab(t.z_t1),
            z_t2: grab(t.z_t2),
            z_t: grab(t.z_t),
        })
    }
}

/// Index of the largest entry in each row; ties go to the lower class.
pub fn argmax_rows(probs: &[f32], classes: usize) -> Vec<usize> {
    probs
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `KL(stopgrad(Z_T) ‖ Z_S)` over the given rows (all rows when `rows` is
/// `None`).
pub fn self_teach_loss<T: Real>(
    tape: &mut Tape<T>,
    z_t: Var,
    z_s: Var,
    rows: Option<&[usize]>,
) -> Result<Var> {
    let target = tape.detach(z_t);
    match rows {
        None => tape.kl_div(target, z_s),
        Some(idx) => {
            let p = tape.gather_rows(target, idx.to_vec())?;
            let q = tape.gather_rows(z_s, idx.to_vec())?;
            tape.kl_div(p, q)
        }
    }
}

/// Which batch rows the self-teaching term covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StScope {
    #[default]
    All,
    Labeled,
}

impl std::str::FromStr for StScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(StScope::All),
            "labeled" => Ok(StScope::Labeled),
            other => Err(Error::input("st_scope", format!("expected `all` or `labeled`, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
    pub st_scope: StScope,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma: 0.1,
            st_scope: StScope::All,
        }
    }
}

/// Loss terms on a tape. `total` is what gets differentiated.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub st: Var,
    pub moe: Option<Var>,
}

/// `CE(Z_T) + λ·KL(stopgrad(Z_T) ‖ student) + γ·L_MoE`. `student` overrides
/// which distribution is taught (a separate student network, for example);
/// `target` replaces the teacher distribution inside the KL term.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: &Predictions,
    student: Option<Var>,
    target: Option<Var>,
    labels: &[i64],
    moe_loss: Option<Var>,
    w: &LossWeights,
) -> Result<LossTerms> {
    let t = pred
        .teacher
        .ok_or_else(|| Error::contract("total_loss", "teacher outputs need the full sequence"))?;
    let ce = tape.cross_entropy(t.z_t, labels)?;
    let labeled: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] >= 0).collect();
    let rows = match w.st_scope {
        StScope::All => None,
        StScope::Labeled => Some(labeled.as_slice()),
    };
    let st = self_teach_loss(tape, target.unwrap_or(t.z_t), student.unwrap_or(pred.z_s), rows)?;
    let st_w = tape.scale(st, T::lit(w.lambda));
    let mut total = tape.add(ce, st_w)?;
    if let Some(m) = moe_loss {
        let m_w = tape.scale(m, T::lit(w.gamma));
        total = tape.add(total, m_w)?;
    }
    Ok(LossTerms {
        total,
        ce,
        st,
        moe: moe_loss,
    })
}

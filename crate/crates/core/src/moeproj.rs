//! Input projection from `d_in` token space into the `d`-dimensional model
//! space.
//!
//! Projections are pluggable: each strategy implements [`InputProjection`]
//! and is registered by name in a [`ProjectionRegistry`]. The built-ins are
//! `moe` (position-aware top-k routing over `M` experts plus a shared expert)
//! and `shared` (the shared expert alone, i.e. the no-MoE ablation).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{init, softmax_row, Binder, ParamStore, Real, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// Sizes every projection strategy needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionDims {
    pub d_in: usize,
    pub d: usize,
    /// Width of the one-hot position code (the full sequence length).
    pub len: usize,
    pub experts: usize,
    pub k_hat: usize,
}

/// Gate scores and top-k selection for `rows` routed tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord {
    pub rows: usize,
    pub experts: usize,
    pub k_hat: usize,
    pub gamma: Vec<f64>,
    pub topk: Vec<bool>,
}

impl RoutingRecord {
    pub fn gamma_row(&self, r: usize) -> &[f64] {
        &self.gamma[r * self.experts..(r + 1) * self.experts]
    }

    pub fn selected(&self, r: usize, m: usize) -> bool {
        self.topk[r * self.experts + m]
    }

    /// Per-expert count of routed tokens.
    pub fn usage(&self) -> Vec<usize> {
        let mut counts = vec![0; self.experts];
        for r in 0..self.rows {
            for (m, c) in counts.iter_mut().enumerate() {
                if self.selected(r, m) {
                    *c += 1;
                }
            }
        }
        counts
    }
}

/// Row-wise top-k: the `k_hat` largest scores, ties toward the lower index.
pub fn topk_route(gamma: &[f64], experts: usize, k_hat: usize) -> Result<Vec<bool>> {
    if k_hat == 0 || k_hat > experts {
        return Err(Error::input(
            "k_hat",
            format!("{k_hat} active experts out of {experts}"),
        ));
    }
    let mut mask = vec![false; gamma.len()];
    let mut order: Vec<usize> = Vec::with_capacity(experts);
    for (row, out) in gamma.chunks(experts).zip(mask.chunks_mut(experts)) {
        order.clear();
        order.extend(0..experts);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &m in &order[..k_hat] {
            out[m] = true;
        }
    }
    Ok(mask)
}

/// `f_m`: share of routing slots taken by expert `m`, normalized by `k_hat`
/// so the shares sum to one.
pub fn routing_fractions(record: &RoutingRecord) -> Vec<f64> {
    let slots = (record.rows * record.k_hat).max(1) as f64;
    record
        .usage()
        .into_iter()
        .map(|c| c as f64 / slots)
        .collect()
}

/// `Σ_m P_m·f_m` with `P_m` the mean gate score of expert `m`.
pub fn load_balance_loss(record: &RoutingRecord) -> f64 {
    if record.rows == 0 {
        return 0.0;
    }
    let f = routing_fractions(record);
    let mut p = vec![0.0; record.experts];
    for r in 0..record.rows {
        for (pm, g) in p.iter_mut().zip(record.gamma_row(r)) {
            *pm += g;
        }
    }
    p.iter()
        .zip(&f)
        .map(|(pm, fm)| pm / record.rows as f64 * fm)
        .sum()
}

fn gate_input_rows(tokens: &[f32], d_in: usize, positions: &[usize], len: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(positions.len() * (d_in + len));
    for (r, &pos) in positions.iter().enumerate() {
        out.extend_from_slice(&tokens[r * d_in..(r + 1) * d_in]);
        out.extend((0..len).map(|j| if j == pos { 1.0 } else { 0.0 }));
    }
    out
}

/// `γ = softmax([token ‖ e_position] · W_gate)` for each routed token,
/// computed outside any tape. `tokens` is `[rows × d_in]`.
pub fn gate_scores(
    tokens: &[f32],
    positions: &[usize],
    w_gate: &Tensor<f32>,
    dims: &ProjectionDims,
) -> Result<RoutingRecord> {
    let width = dims.d_in + dims.len;
    if w_gate.shape() != [width, dims.experts] {
        return Err(Error::dim(
            "gate_scores",
            format!("W_gate is {:?}, expected [{width}, {}]", w_gate.shape(), dims.experts),
        ));
    }
    if tokens.len() != positions.len() * dims.d_in || positions.iter().any(|&p| p >= dims.len) {
        return Err(Error::dim("gate_scores", "tokens/positions do not match dims"));
    }
    let input = gate_input_rows(tokens, dims.d_in, positions, dims.len);
    let mut gamma = Vec::with_capacity(positions.len() * dims.experts);
    let mut logits = vec![0.0f64; dims.experts];
    for row in input.chunks(width) {
        logits.iter_mut().for_each(|l| *l = 0.0);
        for (i, &x) in row.iter().enumerate() {
            if x != 0.0 {
                for (l, &w) in logits.iter_mut().zip(w_gate.row(i)) {
                    *l += x as f64 * w as f64;
                }
            }
        }
        gamma.extend(softmax_row(&logits)?);
    }
    let topk = topk_route(&gamma, dims.experts, dims.k_hat)?;
    Ok(RoutingRecord {
        rows: positions.len(),
        experts: dims.experts,
        k_hat: dims.k_hat,
        gamma,
        topk,
    })
}

/// Result of projecting routed tokens on a tape.
pub struct Projected {
    /// `[rows × d]` projected tokens.
    pub tokens: Var,
    /// Load-balancing regularizer, when the strategy has one.
    pub aux_loss: Option<Var>,
    pub routing: Option<RoutingRecord>,
}

/// Options that alter a projection's forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProjectOptions<'a> {
    /// Replaces the top-k selection (row-major `[rows × experts]`). Used to
    /// hold routing fixed while probing a piecewise-smooth loss.
    pub route_override: Option<&'a [bool]>,
}

/// A strategy mapping `d_in` tokens to model space.
pub trait InputProjection<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Registers and initializes this strategy's parameters.
    fn init_params(&self, store: &mut ParamStore<f32>, rng: &mut dyn rand::RngCore) -> Result<()>;

    /// Projects `tokens` (`[rows × d_in]`) whose sequence slots are
    /// `positions`. Tokens never mix: row `r` of the output depends only on
    /// row `r` of the input and its position.
    fn project(
        &self,
        tape: &mut Tape<T>,
        params: &mut Binder<'_, T>,
        tokens: Var,
        positions: &[usize],
        opts: ProjectOptions<'_>,
    ) -> Result<Projected>;
}

pub type ProjectionCtor<T> = fn(&ProjectionDims) -> Result<Box<dyn InputProjection<T>>>;

/// Name → constructor table for projection strategies.
pub struct ProjectionRegistry<T: Real> {
    entries: BTreeMap<&'static str, ProjectionCtor<T>>,
}

impl<T: Real> ProjectionRegistry<T> {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register("moe", MoeProjection::construct::<T>);
        reg.register("shared", SharedProjection::construct::<T>);
        reg
    }

    pub fn register(&mut self, name: &'static str, ctor: ProjectionCtor<T>) {
        self.entries.insert(name, ctor);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn build(&self, name: &str, dims: &ProjectionDims) -> Result<Box<dyn InputProjection<T>>> {
        match self.entries.get(name) {
            Some(ctor) => ctor(dims),
            None => Err(Error::input(
                "projection",
                format!("unknown strategy `{name}` (known: {})", self.names().join(", ")),
            )),
        }
    }
}

/// Looks up a built-in projection by name.
pub fn projection<T: Real>(name: &str, dims: &ProjectionDims) -> Result<Box<dyn InputProjection<T>>> {
    ProjectionRegistry::<T>::with_builtins().build(name, dims)
}

/// Two-layer perceptron `d_in → d → d` (GELU between) followed by a layer
/// norm, all parameters under `prefix`.
fn expert_params(
    store: &mut ParamStore<f32>,
    rng: &mut dyn rand::RngCore,
    prefix: &str,
    d_in: usize,
    d: usize,
) -> Result<()> {
    store.insert(format!("{prefix}.w1"), init::trunc_normal(rng, vec![d_in, d], INIT_STD))?;
    store.insert(format!("{prefix}.b1"), Tensor::zeros(vec![d]))?;
    store.insert(format!("{prefix}.w2"), init::trunc_normal(rng, vec![d, d], INIT_STD))?;
    store.insert(format!("{prefix}.b2"), Tensor::zeros(vec![d]))?;
    store.insert(format!("{prefix}.ln_g"), init::ones(vec![d]))?;
    store.insert(format!("{prefix}.ln_b"), Tensor::zeros(vec![d]))?;
    Ok(())
}

fn expert_forward<T: Real>(
    tape: &mut Tape<T>,
    params: &mut Binder<'_, T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w1 = params.get(tape, &format!("{prefix}.w1"));
    let b1 = params.get(tape, &format!("{prefix}.b1"));
    let w2 = params.get(tape, &format!("{prefix}.w2"));
    let b2 = params.get(tape, &format!("{prefix}.b2"));
    let g = params.get(tape, &format!("{prefix}.ln_g"));
    let b = params.get(tape, &format!("{prefix}.ln_b"));
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, w2)?;
    let h = tape.add_row(h, b2)?;
    tape.layer_norm(h, g, b)
}

/// Position-aware top-k mixture of experts with one always-on shared expert.
pub struct MoeProjection {
    dims: ProjectionDims,
}

impl MoeProjection {
    pub fn new(dims: ProjectionDims) -> Result<Self> {
        if dims.experts == 0 || dims.k_hat == 0 || dims.k_hat > dims.experts {
            return Err(Error::input(
                "k_hat",
                format!("need 1 <= k_hat <= experts, got {} of {}", dims.k_hat, dims.experts),
            ));
        }
        Ok(Self { dims })
    }

    fn construct<T: Real>(dims: &ProjectionDims) -> Result<Box<dyn InputProjection<T>>> {
        Ok(Box::new(Self::new(*dims)?))
    }

    pub fn dims(&self) -> &ProjectionDims {
        &self.dims
    }
}

impl<T: Real> InputProjection<T> for MoeProjection {
    fn name(&self) -> &'static str {
        "moe"
    }

    fn init_params(&self, store: &mut ParamStore<f32>, rng: &mut dyn rand::RngCore) -> Result<()> {
        let ProjectionDims {
            d_in,
            d,
            len,
            experts,
            ..
        } = self.dims;
        store.insert(
            "moe.gate",
            init::trunc_normal(rng, vec![d_in + len, experts], INIT_STD),
        )?;
        for m in 0..experts {
            expert_params(store, rng, &format!("moe.expert{m}"), d_in, d)?;
        }
        expert_params(store, rng, "moe.shared", d_in, d)
    }

    fn project(
        &self,
        tape: &mut Tape<T>,
        params: &mut Binder<'_, T>,
        tokens: Var,
        positions: &[usize],
        opts: ProjectOptions<'_>,
    ) -> Result<Projected> {
        let ProjectionDims {
            len,
            experts,
            k_hat,
            ..
        } = self.dims;
        let rows = positions.len();
        if tape.value(tokens).rows() != rows {
            return Err(Error::dim("moe", "one position per token row"));
        }
        let mut onehot = vec![T::zero(); rows * len];
        for (r, &p) in positions.iter().enumerate() {
            if p >= len {
                return Err(Error::dim("moe", format!("position {p} outside one-hot width {len}")));
            }
            onehot[r * len + p] = T::one();
        }
        let onehot = tape.constant(Tensor::from_rows(rows, len, onehot));
        let gate_in = tape.concat_cols(tokens, onehot)?;
        let w_gate = params.get(tape, "moe.gate");
        let logits = tape.matmul(gate_in, w_gate)?;
        let gamma = tape.softmax_rows(logits)?;

        let gamma_vals: Vec<f64> = tape.value(gamma).data().iter().map(|v| v.as_f64()).collect();
        let topk = match opts.route_override {
            Some(mask) => {
                if mask.len() != rows * experts {
                    return Err(Error::dim("moe", "route override has the wrong size"));
                }
                mask.to_vec()
            }
            None => topk_route(&gamma_vals, experts, k_hat)?,
        };
        let record = RoutingRecord {
            rows,
            experts,
            k_hat,
            gamma: gamma_vals,
            topk,
        };

        // Σ_m T·γ_m·LN(MLP_m(x)); each expert only sees the rows routed to it.
        let mut routed: Option<Var> = None;
        for m in 0..experts {
            let sel: Vec<usize> = (0..rows).filter(|&r| record.selected(r, m)).collect();
            if sel.is_empty() {
                continue;
            }
            let x = tape.gather_rows(tokens, sel.clone())?;
            let y = expert_forward(tape, params, &format!("moe.expert{m}"), x)?;
            let g = tape.select_col(gamma, m)?;
            let g = tape.gather_rows(g, sel.clone())?;
            let y = tape.mul_col(y, g)?;
            let y = tape.scatter_rows(y, sel, rows)?;
            routed = Some(match routed {
                Some(acc) => tape.add(acc, y)?,
                None => y,
            });
        }
        let shared = expert_forward(tape, params, "moe.shared", tokens)?;
        let out = match routed {
            Some(r) => tape.add(r, shared)?,
            None => shared,
        };

        let aux = if rows > 0 {
            let f = routing_fractions(&record);
            let w: Vec<T> = (0..rows)
                .flat_map(|_| f.iter().map(|&fm| T::lit(fm / rows as f64)))
                .collect();
            Some(tape.weighted_sum(gamma, w)?)
        } else {
            None
        };
        Ok(Projected {
            tokens: out,
            aux_loss: aux,
            routing: Some(record),
        })
    }
}

/// One shared expert for every token: the no-routing ablation.
pub struct SharedProjection {
    dims: ProjectionDims,
}

impl SharedProjection {
    pub fn new(dims: ProjectionDims) -> Self {
        Self { dims }
    }

    fn construct<T: Real>(dims: &ProjectionDims) -> Result<Box<dyn InputProjection<T>>> {
        Ok(Box::new(Self::new(*dims)))
    }
}

impl<T: Real> InputProjection<T> for SharedProjection {
    fn name(&self) -> &'static str {
        "shared"
    }

    fn init_params(&self, store: &mut ParamStore<f32>, rng: &mut dyn rand::RngCore) -> Result<()> {
        expert_params(store, rng, "proj.shared", self.dims.d_in, self.dims.d)
    }

    fn project(
        &self,
        tape: &mut Tape<T>,
        params: &mut Binder<'_, T>,
        tokens: Var,
        _positions: &[usize],
        _opts: ProjectOptions<'_>,
    ) -> Result<Projected> {
        Ok(Projected {
            tokens: expert_forward(tape, params, "proj.shared", tokens)?,
            aux_loss: None,
            routing: None,
        })
    }
}

/// Random routing record for property checks: gate rows from random logits,
/// top-k from the scores.
pub fn random_record<R: Rng>(rng: &mut R, rows: usize, experts: usize, k_hat: usize, spread: f64) -> RoutingRecord {
    let mut gamma = Vec::with_capacity(rows * experts);
    for _ in 0..rows {
        let logits: Vec<f64> = (0..experts).map(|_| rng.random_range(-spread..=spread)).collect();
        gamma.extend(softmax_row(&logits).expect("finite logits"));
    }
    let topk = topk_route(&gamma, experts, k_hat).expect("valid k_hat");
    RoutingRecord {
        rows,
        experts,
        k_hat,
        gamma,
        topk,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{finite_diff_check, store_grads, DEFAULT_STEP};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(experts: usize, k_hat: usize) -> ProjectionDims {
        ProjectionDims {
            d_in: 5,
            d: 6,
            len: 8,
            experts,
            k_hat,
        }
    }

    fn random_tokens(rng: &mut ChaCha8Rng, rows: usize, d_in: usize) -> Vec<f32> {
        (0..rows * d_in).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    fn init_store(p: &dyn InputProjection<f32>, seed: u64) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.init_params(&mut store, &mut rng).unwrap();
        store
    }

    fn run<T: Real>(
        p: &dyn InputProjection<T>,
        store: &ParamStore<T>,
        toks: &[f32],
        positions: &[usize],
        d_in: usize,
    ) -> (Vec<T>, Option<RoutingRecord>) {
        let mut tape = Tape::new();
        let mut bind = Binder::new(store);
        let x = tape.constant(Tensor::from_rows(
            positions.len(),
            d_in,
            toks.iter().map(|&v| T::lit(v as f64)).collect(),
        ));
        let out = p
            .project(&mut tape, &mut bind, x, positions, ProjectOptions::default())
            .unwrap();
        (tape.value(out.tokens).data().to_vec(), out.routing)
    }

    #[test]
    fn zero_gate_gives_uniform_scores() {
        let d = dims(4, 2);
        let w = Tensor::zeros(vec![d.d_in + d.len, 4]);
        let toks = vec![0.3f32; 3 * d.d_in];
        let rec = gate_scores(&toks, &[0, 1, 5], &w, &d).unwrap();
        assert!(rec.gamma.iter().all(|&g| (g - 0.25).abs() < 1e-15));
    }

    #[test]
    fn position_rows_separate_identical_tokens() {
        let d = dims(3, 1);
        let mut w = Tensor::<f32>::zeros(vec![d.d_in + d.len, 3]);
        // position 0 favours expert 0, position 4 favours expert 2
        w.data_mut()[d.d_in * 3] = 2.0;
        w.data_mut()[(d.d_in + 4) * 3 + 2] = 2.0;
        let tok = vec![0.5f32; d.d_in];
        let toks = [tok.clone(), tok].concat();
        let rec = gate_scores(&toks, &[0, 4], &w, &d).unwrap();
        assert_ne!(rec.gamma_row(0), rec.gamma_row(1));
        assert!(rec.selected(0, 0) && rec.selected(1, 2));
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_route(&[0.4, 0.4, 0.2], 3, 2).unwrap(), vec![true, true, false]);
        assert_eq!(topk_route(&[0.2, 0.4, 0.4], 3, 1).unwrap(), vec![false, true, false]);
        assert_eq!(topk_route(&[0.1, 0.7, 0.2], 3, 3).unwrap(), vec![true; 3]);
        assert_eq!(topk_route(&[0.1, 0.7, 0.2], 3, 1).unwrap(), vec![false, true, false]);
        assert!(topk_route(&[0.5, 0.5], 2, 3).is_err());
    }

    #[test]
    fn load_balance_extremes() {
        let uniform = RoutingRecord {
            rows: 4,
            experts: 4,
            k_hat: 1,
            gamma: vec![0.25; 16],
            topk: (0..16).map(|i| i % 5 == 0).collect(),
        };
        assert!((load_balance_loss(&uniform) - 0.25).abs() < 1e-12);
        let collapsed = RoutingRecord {
            rows: 3,
            experts: 4,
            k_hat: 1,
            gamma: [1.0, 0.0, 0.0, 0.0].repeat(3),
            topk: [true, false, false, false].repeat(3),
        };
        assert!((load_balance_loss(&collapsed) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_expert_reduces_to_two_layer_norms() {
        let d = dims(1, 1);
        let p = MoeProjection::new(d).unwrap();
        let store = init_store(&p, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let toks = random_tokens(&mut rng, 4, d.d_in);
        let pos = [0, 1, 3, 6];
        let (out, rec) = run::<f64>(&p, &store.cast(), &toks, &pos, d.d_in);
        assert!(rec.unwrap().gamma.iter().all(|&g| g == 1.0));

        let store64 = store.cast::<f64>();
        let mut tape = Tape::<f64>::new();
        let mut bind = Binder::new(&store64);
        let x = tape.constant(Tensor::from_rows(4, d.d_in, toks.iter().map(|&v| v as f64).collect()));
        let e = expert_forward(&mut tape, &mut bind, "moe.expert0", x).unwrap();
        let s = expert_forward(&mut tape, &mut bind, "moe.shared", x).unwrap();
        let sum = tape.add(e, s).unwrap();
        for (a, b) in out.iter().zip(tape.value(sum).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_routed_experts_leave_shared_branch() {
        let d = dims(3, 3);
        let p = MoeProjection::new(d).unwrap();
        let mut store = init_store(&p, 5);
        for m in 0..3 {
            for suffix in ["ln_g", "ln_b"] {
                let t = &mut store.get_mut(&format!("moe.expert{m}.{suffix}")).unwrap().tensor;
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let toks = random_tokens(&mut rng, 3, d.d_in);
        let (out, _) = run::<f32>(&p, &store, &toks, &[0, 1, 3], d.d_in);

        let mut tape = Tape::<f32>::new();
        let mut bind = Binder::new(&store);
        let x = tape.constant(Tensor::from_rows(3, d.d_in, toks.clone()));
        let s = expert_forward(&mut tape, &mut bind, "moe.shared", x).unwrap();
        assert_eq!(&out[..], tape.value(s).data());
    }

    #[test]
    fn tokens_do_not_mix() {
        let d = dims(4, 2);
        let p = MoeProjection::new(d).unwrap();
        let store = init_store(&p, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let toks = random_tokens(&mut rng, 6, d.d_in);
        let pos = [0, 1, 3, 4, 5, 6];
        let (base, _) = run::<f32>(&p, &store, &toks, &pos, d.d_in);
        let mut moved = toks.clone();
        for v in &mut moved[2 * d.d_in..3 * d.d_in] {
            *v += 3.0;
        }
        let (pert, _) = run::<f32>(&p, &store, &moved, &pos, d.d_in);
        for r in (0..6).filter(|&r| r != 2) {
            assert_eq!(base[r * d.d..(r + 1) * d.d], pert[r * d.d..(r + 1) * d.d]);
        }
        assert_ne!(base[2 * d.d..3 * d.d], pert[2 * d.d..3 * d.d]);
    }

    #[test]
    fn tape_routing_matches_value_level_gate() {
        let d = dims(4, 2);
        let p = MoeProjection::new(d).unwrap();
        let store = init_store(&p, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let toks = random_tokens(&mut rng, 5, d.d_in);
        let pos = [0, 1, 3, 4, 6];
        let (_, rec) = run::<f64>(&p, &store.cast(), &toks, &pos, d.d_in);
        let rec = rec.unwrap();
        let direct = gate_scores(&toks, &pos, store.tensor("moe.gate"), &d).unwrap();
        assert_eq!(rec.topk, direct.topk);
        for (a, b) in rec.gamma.iter().zip(&direct.gamma) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let d = dims(3, 2);
        let p = MoeProjection::new(d).unwrap();
        let mut store = init_store(&p, 11).cast::<f64>();
        // widen weights so layer-norm inputs are O(1) and the difference
        // quotient is not dominated by curvature
        for param in store.iter_mut() {
            if param.name.ends_with(".w1") || param.name.ends_with(".w2") {
                param.tensor.data_mut().iter_mut().for_each(|v| *v *= 25.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let toks: Vec<f64> = random_tokens(&mut rng, 4, d.d_in).iter().map(|&v| v as f64).collect();
        let pos = [0, 1, 3, 4];
        let readout: Vec<f64> = (0..4 * d.d).map(|_| rng.random_range(-1.0..1.0)).collect();

        let forward = |s: &ParamStore<f64>, route: Option<&[bool]>| {
            let mut tape = Tape::<f64>::new();
            let mut bind = Binder::new(s);
            let x = tape.constant(Tensor::from_rows(4, d.d_in, toks.clone()));
            let out = p
                .project(&mut tape, &mut bind, x, &pos, ProjectOptions { route_override: route })
                .unwrap();
            let r = tape.weighted_sum(out.tokens, readout.clone()).unwrap();
            let aux = tape.scale(out.aux_loss.unwrap(), 0.7);
            let loss = tape.add(r, aux).unwrap();
            (tape, loss, out.routing.unwrap())
        };
        let (tape, loss, rec) = forward(&store, None);
        let grads = tape.backward(loss).unwrap();
        let mut with_grads = store.clone();
        store_grads(&mut with_grads, &grads);
        let report = finite_diff_check(
            |s| {
                let (t, l, _) = forward(s, Some(&rec.topk));
                Ok(t.value(l).item())
            },
            &with_grads,
            DEFAULT_STEP,
            0,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn registry_builds_by_name() {
        let reg = ProjectionRegistry::<f32>::with_builtins();
        assert_eq!(reg.names(), vec!["moe", "shared"]);
        let d = dims(2, 1);
        assert_eq!(reg.build("moe", &d).unwrap().name(), "moe");
        assert_eq!(reg.build("shared", &d).unwrap().name(), "shared");
        assert!(matches!(reg.build("dense", &d), Err(Error::Input { .. })));
        assert!(projection::<f32>("moe", &dims(2, 3)).is_err());
    }

    #[test]
    fn shared_projection_is_one_perceptron_per_token() {
        let d = dims(6, 2);
        let p = SharedProjection::new(d);
        let store = init_store(&p, 13);
        assert!(store.names().all(|n| n.starts_with("proj.shared.")));
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let toks = random_tokens(&mut rng, 2, d.d_in);
        let (out, rec) = run::<f32>(&p, &store, &toks, &[0, 3], d.d_in);
        assert!(rec.is_none());
        assert_eq!(out.len(), 2 * d.d);
    }

    #[test]
    fn rebalancing_swaps_do_not_increase_loss() {
        // Route everything to expert 0, then move tokens one at a time to the
        // least-used expert with matching gate mass; loss must not go up.
        let (rows, experts) = (12, 3);
        let mut rec = RoutingRecord {
            rows,
            experts,
            k_hat: 1,
            gamma: [0.8, 0.1, 0.1].repeat(rows),
            topk: [true, false, false].repeat(rows),
        };
        let mut last = load_balance_loss(&rec);
        for r in 0..rows {
            let usage = rec.usage();
            let target = (0..experts).min_by_key(|&m| usage[m]).unwrap();
            if usage[target] + 1 >= usage[0] {
                break;
            }
            let row = &mut rec.gamma[r * experts..(r + 1) * experts];
            row.iter_mut().for_each(|g| *g = 0.1);
            row[target] = 0.8;
            let t = &mut rec.topk[r * experts..(r + 1) * experts];
            t.iter_mut().for_each(|b| *b = false);
            t[target] = true;
            let now = load_balance_loss(&rec);
            assert!(now <= last + 1e-12, "{now} > {last}");
            last = now;
        }
        assert_eq!(rec.usage(), vec![4, 4, 4]);
    }

    #[test]
    fn lower_bound_fails_when_confidence_and_counts_disagree() {
        // two lukewarm votes for expert 0, one confident vote for expert 1
        let rec = RoutingRecord {
            rows: 3,
            experts: 2,
            k_hat: 1,
            gamma: vec![0.51, 0.49, 0.51, 0.49, 0.01, 0.99],
            topk: vec![true, false, true, false, false, true],
        };
        assert_eq!(topk_route(&rec.gamma, 2, 1).unwrap(), rec.topk);
        assert!(load_balance_loss(&rec) < 0.5 - 1e-3);
    }

    #[test]
    fn full_activation_pins_loss_at_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for experts in 1..6 {
            let rec = random_record(&mut rng, 7, experts, experts, 3.0);
            assert!((load_balance_loss(&rec) - 1.0 / experts as f64).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn gate_rows_sum_to_one_and_topk_has_k(seed in 0u64..500, experts in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k_hat = rng.random_range(1..=experts);
            let rec = random_record(&mut rng, 9, experts, k_hat, 4.0);
            for r in 0..rec.rows {
                let s: f64 = rec.gamma_row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                let k = (0..experts).filter(|&m| rec.selected(r, m)).count();
                prop_assert_eq!(k, k_hat);
            }
            let loss = load_balance_loss(&rec);
            prop_assert!(loss > 0.0 && loss <= 1.0 + 1e-6);
        }
    }
}

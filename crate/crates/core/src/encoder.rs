//! Masked post-norm Transformer encoder over per-node token sequences.
//!
//! Each block computes `H' = LN(MHA(H; M) + H)` then `H'' = LN(FFN(H') + H')`.
//! All mixing between tokens happens inside attention, so rows whose mask
//! forbids a key set are exactly independent of those keys.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{init, AttnSpec, Binder, ParamStore, Real, Tape, Tensor, Var};
use crate::seqbuild::ColdStartMask;

const INIT_STD: f64 = 0.02;

/// Attention logit scale denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnScale {
    /// `1/√d`
    #[default]
    D,
    /// `1/√d_h`
    Dh,
}

impl std::str::FromStr for AttnScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d" => Ok(AttnScale::D),
            "dh" => Ok(AttnScale::Dh),
            other => Err(Error::input("scale", format!("expected `d` or `dh`, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub scale: AttnScale,
    pub attn_dropout: f64,
    pub ffn_dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::input(
                "heads",
                format!("hidden size {} must split evenly into {} heads", self.d, self.heads),
            ));
        }
        if self.ffn_mult == 0 {
            return Err(Error::input("ffn_mult", "must be at least 1"));
        }
        for (field, p) in [("dropout_hidden", self.attn_dropout), ("dropout_hidden", self.ffn_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::input(field, format!("{p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    fn logit_scale(&self) -> f64 {
        match self.scale {
            AttnScale::D => 1.0 / (self.d as f64).sqrt(),
            AttnScale::Dh => 1.0 / (self.head_dim() as f64).sqrt(),
        }
    }
}

/// Registers the positional table (`len` rows) and every block's weights.
pub fn init_params<R: Rng + ?Sized>(
    cfg: &EncoderConfig,
    len: usize,
    store: &mut ParamStore<f32>,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d;
    let ff = cfg.ffn_mult * d;
    store.insert("enc.pe", init::normal(rng, vec![len, d], INIT_STD))?;
    for l in 0..cfg.layers {
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("enc.{l}.{w}"), init::trunc_normal(rng, vec![d, d], INIT_STD))?;
        }
        store.insert(format!("enc.{l}.ln1_g"), init::ones(vec![d]))?;
        store.insert(format!("enc.{l}.ln1_b"), Tensor::zeros(vec![d]))?;
        store.insert(format!("enc.{l}.ff_w1"), init::trunc_normal(rng, vec![d, ff], INIT_STD))?;
        store.insert(format!("enc.{l}.ff_b1"), Tensor::zeros(vec![ff]))?;
        store.insert(format!("enc.{l}.ff_w2"), init::trunc_normal(rng, vec![ff, d], INIT_STD))?;
        store.insert(format!("enc.{l}.ff_b2"), Tensor::zeros(vec![d]))?;
        store.insert(format!("enc.{l}.ln2_g"), init::ones(vec![d]))?;
        store.insert(format!("enc.{l}.ln2_b"), Tensor::zeros(vec![d]))?;
    }
    Ok(())
}

/// Inverted-dropout factors: `0` with probability `p`, else `1/(1−p)`.
pub fn dropout_factors<T: Real, R: Rng + ?Sized>(rng: &mut R, n: usize, p: f64) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

/// Multiplies `x` by fresh dropout factors when training with `p > 0`.
pub fn maybe_dropout<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    p: f64,
    rng: Option<&mut R>,
) -> Result<Var> {
    match rng {
        Some(rng) if p > 0.0 => {
            let n = tape.value(x).numel();
            let m = dropout_factors(rng, n, p);
            tape.mul_const(x, m)
        }
        _ => Ok(x),
    }
}

/// `U + PE`, using the first `len` positional rows for every sequence.
pub fn add_positions<T: Real>(
    tape: &mut Tape<T>,
    params: &mut Binder<'_, T>,
    u: Var,
    batch: usize,
    len: usize,
) -> Result<Var> {
    let pe = params.get(tape, "enc.pe");
    if tape.value(pe).rows() < len {
        return Err(Error::dim("add_positions", format!("positional table shorter than {len}")));
    }
    let idx: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
    let tiled = tape.gather_rows(pe, idx)?;
    tape.add(u, tiled)
}

/// Multi-head attention of block `layer` under `mask`, followed by `W^(O)`.
pub fn mha_masked<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    params: &mut Binder<'_, T>,
    cfg: &EncoderConfig,
    layer: usize,
    x: Var,
    batch: usize,
    mask: &ColdStartMask,
    rng: Option<&mut R>,
) -> Result<Var> {
    let wq = params.get(tape, &format!("enc.{layer}.wq"));
    let wk = params.get(tape, &format!("enc.{layer}.wk"));
    let wv = params.get(tape, &format!("enc.{layer}.wv"));
    let wo = params.get(tape, &format!("enc.{layer}.wo"));
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let dropout = match rng {
        Some(rng) if cfg.attn_dropout > 0.0 => Some(dropout_factors(
            rng,
            batch * cfg.heads * mask.len * mask.len,
            cfg.attn_dropout,
        )),
        _ => None,
    };
    let spec = AttnSpec {
        batch,
        heads: cfg.heads,
        scale: T::lit(cfg.logit_scale()),
        mask: mask.to_attn(),
        dropout,
    };
    let a = tape.attention(q, k, v, spec)?;
    tape.matmul(a, wo)
}

/// Runs the block stack on `h` (`[batch·len × d]`, positions already added).
/// Passing an RNG turns on training-time dropout.
pub fn encode<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    params: &mut Binder<'_, T>,
    cfg: &EncoderConfig,
    h: Var,
    batch: usize,
    mask: &ColdStartMask,
    mut rng: Option<&mut R>,
) -> Result<Var> {
    let hv = tape.value(h);
    if hv.rows() != batch * mask.len || hv.cols() != cfg.d {
        return Err(Error::dim(
            "encode",
            format!(
                "input {}x{} for batch {batch}, len {}, d {}",
                hv.rows(),
                hv.cols(),
                mask.len,
                cfg.d
            ),
        ));
    }
    let mut h = h;
    for l in 0..cfg.layers {
        let a = mha_masked(tape, params, cfg, l, h, batch, mask, rng.as_deref_mut())?;
        let r = tape.add(a, h)?;
        let g = params.get(tape, &format!("enc.{l}.ln1_g"));
        let b = params.get(tape, &format!("enc.{l}.ln1_b"));
        let h1 = tape.layer_norm(r, g, b)?;

        let w1 = params.get(tape, &format!("enc.{l}.ff_w1"));
        let b1 = params.get(tape, &format!("enc.{l}.ff_b1"));
        let w2 = params.get(tape, &format!("enc.{l}.ff_w2"));
        let b2 = params.get(tape, &format!("enc.{l}.ff_b2"));
        let f = tape.matmul(h1, w1)?;
        let f = tape.add_row(f, b1)?;
        let f = tape.gelu(f);
        let f = maybe_dropout(tape, f, cfg.ffn_dropout, rng.as_deref_mut())?;
        let f = tape.matmul(f, w2)?;
        let f = tape.add_row(f, b2)?;
        let r = tape.add(f, h1)?;
        let g = params.get(tape, &format!("enc.{l}.ln2_g"));
        let b = params.get(tape, &format!("enc.{l}.ln2_b"));
        h = tape.layer_norm(r, g, b)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{finite_diff_check, store_grads, DEFAULT_STEP};
    use crate::seqbuild::{build_mask, mask_for_len, SELF_LEN};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type NoRng = ChaCha8Rng;

    fn cfg(layers: usize) -> EncoderConfig {
        EncoderConfig {
            d: 8,
            heads: 2,
            layers,
            ffn_mult: 2,
            scale: AttnScale::D,
            attn_dropout: 0.5,
            ffn_dropout: 0.5,
        }
    }

    fn store(c: &EncoderConfig, len: usize, seed: u64) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        init_params(c, len, &mut s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        // larger weights so attention is far from uniform
        for p in s.iter_mut() {
            if p.name.contains(".w") || p.name.contains("ff_w") {
                p.tensor.data_mut().iter_mut().for_each(|v| *v *= 20.0);
            }
        }
        s
    }

    fn random_input(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    fn run(
        c: &EncoderConfig,
        s: &ParamStore<f32>,
        u: &[f32],
        batch: usize,
        mask: &ColdStartMask,
    ) -> Vec<f32> {
        let mut tape = Tape::new();
        let mut bind = Binder::new(s);
        let u = tape.constant(Tensor::from_rows(batch * mask.len, c.d, u.to_vec()));
        let h = add_positions(&mut tape, &mut bind, u, batch, mask.len).unwrap();
        let h = encode::<f32, NoRng>(&mut tape, &mut bind, c, h, batch, mask, None).unwrap();
        tape.value(h).data().to_vec()
    }

    #[test]
    fn zero_layers_is_input_plus_positions() {
        let c = cfg(0);
        let mask = build_mask(1).unwrap();
        let s = store(&c, mask.len, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random_input(&mut rng, 2 * mask.len * c.d);
        let h = run(&c, &s, &u, 2, &mask);
        let pe = s.tensor("enc.pe");
        for (i, (&hv, &uv)) in h.iter().zip(&u).enumerate() {
            let pos = (i / c.d) % mask.len;
            assert_eq!(hv, uv + pe.row(pos)[i % c.d]);
        }
    }

    #[test]
    fn self_rows_ignore_neighbor_tokens() {
        for layers in 1..=3 {
            let c = cfg(layers);
            let mask = build_mask(2).unwrap();
            let s = store(&c, mask.len, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let batch = 3;
            let u = random_input(&mut rng, batch * mask.len * c.d);
            let base = run(&c, &s, &u, batch, &mask);
            let mut moved = u.clone();
            for b in 0..batch {
                for slot in SELF_LEN..mask.len {
                    for v in &mut moved[(b * mask.len + slot) * c.d..][..c.d] {
                        *v = rng.random_range(-5.0..5.0);
                    }
                }
            }
            let pert = run(&c, &s, &moved, batch, &mask);
            for b in 0..batch {
                let at = b * mask.len * c.d;
                assert_eq!(base[at..at + SELF_LEN * c.d], pert[at..at + SELF_LEN * c.d]);
                // teacher slot does see the change
                let last = at + (mask.len - 1) * c.d;
                assert_ne!(base[last..last + c.d], pert[last..last + c.d]);
            }
        }
    }

    #[test]
    fn restriction_to_self_slots_is_exact() {
        let c = cfg(2);
        let mask = build_mask(3).unwrap();
        let s = store(&c, mask.len, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = 4;
        let u = random_input(&mut rng, batch * mask.len * c.d);
        let full = run(&c, &s, &u, batch, &mask);
        let short_mask = mask_for_len(SELF_LEN);
        let short_u: Vec<f32> = (0..batch)
            .flat_map(|b| u[b * mask.len * c.d..][..SELF_LEN * c.d].to_vec())
            .collect();
        let short = run(&c, &s, &short_u, batch, &short_mask);
        for b in 0..batch {
            assert_eq!(
                full[b * mask.len * c.d..][..SELF_LEN * c.d],
                short[b * SELF_LEN * c.d..][..SELF_LEN * c.d]
            );
        }
    }

    #[test]
    fn eval_mode_is_repeatable_and_training_mode_is_seeded() {
        let c = cfg(2);
        let mask = build_mask(1).unwrap();
        let s = store(&c, mask.len, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = random_input(&mut rng, 2 * mask.len * c.d);
        assert_eq!(run(&c, &s, &u, 2, &mask), run(&c, &s, &u, 2, &mask));

        let train = |seed: u64| {
            let mut tape = Tape::<f32>::new();
            let mut bind = Binder::new(&s);
            let x = tape.constant(Tensor::from_rows(2 * mask.len, c.d, u.clone()));
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let h = encode(&mut tape, &mut bind, &c, x, 2, &mask, Some(&mut r)).unwrap();
            tape.value(h).data().to_vec()
        };
        assert_eq!(train(1), train(1));
        assert_ne!(train(1), train(2));
    }

    #[test]
    fn scale_switch_changes_logits() {
        let mut c = cfg(1);
        let mask = build_mask(1).unwrap();
        let s = store(&c, mask.len, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let u = random_input(&mut rng, mask.len * c.d);
        let a = run(&c, &s, &u, 1, &mask);
        c.scale = AttnScale::Dh;
        let b = run(&c, &s, &u, 1, &mask);
        assert_ne!(a, b);
        assert_eq!("dh".parse::<AttnScale>().unwrap(), AttnScale::Dh);
        assert!("sqrt".parse::<AttnScale>().is_err());
    }

    #[test]
    fn rejects_uneven_heads_and_bad_shapes() {
        let mut c = cfg(1);
        c.heads = 3;
        assert!(c.validate().is_err());
        let c = cfg(1);
        let mask = build_mask(1).unwrap();
        let s = store(&c, mask.len, 1);
        let mut tape = Tape::<f32>::new();
        let mut bind = Binder::new(&s);
        let x = tape.constant(Tensor::zeros(vec![5, c.d]));
        assert!(encode::<f32, NoRng>(&mut tape, &mut bind, &c, x, 1, &mask, None).is_err());
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let c = EncoderConfig {
            attn_dropout: 0.0,
            ffn_dropout: 0.0,
            ..cfg(2)
        };
        let mask = build_mask(1).unwrap();
        let batch = 2;
        let s = store(&c, mask.len, 11).cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let u: Vec<f64> = random_input(&mut rng, batch * mask.len * c.d)
            .iter()
            .map(|&v| v as f64)
            .collect();
        let w: Vec<f64> = (0..u.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let forward = |p: &ParamStore<f64>| {
            let mut tape = Tape::<f64>::new();
            let mut bind = Binder::new(p);
            let x = tape.constant(Tensor::from_rows(batch * mask.len, c.d, u.clone()));
            let h = add_positions(&mut tape, &mut bind, x, batch, mask.len).unwrap();
            let h = encode::<f64, NoRng>(&mut tape, &mut bind, &c, h, batch, &mask, None).unwrap();
            let loss = tape.weighted_sum(h, w.clone()).unwrap();
            (tape, loss)
        };
        let (tape, loss) = forward(&s);
        let grads = tape.backward(loss).unwrap();
        let mut with = s.clone();
        store_grads(&mut with, &grads);
        let report = finite_diff_check(
            |p| {
                let (t, l) = forward(p);
                Ok(t.value(l).item())
            },
            &with,
            DEFAULT_STEP,
            300,
            13,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn dropout_factors_are_inverted() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let f: Vec<f64> = dropout_factors(&mut rng, 20_000, 0.5);
        assert!(f.iter().all(|&v| v == 0.0 || v == 2.0));
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        assert!((mean - 1.0).abs() < 0.05);
    }
}

//! Per-node token sequences and the cold-start attention mask.
//!
//! Slot layout (0-based here; the model documentation counts from 1):
//!
//! | slot            | content                         |
//! |-----------------|---------------------------------|
//! | 0               | own text features or MISS       |
//! | 1               | own visual features or MISS     |
//! | 2               | student CLS                     |
//! | 3 + 2(k−1)      | `Â^k X_text`, k = 1..K          |
//! | 4 + 2(k−1)      | `Â^k X_visual`                  |
//! | 2K + 3          | teacher CLS                     |

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphprep::{FeatureMatrix, HopStack, Modality};
use crate::numkit::AttnMask;

pub const SLOT_TEXT: usize = 0;
pub const SLOT_VISUAL: usize = 1;
pub const SLOT_CLS_S: usize = 2;
/// Number of self-information slots at the head of every sequence.
pub const SELF_LEN: usize = 3;

pub fn seq_len(k: usize) -> usize {
    2 * k + 4
}

pub fn slot_cls_t(k: usize) -> usize {
    seq_len(k) - 1
}

/// Which modality (if any) is replaced by its MISS token for a node.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MissFlags {
    pub text_missing: bool,
    pub visual_missing: bool,
}

impl MissFlags {
    pub const NONE: MissFlags = MissFlags {
        text_missing: false,
        visual_missing: false,
    };
    pub const TEXT: MissFlags = MissFlags {
        text_missing: true,
        visual_missing: false,
    };
    pub const VISUAL: MissFlags = MissFlags {
        text_missing: false,
        visual_missing: true,
    };

    pub fn is_missing(self, m: Modality) -> bool {
        match m {
            Modality::Text => self.text_missing,
            Modality::Visual => self.visual_missing,
        }
    }
}

/// Learned special tokens. MISS tokens live in input space, CLS tokens in
/// model space.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecialTokens {
    pub miss_text: Vec<f32>,
    pub miss_visual: Vec<f32>,
    pub cls_s: Vec<f32>,
    pub cls_t: Vec<f32>,
}

/// Gathered input-space token sequences for a set of nodes. CLS slots hold
/// zeros; the model fills them in model space.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub n: usize,
    pub len: usize,
    pub d_in: usize,
    pub seq: Vec<f32>,
    pub miss_flags: Vec<MissFlags>,
}

impl TokenBatch {
    pub fn token(&self, node: usize, slot: usize) -> &[f32] {
        let at = (node * self.len + slot) * self.d_in;
        &self.seq[at..at + self.d_in]
    }

    fn token_mut(&mut self, node: usize, slot: usize) -> &mut [f32] {
        let at = (node * self.len + slot) * self.d_in;
        &mut self.seq[at..at + self.d_in]
    }

    /// True for sequences that carry only the three self slots.
    pub fn is_self_only(&self) -> bool {
        self.len == SELF_LEN
    }

    /// Hop count implied by the sequence length.
    pub fn hops(&self) -> usize {
        (self.len.saturating_sub(4)) / 2
    }

    pub fn is_cls_slot(&self, slot: usize) -> bool {
        slot == SLOT_CLS_S || (!self.is_self_only() && slot == self.len - 1)
    }
}

fn check_width(m: &FeatureMatrix, d_in: usize, n: usize) -> Result<()> {
    if m.d != d_in || m.n != n {
        return Err(Error::input(
            m.modality.as_str(),
            format!("expected {n}x{d_in} padded features, got {}x{}", m.n, m.d),
        ));
    }
    Ok(())
}

/// Full sequences for every node.
pub fn build_sequence(
    x_t: &FeatureMatrix,
    x_v: &FeatureMatrix,
    stack_t: &HopStack,
    stack_v: &HopStack,
    k: usize,
) -> Result<TokenBatch> {
    let nodes: Vec<usize> = (0..x_t.n).collect();
    build_sequence_for(x_t, x_v, stack_t, stack_v, k, &nodes)
}

/// Full sequences for the listed nodes, gathered from precomputed hops.
pub fn build_sequence_for(
    x_t: &FeatureMatrix,
    x_v: &FeatureMatrix,
    stack_t: &HopStack,
    stack_v: &HopStack,
    k: usize,
    nodes: &[usize],
) -> Result<TokenBatch> {
    if stack_t.k() != k || stack_v.k() != k {
        return Err(Error::input(
            "k",
            format!(
                "hop stacks hold {} / {} hops, expected {k}",
                stack_t.k(),
                stack_v.k()
            ),
        ));
    }
    let (n, d_in) = (x_t.n, x_t.d);
    check_width(x_t, d_in, n)?;
    check_width(x_v, d_in, n)?;
    for h in stack_t.hops.iter().chain(&stack_v.hops) {
        check_width(h, d_in, n)?;
    }
    let len = seq_len(k);
    let mut batch = TokenBatch {
        n: nodes.len(),
        len,
        d_in,
        seq: vec![0.0; nodes.len() * len * d_in],
        miss_flags: vec![MissFlags::NONE; nodes.len()],
    };
    for (b, &i) in nodes.iter().enumerate() {
        if i >= n {
            return Err(Error::input("nodes", format!("node {i} outside [0, {n})")));
        }
        batch.token_mut(b, SLOT_TEXT).copy_from_slice(x_t.row(i));
        batch.token_mut(b, SLOT_VISUAL).copy_from_slice(x_v.row(i));
        for hop in 1..=k {
            let base = SELF_LEN + 2 * (hop - 1);
            batch.token_mut(b, base).copy_from_slice(stack_t.hop(hop).row(i));
            batch
                .token_mut(b, base + 1)
                .copy_from_slice(stack_v.hop(hop).row(i));
        }
    }
    Ok(batch)
}

/// Self-only sequences (three slots) used for cold-start inference.
pub fn build_self_sequence(
    x_t: &FeatureMatrix,
    x_v: &FeatureMatrix,
    nodes: &[usize],
) -> Result<TokenBatch> {
    let (n, d_in) = (x_t.n, x_t.d);
    check_width(x_v, d_in, n)?;
    let mut batch = TokenBatch {
        n: nodes.len(),
        len: SELF_LEN,
        d_in,
        seq: vec![0.0; nodes.len() * SELF_LEN * d_in],
        miss_flags: vec![MissFlags::NONE; nodes.len()],
    };
    for (b, &i) in nodes.iter().enumerate() {
        if i >= n {
            return Err(Error::input("nodes", format!("node {i} outside [0, {n})")));
        }
        batch.token_mut(b, SLOT_TEXT).copy_from_slice(x_t.row(i));
        batch.token_mut(b, SLOT_VISUAL).copy_from_slice(x_v.row(i));
    }
    Ok(batch)
}

/// How MISS substitution is decided.
pub enum MissPolicy<'a, R: Rng> {
    /// Per node: text missing with `p_miss`, visual missing with `p_miss`,
    /// neither with `1 − 2·p_miss`.
    Train { p_miss: f64, rng: &'a mut R },
    /// Caller-supplied flags, one pair per node.
    Fixed(&'a [MissFlags]),
}

/// Draws training-time flags; never marks both modalities on one node.
pub fn draw_train_flags<R: Rng>(n: usize, p_miss: f64, rng: &mut R) -> Result<Vec<MissFlags>> {
    if !(0.0..=0.5).contains(&p_miss) {
        return Err(Error::input(
            "p_miss",
            format!("{p_miss} outside [0, 0.5]; both modalities share one draw"),
        ));
    }
    Ok((0..n)
        .map(|_| {
            if p_miss == 0.0 {
                return MissFlags::NONE;
            }
            let u: f64 = rng.random();
            if u < p_miss {
                MissFlags::TEXT
            } else if u < 2.0 * p_miss {
                MissFlags::VISUAL
            } else {
                MissFlags::NONE
            }
        })
        .collect())
}

/// Resolves a policy into per-node flags.
pub fn resolve_flags<R: Rng>(n: usize, policy: MissPolicy<'_, R>) -> Result<Vec<MissFlags>> {
    match policy {
        MissPolicy::Train { p_miss, rng } => draw_train_flags(n, p_miss, rng),
        MissPolicy::Fixed(flags) => {
            if flags.len() != n {
                return Err(Error::input(
                    "miss_flags",
                    format!("{} flag pairs for {n} nodes", flags.len()),
                ));
            }
            if let Some(i) = flags.iter().position(|f| f.text_missing && f.visual_missing) {
                return Err(Error::input(
                    "miss_flags",
                    format!("node {i} has both modalities missing"),
                ));
            }
            Ok(flags.to_vec())
        }
    }
}

/// Replaces flagged self slots by the MISS vectors and records the flags.
/// Neighbor slots are never touched.
pub fn apply_missing<R: Rng>(
    batch: &TokenBatch,
    policy: MissPolicy<'_, R>,
    tokens: &SpecialTokens,
) -> Result<TokenBatch> {
    let flags = resolve_flags(batch.n, policy)?;
    if tokens.miss_text.len() != batch.d_in || tokens.miss_visual.len() != batch.d_in {
        return Err(Error::dim("apply_missing", "MISS tokens must have width d_in"));
    }
    let mut out = batch.clone();
    for (b, f) in flags.iter().enumerate() {
        if f.text_missing {
            out.token_mut(b, SLOT_TEXT).copy_from_slice(&tokens.miss_text);
        }
        if f.visual_missing {
            out.token_mut(b, SLOT_VISUAL).copy_from_slice(&tokens.miss_visual);
        }
    }
    out.miss_flags = flags;
    Ok(out)
}

/// `allow[i][j]` is false exactly when `i` is a self slot and `j` is not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColdStartMask {
    pub len: usize,
    pub allow: Vec<bool>,
}

impl ColdStartMask {
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.len + j]
    }

    pub fn forbidden_count(&self) -> usize {
        self.allow.iter().filter(|a| !**a).count()
    }

    /// Top-left `len × len` block.
    pub fn restrict(&self, len: usize) -> ColdStartMask {
        let len = len.min(self.len);
        let mut allow = Vec::with_capacity(len * len);
        for i in 0..len {
            for j in 0..len {
                allow.push(self.allowed(i, j));
            }
        }
        ColdStartMask { len, allow }
    }

    pub fn to_attn(&self) -> AttnMask {
        AttnMask {
            len: self.len,
            allow: self.allow.clone(),
        }
    }
}

pub fn build_mask(k: usize) -> Result<ColdStartMask> {
    if k == 0 {
        return Err(Error::input("k", "hop count must be at least 1"));
    }
    Ok(mask_for_len(seq_len(k)))
}

pub(crate) fn mask_for_len(len: usize) -> ColdStartMask {
    let mut allow = Vec::with_capacity(len * len);
    for i in 0..len {
        for j in 0..len {
            allow.push(!(i < SELF_LEN && j >= SELF_LEN));
        }
    }
    ColdStartMask { len, allow }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphprep::{build_csr, normalize_sym, propagate};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feats(n: usize, d: usize, m: Modality, offset: f32) -> FeatureMatrix {
        let data = (0..n * d).map(|i| i as f32 * 0.01 + offset).collect();
        FeatureMatrix::new(n, d, m, data).unwrap()
    }

    fn setup(k: usize) -> (FeatureMatrix, FeatureMatrix, HopStack, HopStack) {
        let a_hat = normalize_sym(&build_csr(5, &[(0, 1), (1, 2), (3, 4), (0, 4)]).unwrap());
        let x_t = feats(5, 4, Modality::Text, 1.0);
        let x_v = feats(5, 4, Modality::Visual, -1.0);
        let st = propagate(&a_hat, &x_t, k).unwrap();
        let sv = propagate(&a_hat, &x_v, k).unwrap();
        (x_t, x_v, st, sv)
    }

    fn tokens(d_in: usize) -> SpecialTokens {
        SpecialTokens {
            miss_text: vec![9.0; d_in],
            miss_visual: vec![-9.0; d_in],
            cls_s: vec![0.0; 2],
            cls_t: vec![0.0; 2],
        }
    }

    #[test]
    fn layout_for_two_hops() {
        let (x_t, x_v, st, sv) = setup(2);
        let b = build_sequence(&x_t, &x_v, &st, &sv, 2).unwrap();
        assert_eq!(b.len, 8);
        for i in 0..5 {
            assert_eq!(b.token(i, 0), x_t.row(i));
            assert_eq!(b.token(i, 1), x_v.row(i));
            assert!(b.token(i, 2).iter().all(|&v| v == 0.0));
            assert_eq!(b.token(i, 3), st.hop(1).row(i));
            assert_eq!(b.token(i, 4), sv.hop(1).row(i));
            assert_eq!(b.token(i, 5), st.hop(2).row(i));
            assert_eq!(b.token(i, 6), sv.hop(2).row(i));
            assert!(b.token(i, 7).iter().all(|&v| v == 0.0));
        }
        assert_eq!(seq_len(1), 6);
    }

    #[test]
    fn hop_count_mismatch_is_input_error() {
        let (x_t, x_v, st, sv) = setup(2);
        assert!(matches!(
            build_sequence(&x_t, &x_v, &st, &sv, 3),
            Err(Error::Input { .. })
        ));
    }

    #[test]
    fn self_slots_ignore_neighbors() {
        let (x_t, x_v, st, sv) = setup(2);
        let full = build_sequence(&x_t, &x_v, &st, &sv, 2).unwrap();
        let mut zt = st.clone();
        let mut zv = sv.clone();
        for h in zt.hops.iter_mut().chain(zv.hops.iter_mut()) {
            h.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let zeroed = build_sequence(&x_t, &x_v, &zt, &zv, 2).unwrap();
        for i in 0..5 {
            for s in 0..SELF_LEN {
                assert_eq!(full.token(i, s), zeroed.token(i, s));
            }
        }
    }

    #[test]
    fn fixed_text_missing_replaces_slot_one_only() {
        let (x_t, x_v, st, sv) = setup(1);
        let b = build_sequence(&x_t, &x_v, &st, &sv, 1).unwrap();
        let flags = vec![MissFlags::TEXT; 5];
        let m = apply_missing::<ChaCha8Rng>(&b, MissPolicy::Fixed(&flags), &tokens(4)).unwrap();
        for i in 0..5 {
            assert_eq!(m.token(i, 0), &[9.0; 4]);
            assert_eq!(m.token(i, 1), b.token(i, 1));
            for s in 2..b.len {
                assert_eq!(m.token(i, s), b.token(i, s));
            }
        }
        let again = apply_missing::<ChaCha8Rng>(&m, MissPolicy::Fixed(&flags), &tokens(4)).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn both_missing_is_rejected() {
        let (x_t, x_v, st, sv) = setup(1);
        let b = build_sequence(&x_t, &x_v, &st, &sv, 1).unwrap();
        let mut flags = vec![MissFlags::NONE; 5];
        flags[2] = MissFlags {
            text_missing: true,
            visual_missing: true,
        };
        assert!(matches!(
            apply_missing::<ChaCha8Rng>(&b, MissPolicy::Fixed(&flags), &tokens(4)),
            Err(Error::Input { .. })
        ));
    }

    #[test]
    fn zero_rate_is_identity() {
        let (x_t, x_v, st, sv) = setup(1);
        let b = build_sequence(&x_t, &x_v, &st, &sv, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = apply_missing(
            &b,
            MissPolicy::Train {
                p_miss: 0.0,
                rng: &mut rng,
            },
            &tokens(4),
        )
        .unwrap();
        assert_eq!(m, b);
    }

    #[test]
    fn train_masking_rate_matches_binomial() {
        let n = 10_000;
        let p = 1.0 / 3.0;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let flags = draw_train_flags(n, p, &mut rng).unwrap();
        let text = flags.iter().filter(|f| f.text_missing).count() as f64;
        let vis = flags.iter().filter(|f| f.visual_missing).count() as f64;
        assert!(flags.iter().all(|f| !(f.text_missing && f.visual_missing)));
        // 4-sigma binomial band
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((text - n as f64 * p).abs() < 4.0 * sd, "text {text}");
        assert!((vis - n as f64 * p).abs() < 4.0 * sd, "visual {vis}");
    }

    #[test]
    fn mask_for_two_hops() {
        let m = build_mask(2).unwrap();
        assert_eq!(m.len, 8);
        assert_eq!(m.forbidden_count(), 15);
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(m.allowed(i, j), !(i < 3 && j >= 3));
            }
        }
        assert!(m.restrict(3).allow.iter().all(|&a| a));
        assert!(build_mask(0).is_err());
    }

    proptest! {
        #[test]
        fn forbidden_count_formula(k in 1usize..20) {
            let m = build_mask(k).unwrap();
            prop_assert_eq!(m.forbidden_count(), 3 * (2 * k + 1));
            prop_assert_eq!(m.forbidden_count(), 3 * (m.len - 3));
        }
    }
}

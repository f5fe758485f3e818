//! Offline graph pre-computation: canonical CSR adjacency, the symmetric
//! normalization `D̃^{-1/2}(A + I)D̃^{-1/2}`, zero-padding of modality
//! features, and multi-hop propagation by repeated sparse × dense products.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Visual,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Visual => "visual",
        }
    }
}

/// Sparse matrix in compressed-sparse-row form with sorted, unique column
/// indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrGraph {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f32>,
}

impl CsrGraph {
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f32]) {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[s..e], &self.values[s..e])
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    /// Value at `(i, j)`, if stored.
    pub fn get(&self, i: usize, j: usize) -> Option<f32> {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).ok().map(|p| vals[p])
    }

    /// Checks the canonical-form invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::contract("csr", d));
        if self.row_ptr.len() != self.n + 1 || self.row_ptr[0] != 0 {
            return bad("row_ptr must have n+1 entries starting at 0".into());
        }
        if self.row_ptr[self.n] != self.col_idx.len() || self.values.len() != self.col_idx.len() {
            return bad("row_ptr[n] must equal nnz".into());
        }
        for i in 0..self.n {
            if self.row_ptr[i] > self.row_ptr[i + 1] {
                return bad(format!("row_ptr decreases at row {i}"));
            }
            let (cols, _) = self.row(i);
            if cols.iter().any(|&c| c >= self.n) {
                return bad(format!("column out of range in row {i}"));
            }
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("row {i} columns not strictly increasing"));
            }
        }
        Ok(())
    }

    /// Dense row-major copy, for oracles and small tests.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[i * self.n + j] = v as f64;
            }
        }
        out
    }

    /// Edge list `(i, j)` with `i < j` for a symmetric pattern.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for &j in self.row(i).0 {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Dense `n × d` feature block for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub n: usize,
    pub d: usize,
    pub modality: Modality,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, modality: Modality, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::dim(
                "feature_matrix",
                format!("{n}x{d} needs {} values, got {}", n * d, data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(
                modality.as_str(),
                format!("non-finite feature at row {}, column {}", pos / d.max(1), pos % d.max(1)),
            ));
        }
        Ok(Self {
            n,
            d,
            modality,
            data,
        })
    }

    pub fn zeros(n: usize, d: usize, modality: Modality) -> Self {
        Self {
            n,
            d,
            modality,
            data: vec![0.0; n * d],
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Rows `idx` in order.
    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            n: idx.len(),
            d: self.d,
            modality: self.modality,
            data,
        }
    }
}

/// `Â^k X` for `k = 1..=K`, one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct HopStack {
    pub modality: Modality,
    pub hops: Vec<FeatureMatrix>,
}

impl HopStack {
    pub fn k(&self) -> usize {
        self.hops.len()
    }

    /// Hop `k`, 1-based.
    pub fn hop(&self, k: usize) -> &FeatureMatrix {
        &self.hops[k - 1]
    }
}

/// Undirected, deduplicated, self-loop-free binary adjacency.
pub fn build_csr(n: usize, edges: &[(usize, usize)]) -> Result<CsrGraph> {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (e, &(s, t)) in edges.iter().enumerate() {
        if s >= n || t >= n {
            return Err(Error::input(
                "edges",
                format!("edge {e} ({s}, {t}) references a node outside [0, {n})"),
            ));
        }
        if s == t {
            continue;
        }
        adj[s].push(t);
        adj[t].push(s);
    }
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    row_ptr.push(0);
    for mut nbrs in adj {
        nbrs.sort_unstable();
        nbrs.dedup();
        col_idx.extend(nbrs);
        row_ptr.push(col_idx.len());
    }
    let values = vec![1.0; col_idx.len()];
    Ok(CsrGraph {
        n,
        row_ptr,
        col_idx,
        values,
    })
}

/// `Â = D̃^{-1/2}(A + I)D̃^{-1/2}`. Any self-loops already present in `a`
/// are replaced by the single added identity entry.
pub fn normalize_sym(a: &CsrGraph) -> CsrGraph {
    let n = a.n;
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::with_capacity(a.nnz() + n);
    row_ptr.push(0);
    for i in 0..n {
        let cols = a.row(i).0;
        let split = cols.partition_point(|&c| c < i);
        col_idx.extend_from_slice(&cols[..split]);
        col_idx.push(i);
        col_idx.extend(cols[split..].iter().copied().filter(|&c| c != i));
        row_ptr.push(col_idx.len());
    }
    let deg: Vec<f64> = (0..n).map(|i| (row_ptr[i + 1] - row_ptr[i]) as f64).collect();
    let mut values = Vec::with_capacity(col_idx.len());
    for i in 0..n {
        for &j in &col_idx[row_ptr[i]..row_ptr[i + 1]] {
            values.push((1.0 / (deg[i] * deg[j]).sqrt()) as f32);
        }
    }
    CsrGraph {
        n,
        row_ptr,
        col_idx,
        values,
    }
}

/// Appends zero columns up to width `d_in`.
pub fn pad_features(x: &FeatureMatrix, d_in: usize) -> Result<FeatureMatrix> {
    if x.d > d_in {
        return Err(Error::input(
            x.modality.as_str(),
            format!("feature width {} exceeds padded width {d_in}", x.d),
        ));
    }
    if x.d == d_in {
        return Ok(x.clone());
    }
    let mut data = vec![0.0f32; x.n * d_in];
    for i in 0..x.n {
        data[i * d_in..i * d_in + x.d].copy_from_slice(x.row(i));
    }
    Ok(FeatureMatrix {
        n: x.n,
        d: d_in,
        modality: x.modality,
        data,
    })
}

/// One sparse × dense product. Each output row accumulates in `f64` and is
/// written by exactly one worker.
pub fn spmm(a: &CsrGraph, x: &FeatureMatrix, parallel: bool) -> Result<FeatureMatrix> {
    if a.n != x.n {
        return Err(Error::dim(
            "spmm",
            format!("operator is {}x{}, features have {} rows", a.n, a.n, x.n),
        ));
    }
    let d = x.d;
    let mut out = vec![0.0f32; x.n * d];
    let row_job = |(i, orow): (usize, &mut [f32])| {
        let mut accum = vec![0.0f64; d];
        let (cols, vals) = a.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            let v = v as f64;
            for (s, &xv) in accum.iter_mut().zip(x.row(j)) {
                *s += v * xv as f64;
            }
        }
        for (o, s) in orow.iter_mut().zip(accum) {
            *o = s as f32;
        }
    };
    if d > 0 {
        if parallel {
            out.par_chunks_mut(d).enumerate().for_each(row_job);
        } else {
            out.chunks_mut(d).enumerate().for_each(row_job);
        }
    }
    Ok(FeatureMatrix {
        n: x.n,
        d,
        modality: x.modality,
        data: out,
    })
}

/// `[ÂX, Â²X, …, Â^K X]` without ever forming `Â^k`.
pub fn propagate(a_hat: &CsrGraph, x: &FeatureMatrix, k: usize) -> Result<HopStack> {
    propagate_with(a_hat, x, k, true)
}

pub fn propagate_with(
    a_hat: &CsrGraph,
    x: &FeatureMatrix,
    k: usize,
    parallel: bool,
) -> Result<HopStack> {
    if k == 0 {
        return Err(Error::input("k", "hop count must be at least 1"));
    }
    let mut hops = Vec::with_capacity(k);
    let mut prev = spmm(a_hat, x, parallel)?;
    for _ in 1..k {
        let next = spmm(a_hat, &prev, parallel)?;
        hops.push(prev);
        prev = next;
    }
    hops.push(prev);
    Ok(HopStack {
        modality: x.modality,
        hops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_graph(n: usize, p: f64, seed: u64) -> Vec<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(p) {
                    edges.push((i, j));
                }
            }
        }
        edges
    }

    fn random_features(n: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        FeatureMatrix::new(n, d, Modality::Text, data).unwrap()
    }

    #[test]
    fn single_edge_is_symmetric() {
        let g = build_csr(2, &[(0, 1)]).unwrap();
        assert_eq!(g.nnz(), 2);
        assert_eq!(g.get(0, 1), Some(1.0));
        assert_eq!(g.get(1, 0), Some(1.0));
        g.validate().unwrap();
    }

    #[test]
    fn duplicates_collapse_and_self_loops_drop() {
        let g = build_csr(2, &[(0, 1), (1, 0), (0, 1)]).unwrap();
        assert_eq!(g.nnz(), 2);
        let g = build_csr(4, &[(3, 3), (0, 1)]).unwrap();
        assert_eq!(g.nnz(), 2);
        assert_eq!(g.degree(3), 0);
    }

    #[test]
    fn out_of_range_edge_is_input_error() {
        assert!(matches!(
            build_csr(3, &[(0, 3)]),
            Err(Error::Input { .. })
        ));
    }

    #[test]
    fn normalize_hand_cases() {
        let iso = normalize_sym(&build_csr(1, &[]).unwrap());
        assert_eq!(iso.values, vec![1.0]);

        let pair = normalize_sym(&build_csr(2, &[(0, 1)]).unwrap());
        assert_eq!(pair.to_dense(), vec![0.5; 4]);

        let star = normalize_sym(&build_csr(3, &[(0, 1), (0, 2)]).unwrap());
        let expect = 1.0 / (3.0f64 * 2.0).sqrt();
        assert!((star.get(0, 1).unwrap() as f64 - expect).abs() < 1e-7);
        assert!((expect - 0.4082).abs() < 1e-4);
        star.validate().unwrap();
    }

    #[test]
    fn normalize_ignores_input_self_loops() {
        let a = CsrGraph {
            n: 2,
            row_ptr: vec![0, 2, 3],
            col_idx: vec![0, 1, 0],
            values: vec![1.0; 3],
        };
        let a_hat = normalize_sym(&a);
        assert_eq!(a_hat.nnz(), 4);
        assert_eq!(a_hat.to_dense(), vec![0.5; 4]);
    }

    #[test]
    fn regular_graph_rows_sum_to_one() {
        // 6-cycle: every node has degree 2
        let edges: Vec<_> = (0..6).map(|i| (i, (i + 1) % 6)).collect();
        let a_hat = normalize_sym(&build_csr(6, &edges).unwrap());
        let ones = FeatureMatrix::new(6, 1, Modality::Text, vec![1.0; 6]).unwrap();
        let out = spmm(&a_hat, &ones, false).unwrap();
        for v in out.data {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pad_examples() {
        let x = random_features(4, 3, 1);
        assert_eq!(pad_features(&x, 3).unwrap(), x);
        let p = pad_features(&x, 5).unwrap();
        assert_eq!(p.d, 5);
        for i in 0..4 {
            assert_eq!(&p.row(i)[..3], x.row(i));
            assert_eq!(&p.row(i)[3..], &[0.0, 0.0]);
        }
        assert!(matches!(pad_features(&p, 4), Err(Error::Input { .. })));
    }

    #[test]
    fn propagate_hand_cases() {
        let a_hat = normalize_sym(&build_csr(2, &[(0, 1)]).unwrap());
        let x = FeatureMatrix::new(2, 1, Modality::Visual, vec![2.0, 0.0]).unwrap();
        let st = propagate(&a_hat, &x, 1).unwrap();
        assert_eq!(st.hop(1).data, vec![1.0, 1.0]);
        assert_eq!(st.modality, Modality::Visual);

        let eye = normalize_sym(&build_csr(5, &[]).unwrap());
        let x = random_features(5, 3, 2);
        let st = propagate(&eye, &x, 4).unwrap();
        for k in 1..=4 {
            assert_eq!(st.hop(k).data, x.data);
        }
    }

    #[test]
    fn propagate_rejects_mismatch_and_zero_hops() {
        let a_hat = normalize_sym(&build_csr(3, &[]).unwrap());
        assert!(propagate(&a_hat, &random_features(4, 2, 0), 1).is_err());
        assert!(propagate(&a_hat, &random_features(3, 2, 0), 0).is_err());
    }

    #[test]
    fn parallel_and_serial_agree_bitwise() {
        let a_hat = normalize_sym(&build_csr(60, &random_graph(60, 0.1, 5)).unwrap());
        let x = random_features(60, 7, 6);
        assert_eq!(
            propagate_with(&a_hat, &x, 3, true).unwrap(),
            propagate_with(&a_hat, &x, 3, false).unwrap()
        );
    }

    proptest! {
        #[test]
        fn normalized_operator_is_symmetric(n in 1usize..30, p in 0.0f64..0.5, seed in 0u64..1000) {
            let a_hat = normalize_sym(&build_csr(n, &random_graph(n, p, seed)).unwrap());
            a_hat.validate().unwrap();
            for i in 0..n {
                let (cols, vals) = a_hat.row(i);
                for (&j, &v) in cols.iter().zip(vals) {
                    prop_assert_eq!(a_hat.get(j, i), Some(v));
                    prop_assert!(v > 0.0 && v <= 1.0);
                }
            }
        }

        #[test]
        fn propagate_is_permutation_equivariant(n in 2usize..25, seed in 0u64..500) {
            let edges = random_graph(n, 0.2, seed);
            let x = random_features(n, 3, seed + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            // node i is relabeled perm[i]
            let pedges: Vec<_> = edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
            let mut px = FeatureMatrix::zeros(n, 3, Modality::Text);
            for i in 0..n {
                px.data[perm[i] * 3..perm[i] * 3 + 3].copy_from_slice(x.row(i));
            }
            let base = propagate(&normalize_sym(&build_csr(n, &edges).unwrap()), &x, 2).unwrap();
            let moved = propagate(&normalize_sym(&build_csr(n, &pedges).unwrap()), &px, 2).unwrap();
            for k in 1..=2 {
                for i in 0..n {
                    for c in 0..3 {
                        let a = base.hop(k).row(i)[c];
                        let b = moved.hop(k).row(perm[i])[c];
                        prop_assert!((a - b).abs() < 1e-6);
                    }
                }
            }
        }

        #[test]
        fn propagate_prefix_consistency(n in 2usize..25, seed in 0u64..500, k in 1usize..4) {
            let a_hat = normalize_sym(&build_csr(n, &random_graph(n, 0.2, seed)).unwrap());
            let x = random_features(n, 2, seed);
            let long = propagate(&a_hat, &x, 4).unwrap();
            let short = propagate(&a_hat, &x, k).unwrap();
            for j in 1..=k {
                prop_assert_eq!(&long.hop(j).data, &short.hop(j).data);
            }
        }
    }
}

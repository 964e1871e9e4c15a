//! Shared dense/matrix-free linear algebra: operator norms via power
//! iteration on `MᵀM`, symmetric eigenvalue helpers, and selector
//! optimization utilities used by the certificate leaves.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A real linear operator exposed through matrix-vector products.
///
/// Implementors only need products with `M` and `Mᵀ`; norms are estimated
/// without materializing entries.
pub trait LinearOp {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `out = M v` with `v.len() == ncols`, `out.len() == nrows`.
    fn apply(&self, v: &[f64], out: &mut [f64]);
    /// `out = Mᵀ v` with `v.len() == nrows`, `out.len() == ncols`.
    fn apply_t(&self, v: &[f64], out: &mut [f64]);
    /// Square and equal to its own transpose (enables one-sided Lanczos).
    fn is_self_adjoint(&self) -> bool {
        false
    }
}

impl LinearOp for DMatrix<f64> {
    fn nrows(&self) -> usize {
        DMatrix::nrows(self)
    }
    fn ncols(&self) -> usize {
        DMatrix::ncols(self)
    }
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let x = nalgebra::DVector::from_column_slice(v);
        let y = self * x;
        out.copy_from_slice(y.as_slice());
    }
    fn apply_t(&self, v: &[f64], out: &mut [f64]) {
        let x = nalgebra::DVector::from_column_slice(v);
        let y = self.transpose() * x;
        out.copy_from_slice(y.as_slice());
    }
}

/// Settings for [`op_norm`]. Defaults match the certificate contract:
/// 1e-6 relative tolerance, 10 seeded restarts, deterministic.
#[derive(Debug, Clone, Copy)]
pub struct PowerIterSettings {
    pub rel_tol: f64,
    pub max_iters: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for PowerIterSettings {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            max_iters: 400,
            restarts: 10,
            seed: 0x5517_CE27,
        }
    }
}

/// Inflation applied to power-iteration norm estimates when they feed a
/// certificate, covering residual iteration error.
pub const NORM_SOUNDNESS_MARGIN: f64 = 1.01;

/// Largest singular value of `M`, computed on `MᵀM` (or `MMᵀ`, whichever
/// side is smaller) by restarted Lanczos iteration with a fixed seed: up to
/// `restarts` rounds of a small Krylov factorization, each warm-started
/// from the best Ritz vector, stopping when the top Ritz value moves by
/// less than `rel_tol` relatively. Deterministic for fixed settings.
pub fn op_norm(op: &dyn LinearOp, settings: PowerIterSettings) -> f64 {
    if op.is_self_adjoint() {
        let dim = op.ncols();
        if dim == 0 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        let mut v0: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect();
        normalize(&mut v0);
        let mut prev = f64::NEG_INFINITY;
        let mut best = 0.0f64;
        for _ in 0..settings.restarts.max(2) {
            let (thetas, vecs) = lanczos_pass(&|v, out| op.apply(v, out), dim, &v0, 32.min(dim));
            let mut top = 0usize;
            for i in 1..thetas.len() {
                if thetas[i].abs() > thetas[top].abs() {
                    top = i;
                }
            }
            best = thetas[top].abs();
            v0 = vecs[top].clone();
            if (best - prev).abs() <= settings.rel_tol * best.abs().max(1e-300) {
                break;
            }
            prev = best;
        }
        return best;
    }
    let (small, use_cols) = if op.ncols() <= op.nrows() {
        (op.ncols(), true)
    } else {
        (op.nrows(), false)
    };
    if small == 0 {
        return 0.0;
    }
    let other = if use_cols { op.nrows() } else { op.ncols() };
    let tmp = std::cell::RefCell::new(vec![0.0; other]);
    let gram_apply = |v: &[f64], out: &mut [f64]| {
        let mut tmp = tmp.borrow_mut();
        if use_cols {
            op.apply(v, &mut tmp);
            op.apply_t(&tmp, out);
        } else {
            op.apply_t(v, &mut tmp);
            op.apply(&tmp, out);
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut v0: Vec<f64> = (0..small).map(|_| rng.gen::<f64>() - 0.5).collect();
    normalize(&mut v0);
    let mut prev = f64::NEG_INFINITY;
    let mut lam = 0.0f64;
    for _ in 0..settings.restarts.max(2) {
        let (thetas, vecs) = lanczos_pass(&gram_apply, small, &v0, 32.min(small));
        let mut top = 0usize;
        for i in 1..thetas.len() {
            if thetas[i] > thetas[top] {
                top = i;
            }
        }
        lam = thetas[top];
        v0 = vecs[top].clone();
        if (lam - prev).abs() <= settings.rel_tol * lam.abs().max(1e-300) {
            break;
        }
        prev = lam;
    }
    lam.max(0.0).sqrt()
}

/// One Lanczos factorization with twice-repeated full reorthogonalization;
/// returns all Ritz values and vectors of the Krylov space.
fn lanczos_pass(
    apply: &dyn Fn(&[f64], &mut [f64]),
    dim: usize,
    start: &[f64],
    steps: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut basis: Vec<Vec<f64>> = vec![start.to_vec()];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut w = vec![0.0; dim];
    let steps = steps.min(dim).max(1);
    for j in 0..steps {
        apply(&basis[j], &mut w);
        alphas.push(dot(&basis[j], &w));
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, &w);
                for (wi, bi) in w.iter_mut().zip(b) {
                    *wi -= c * bi;
                }
            }
        }
        let beta = norm(&w);
        if beta <= 1e-13 * alphas[0].abs().max(1e-300) || j + 1 == steps {
            break;
        }
        betas.push(beta);
        basis.push(w.iter().map(|x| x / beta).collect());
    }
    let m = alphas.len();
    let mut tri = DMatrix::zeros(m, m);
    for i in 0..m {
        tri[(i, i)] = alphas[i];
        if i + 1 < m {
            tri[(i, i + 1)] = betas[i];
            tri[(i + 1, i)] = betas[i];
        }
    }
    let eig = tri.symmetric_eigen();
    let mut thetas = Vec::with_capacity(m);
    let mut vecs = Vec::with_capacity(m);
    for idx in 0..m {
        thetas.push(eig.eigenvalues[idx]);
        let mut ritz = vec![0.0; dim];
        for (j, b) in basis.iter().enumerate().take(m) {
            let c = eig.eigenvectors[(j, idx)];
            for (ri, bi) in ritz.iter_mut().zip(b) {
                *ri += c * bi;
            }
        }
        normalize(&mut ritz);
        vecs.push(ritz);
    }
    (thetas, vecs)
}

/// A low-rank spectral sketch of an operator: `M ≈ Σ_k σ_k u_k v_kᵀ`, with
/// the exact norm of the deflated remainder `M - Σ_k σ_k u_k v_kᵀ`.
///
/// The identity `x'ᵀ M y = Σ_k σ_k ⟨u_k, x'⟩⟨v_k, y⟩ + x'ᵀ (M - Σ…) y` holds
/// for *any* sketch vectors, so downstream bounds built from a sketch stay
/// sound regardless of how well the pairs approximate singular triplets.
pub struct SpectralSketch {
    pub sigmas: Vec<f64>,
    /// Left vectors (length = nrows), unit norm.
    pub left: Vec<Vec<f64>>,
    /// Right vectors (length = ncols), orthonormal.
    pub right: Vec<Vec<f64>>,
    pub deflated_norm: f64,
    /// Plain operator norm estimate (no deflation).
    pub norm: f64,
}

/// Computes a rank-`k` sketch from the top Ritz pairs of `MᵀM` (or `MMᵀ`)
/// and measures the deflated remainder's norm.
pub fn spectral_sketch(op: &dyn LinearOp, k: usize, settings: PowerIterSettings) -> SpectralSketch {
    if op.is_self_adjoint() {
        let dim = op.ncols();
        let k = k.min(dim.saturating_sub(1));
        let steps = (2 * k + 16).min(dim).max(8.min(dim));
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x51E7C4);
        let mut v0: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect();
        normalize(&mut v0);
        let (thetas, vecs) = lanczos_pass(&|v, out| op.apply(v, out), dim, &v0, steps);
        let mut order: Vec<usize> = (0..thetas.len()).collect();
        order.sort_by(|&a, &b| thetas[b].abs().partial_cmp(&thetas[a].abs()).unwrap());
        let norm_plain = order.first().map_or(0.0, |&i| thetas[i].abs());
        let mut sigmas = Vec::new();
        let mut lefts = Vec::new();
        let mut rights = Vec::new();
        for &idx in order.iter().take(k) {
            let theta = thetas[idx];
            if theta.abs() <= 1e-300 {
                break;
            }
            sigmas.push(theta.abs());
            let v = vecs[idx].clone();
            let u: Vec<f64> = v.iter().map(|x| x * theta.signum()).collect();
            lefts.push(u);
            rights.push(v);
        }
        let deflated_norm = if sigmas.is_empty() {
            norm_plain
        } else {
            let deflated = DeflatedOp {
                base: op,
                sigmas: &sigmas,
                left: &lefts,
                right: &rights,
            };
            let mut defl_settings = settings;
            defl_settings.restarts = 2;
            op_norm(&deflated, defl_settings)
        };
        return SpectralSketch {
            sigmas,
            left: lefts,
            right: rights,
            deflated_norm,
            norm: norm_plain,
        };
    }
    let (small, use_cols) = if op.ncols() <= op.nrows() {
        (op.ncols(), true)
    } else {
        (op.nrows(), false)
    };
    let other = if use_cols { op.nrows() } else { op.ncols() };
    let k = k.min(small.saturating_sub(1));
    let steps = (2 * k + 16).min(small).max(8.min(small));
    let tmp = std::cell::RefCell::new(vec![0.0; other]);
    let gram_apply = |v: &[f64], out: &mut [f64]| {
        let mut tmp = tmp.borrow_mut();
        if use_cols {
            op.apply(v, &mut tmp);
            op.apply_t(&tmp, out);
        } else {
            op.apply_t(v, &mut tmp);
            op.apply(&tmp, out);
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x51E7C4);
    let mut v0: Vec<f64> = (0..small).map(|_| rng.gen::<f64>() - 0.5).collect();
    normalize(&mut v0);
    let (thetas, vecs) = lanczos_pass(&gram_apply, small, &v0, steps);
    let mut order: Vec<usize> = (0..thetas.len()).collect();
    order.sort_by(|&a, &b| thetas[b].partial_cmp(&thetas[a]).unwrap());
    let norm_plain = order.first().map_or(0.0, |&i| thetas[i].max(0.0).sqrt());
    let mut sigmas = Vec::with_capacity(k);
    let mut rights: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut lefts: Vec<Vec<f64>> = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        if thetas[idx] <= 0.0 {
            break;
        }
        let ritz = vecs[idx].clone();
        let mut mv = vec![0.0; other];
        if use_cols {
            op.apply(&ritz, &mut mv);
        } else {
            op.apply_t(&ritz, &mut mv);
        }
        let sigma = norm(&mv);
        if sigma <= 1e-300 {
            break;
        }
        for x in mv.iter_mut() {
            *x /= sigma;
        }
        sigmas.push(sigma);
        if use_cols {
            rights.push(ritz);
            lefts.push(mv);
        } else {
            rights.push(mv);
            lefts.push(ritz);
        }
    }
    let deflated_norm = if sigmas.is_empty() {
        norm_plain
    } else {
        let deflated = DeflatedOp {
            base: op,
            sigmas: &sigmas,
            left: &lefts,
            right: &rights,
        };
        let mut defl_settings = settings;
        defl_settings.restarts = 2;
        op_norm(&deflated, defl_settings)
    };
    SpectralSketch {
        sigmas,
        left: lefts,
        right: rights,
        deflated_norm,
        norm: norm_plain,
    }
}

/// `M - Σ_k σ_k u_k v_kᵀ` as an operator.
pub struct DeflatedOp<'a> {
    pub base: &'a dyn LinearOp,
    pub sigmas: &'a [f64],
    pub left: &'a [Vec<f64>],
    pub right: &'a [Vec<f64>],
}

impl LinearOp for DeflatedOp<'_> {
    fn nrows(&self) -> usize {
        self.base.nrows()
    }
    fn ncols(&self) -> usize {
        self.base.ncols()
    }
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        self.base.apply(v, out);
        for ((sig, u), vv) in self.sigmas.iter().zip(self.left).zip(self.right) {
            let c = sig * dot(vv, v);
            for (o, ui) in out.iter_mut().zip(u) {
                *o -= c * ui;
            }
        }
    }
    fn apply_t(&self, v: &[f64], out: &mut [f64]) {
        self.base.apply_t(v, out);
        for ((sig, u), vv) in self.sigmas.iter().zip(self.left).zip(self.right) {
            let c = sig * dot(u, v);
            for (o, vi) in out.iter_mut().zip(vv) {
                *o -= c * vi;
            }
        }
    }
}

/// Exact maximum of `|⟨y, w^{⊗j}⟩|` over 0/1 selectors with `Σw ≤ m`, upper
/// bounded: for `j = 1` the top-m absolute sum; for `j = 2` (y read as an
/// n×n matrix, layout `i + n·j`) the top-m sum of top-m absolute row sums,
/// further capped by the Cauchy–Schwarz value `‖y‖ m^{j/2} = m^{j/2}`.
pub fn selector_overlap(y: &[f64], j: usize, n: usize, m: usize) -> f64 {
    let cs = (m as f64).powf(j as f64 / 2.0);
    match j {
        1 => top_budget_sum_positive(&y.iter().map(|v| v.abs()).collect::<Vec<_>>(), m).min(cs),
        2 => {
            // r_i = top-m sum of |y[i, ·]| over the second coordinate; the
            // overlap needs rows and columns selected consistently, so both
            // axes are folded: bound by top-m over i of r_i with the pair
            // (i, j) both free — sound since w_i w_j ≤ w_i.
            let mut row_sums = vec![0.0; n];
            let mut buf = vec![0.0; n];
            for i in 0..n {
                for jj in 0..n {
                    buf[jj] = y[i + n * jj].abs();
                }
                buf.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
                row_sums[i] = buf.iter().take(m).sum();
            }
            top_budget_sum_positive(&row_sums, m).min(cs)
        }
        _ => cs,
    }
}

/// Largest eigenvalue of a symmetric matrix (dense solve).
pub fn sym_eig_max(m: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(m.nrows(), m.ncols());
    if m.nrows() == 0 {
        return 0.0;
    }
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    let eig = m.clone().symmetric_eigen();
    eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn sym_eig_min(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    let eig = m.clone().symmetric_eigen();
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Spectral norm of a dense matrix: exact symmetric solve up to side 4096,
/// power iteration above.
pub fn dense_op_norm(m: &DMatrix<f64>) -> f64 {
    let side = m.nrows().min(m.ncols());
    if side == 0 {
        return 0.0;
    }
    if side <= 4096 && m.nrows().max(m.ncols()) <= 4096 && side <= 512 {
        // Small enough for an exact solve on the Gram matrix.
        let g = if m.ncols() <= m.nrows() {
            m.transpose() * m
        } else {
            m * m.transpose()
        };
        sym_eig_max(&g).max(0.0).sqrt()
    } else {
        op_norm(m, PowerIterSettings::default())
    }
}

/// Exact maximum of `Σ_i w_i c_i` over 0/1 selectors with `Σ w_i ≤ budget`:
/// the sum of the `budget` largest positive entries.
pub fn top_budget_sum_positive(values: &[f64], budget: usize) -> f64 {
    let mut pos: Vec<f64> = values.iter().cloned().filter(|v| *v > 0.0).collect();
    pos.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
    pos.iter().take(budget).sum()
}

/// Exact maximum of `|Σ_i w_i c_i|` over 0/1 selectors with `Σ w_i ≤ budget`.
pub fn top_budget_sum_abs(values: &[f64], budget: usize) -> f64 {
    let plus = top_budget_sum_positive(values, budget);
    let negated: Vec<f64> = values.iter().map(|v| -v).collect();
    let minus = top_budget_sum_positive(&negated, budget);
    plus.max(minus)
}

/// All `k`-element subsets of `0..n`, visited in lexicographic order.
pub fn for_each_combination(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        // advance
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Binomial coefficient as f64 (saturating; used only for size-cap checks).
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: &mut [f64]) {
    let n = norm(a);
    if n > 0.0 {
        for x in a.iter_mut() {
            *x /= n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_iteration_matches_dense_eigen() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = DMatrix::from_fn(40, 25, |_, _| rng.gen::<f64>() - 0.5);
        let exact = {
            let g = m.transpose() * &m;
            sym_eig_max(&g).sqrt()
        };
        let pi = op_norm(&m, PowerIterSettings::default());
        assert!((pi - exact).abs() <= 1e-5 * exact, "pi={pi} exact={exact}");
    }

    #[test]
    fn top_budget_sums() {
        let v = [3.0, -5.0, 1.0, -0.5, 2.0];
        assert_eq!(top_budget_sum_positive(&v, 2), 5.0);
        assert_eq!(top_budget_sum_abs(&v, 1), 5.0);
        assert_eq!(top_budget_sum_abs(&v, 2), 5.5);
    }

    #[test]
    fn combinations_count() {
        let mut count = 0usize;
        for_each_combination(6, 3, |_| count += 1);
        assert_eq!(count, 20);
        assert_eq!(binomial(6, 3), 20.0);
    }
}

//! Exact Gaussian-analysis primitives: normalized probabilist's Hermite
//! polynomials, moment formulas for products of Gaussian inner products with
//! exact norm-weight constants, and truncated-moment feasibility with a
//! four-atom witness.

use std::collections::BTreeMap;

use crate::{Error, Result};

/// Largest supported Hermite order / monomial degree.
pub const MAX_HERMITE_ORDER: usize = 64;

/// Coefficients of a polynomial in the normalized Hermite basis, keyed by
/// order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HermiteCoefficients {
    pub entries: BTreeMap<usize, f64>,
}

impl HermiteCoefficients {
    pub fn coeff(&self, order: usize) -> f64 {
        self.entries.get(&order).copied().unwrap_or(0.0)
    }

    /// Evaluate `Σ c_k h_k(x)`.
    pub fn eval(&self, x: f64) -> f64 {
        self.entries
            .iter()
            .map(|(&k, &c)| c * hermite_eval_unchecked(k, x))
            .sum()
    }

    pub fn max_order(&self) -> usize {
        self.entries.keys().next_back().copied().unwrap_or(0)
    }
}

/// `h_order(x)` under the normalization `E_{N(0,1)}[h_j h_k] = 1(j=k)`,
/// evaluated by the three-term recurrence.
pub fn hermite_eval(order: usize, x: f64) -> Result<f64> {
    if order > MAX_HERMITE_ORDER {
        return Err(Error::Unsupported(format!(
            "Hermite order {order} exceeds cap {MAX_HERMITE_ORDER}"
        )));
    }
    Ok(hermite_eval_unchecked(order, x))
}

pub(crate) fn hermite_eval_unchecked(order: usize, x: f64) -> f64 {
    // h_{k+1} = (x h_k - sqrt(k) h_{k-1}) / sqrt(k+1)
    let mut prev = 0.0f64;
    let mut cur = 1.0f64;
    for k in 0..order {
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    cur
}

/// Expansion of the monomial `x^ℓ` in the normalized Hermite basis:
/// `x^ℓ = Σ_m c_{ℓ-2m} h_{ℓ-2m}(x)` with
/// `c_{ℓ-2m} = ℓ! / (2^m m! sqrt((ℓ-2m)!))`.
pub fn hermite_expand_monomial(ell: usize) -> Result<HermiteCoefficients> {
    if ell > MAX_HERMITE_ORDER {
        return Err(Error::Unsupported(format!(
            "monomial degree {ell} exceeds cap {MAX_HERMITE_ORDER}"
        )));
    }
    let mut entries = BTreeMap::new();
    for m in 0..=ell / 2 {
        let order = ell - 2 * m;
        let log_c = ln_factorial(ell)
            - (m as f64) * std::f64::consts::LN_2
            - ln_factorial(m)
            - 0.5 * ln_factorial(order);
        entries.insert(order, log_c.exp());
    }
    Ok(HermiteCoefficients { entries })
}

/// `E_{N(mean, variance)} h_order(X)` for `0 ≤ variance ≤ 1`:
/// `ρ^order · h_order(mean/ρ)` with `ρ = sqrt(1 - variance)`, degenerating to
/// `mean^order / sqrt(order!)` at unit variance.
pub fn gaussian_hermite_moment(order: usize, mean: f64, variance: f64) -> Result<f64> {
    if order > MAX_HERMITE_ORDER {
        return Err(Error::Unsupported(format!(
            "Hermite order {order} exceeds cap {MAX_HERMITE_ORDER}"
        )));
    }
    if !(0.0..=1.0).contains(&variance) {
        return Err(Error::Unsupported(format!(
            "gaussian_hermite_moment requires 0 <= variance <= 1, got {variance}"
        )));
    }
    // The unit-variance branch avoids 0/0 in mean/ρ.
    if (variance - 1.0).abs() < 1e-14 {
        return Ok(mean.powi(order as i32) / factorial_sqrt(order));
    }
    let rho = (1.0 - variance).sqrt();
    Ok(rho.powi(order as i32) * hermite_eval_unchecked(order, mean / rho))
}

/// A Gaussian product-moment query: `E ||g||^{norm_power} Π ⟨g, u_i⟩` for a
/// standard Gaussian `g` in dimension `dim`.
#[derive(Debug, Clone)]
pub struct MatchingMomentQuery {
    pub vectors: Vec<Vec<f64>>,
    pub norm_power: usize,
    pub dim: usize,
}

/// Cap on the number of vectors in a [`MatchingMomentQuery`] (matchings are
/// enumerated exhaustively).
pub const MAX_WICK_VECTORS: usize = 12;

/// Exact value of `E ||g||^{k'} Π_{i≤k} ⟨g, u_i⟩`: the pair-matching sum
/// times the exact rising-product ratio `Π_{t<k'/2} (d + k + 2t)`.
/// Odd `k` returns exactly zero.
pub fn wick_moment(query: &MatchingMomentQuery) -> Result<f64> {
    let k = query.vectors.len();
    if k > MAX_WICK_VECTORS {
        return Err(Error::SizeCap(format!(
            "wick_moment supports at most {MAX_WICK_VECTORS} vectors, got {k}"
        )));
    }
    if query.norm_power % 2 != 0 {
        return Err(Error::InvalidArgument(
            "norm_power must be even".to_owned(),
        ));
    }
    for u in &query.vectors {
        if u.len() != query.dim {
            return Err(Error::InvalidArgument(format!(
                "vector length {} does not match dim {}",
                u.len(),
                query.dim
            )));
        }
    }
    if k % 2 == 1 {
        return Ok(0.0);
    }
    let ratio = wick_norm_ratio(query.dim as f64, k, query.norm_power);
    if k == 0 {
        return Ok(ratio);
    }
    // Gram matrix of the query vectors.
    let mut gram = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            gram[i * k + j] = dot(&query.vectors[i], &query.vectors[j]);
        }
    }
    let mut used = vec![false; k];
    let sum = matching_sum(&mut used, &gram, k);
    Ok(ratio * sum)
}

/// The exact norm-weight constant `E||g||^{k+k'} / E||g||^{k}`
/// `= Π_{t=0}^{k'/2-1} (d + k + 2t)` for `g ~ N(0, I_d)`.
pub fn wick_norm_ratio(d: f64, num_vectors: usize, norm_power: usize) -> f64 {
    let mut acc = 1.0;
    let mut t = 0;
    while 2 * t < norm_power {
        acc *= d + num_vectors as f64 + 2.0 * t as f64;
        t += 1;
    }
    acc
}

fn matching_sum(used: &mut [bool], gram: &[f64], k: usize) -> f64 {
    let first = match used.iter().position(|u| !*u) {
        Some(i) => i,
        None => return 1.0,
    };
    used[first] = true;
    let mut total = 0.0;
    for j in first + 1..k {
        if used[j] {
            continue;
        }
        used[j] = true;
        total += gram[first * k + j] * matching_sum(used, gram, k);
        used[j] = false;
    }
    used[first] = false;
    total
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Outcome of a truncated-moment feasibility query.
#[derive(Debug, Clone)]
pub enum MomentMatch {
    /// A witness distribution on at most four atoms of `[-B, B]` matching
    /// `(x1, x2, x3)`.
    Feasible { atoms: Vec<(f64, f64)> },
    /// The PSD characterization failed; carries the violating matrix's
    /// minimum eigenvalue.
    Infeasible { min_eigenvalue: f64 },
}

/// PSD tolerance for the two 2×2 feasibility matrices.
const MOMENT_PSD_TOL: f64 = 1e-10;
/// A-posteriori moment verification tolerance for the atom witness.
const MOMENT_WITNESS_TOL: f64 = 1e-8;

/// Decides whether a distribution on `[-B, B]` with first three moments
/// `(x1, x2, x3)` exists, and if so returns a witness supported on at most
/// four atoms.
pub fn moment_match(x1: f64, x2: f64, x3: f64, b: f64) -> Result<MomentMatch> {
    if !(b > 0.0) {
        return Err(Error::InvalidArgument("moment_match requires B > 0".into()));
    }
    let (m1, m2, m3) = (x1 / b, x2 / (b * b), x3 / (b * b * b));
    // The two normalized feasibility matrices.
    let mats = [
        [1.0 + m1, m1 + m2, m1 + m2, m2 + m3],
        [1.0 - m1, m1 - m2, m1 - m2, m2 - m3],
    ];
    let mut min_eig = f64::INFINITY;
    for m in &mats {
        min_eig = min_eig.min(min_eig_2x2(m[0], m[1], m[3]));
    }
    if min_eig < -MOMENT_PSD_TOL {
        return Ok(MomentMatch::Infeasible {
            min_eigenvalue: min_eig,
        });
    }
    let atoms = recover_atoms(x1, x2, x3, b)?;
    Ok(MomentMatch::Feasible { atoms })
}

fn min_eig_2x2(a: f64, b: f64, d: f64) -> f64 {
    let tr = a + d;
    let det = a * d - b * b;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    tr / 2.0 - disc
}

/// Constructs up to four atoms on `[-B, B]` matching `(x1, x2, x3)`.
///
/// Tries, in order: a point mass; the interior two-point quadrature rule;
/// the endpoint representation `{-B, t, B}`; the symmetric `{-B, B}` pair.
/// Ridge-regularized retries cover near-degenerate Hankel systems.
fn recover_atoms(x1: f64, x2: f64, x3: f64, b: f64) -> Result<Vec<(f64, f64)>> {
    let scale = b * b;
    // Point mass: variance ~ 0.
    if x2 - x1 * x1 <= 1e-12 * scale.max(1.0) {
        let atoms = vec![(x1.clamp(-b, b), 1.0)];
        if verify_moments(&atoms, x1, x2, x3, b) {
            return Ok(atoms);
        }
    }
    for ridge_pow in 0..6 {
        let ridge = 1e-6 * 10f64.powi(2 * ridge_pow) * scale.max(1.0);
        // Interior two-point rule: atoms are roots of t^2 - c1 t - c0 where
        // [[1, x1], [x1, x2 + ridge]] (c0, c1)^T = (x2, x3)^T.
        let a11 = 1.0;
        let a12 = x1;
        let a22 = x2 + ridge;
        let det = a11 * a22 - a12 * a12;
        if det.abs() > 1e-300 {
            let c0 = (a22 * x2 - a12 * x3) / det;
            let c1 = (a11 * x3 - a12 * x2) / det;
            let disc = c1 * c1 + 4.0 * c0;
            if disc >= 0.0 {
                let r = disc.sqrt();
                let t1 = (c1 - r) / 2.0;
                let t2 = (c1 + r) / 2.0;
                if (t2 - t1).abs() > 1e-300 {
                    let w2 = (x1 - t1) / (t2 - t1);
                    let w1 = 1.0 - w2;
                    let atoms = vec![(t1, w1), (t2, w2)];
                    if t1 >= -b - 1e-12 && t2 <= b + 1e-12 && w1 >= -1e-12 && w2 >= -1e-12 {
                        let atoms: Vec<_> = atoms
                            .into_iter()
                            .map(|(t, w)| (t.clamp(-b, b), w.max(0.0)))
                            .collect();
                        if verify_moments(&atoms, x1, x2, x3, b) {
                            return Ok(atoms);
                        }
                    }
                }
            }
        }
        // Endpoint representation {-B, t, B}.
        if (x2 - b * b).abs() > 1e-12 * scale {
            let t = (x3 - b * b * x1) / (x2 - b * b);
            if t.abs() <= b + 1e-9 {
                let t = t.clamp(-b, b);
                let denom = t * t - b * b;
                if denom.abs() > 1e-300 {
                    let w0 = (x2 - b * b) / denom;
                    let rest = 1.0 - w0;
                    let diff = (x1 - t * w0) / b;
                    let wp = (rest + diff) / 2.0;
                    let wm = (rest - diff) / 2.0;
                    if w0 >= -1e-12 && wp >= -1e-12 && wm >= -1e-12 {
                        let atoms = vec![(-b, wm.max(0.0)), (t, w0.max(0.0)), (b, wp.max(0.0))];
                        if verify_moments(&atoms, x1, x2, x3, b) {
                            return Ok(atoms);
                        }
                    }
                }
            }
        } else {
            // All mass at the endpoints.
            let wp = (1.0 + x1 / b) / 2.0;
            let wm = 1.0 - wp;
            let atoms = vec![(-b, wm), (b, wp)];
            if verify_moments(&atoms, x1, x2, x3, b) {
                return Ok(atoms);
            }
        }
    }
    Err(Error::Numerical(format!(
        "moment_match: feasible by PSD check but atom recovery failed for ({x1}, {x2}, {x3}, B={b})"
    )))
}

fn verify_moments(atoms: &[(f64, f64)], x1: f64, x2: f64, x3: f64, b: f64) -> bool {
    let mut mass = 0.0;
    let mut m = [0.0f64; 3];
    for &(t, w) in atoms {
        if w < -1e-12 || t < -b - 1e-9 || t > b + 1e-9 {
            return false;
        }
        mass += w;
        m[0] += w * t;
        m[1] += w * t * t;
        m[2] += w * t * t * t;
    }
    let s = b.max(1.0);
    (mass - 1.0).abs() <= MOMENT_WITNESS_TOL
        && (m[0] - x1).abs() <= MOMENT_WITNESS_TOL * s
        && (m[1] - x2).abs() <= MOMENT_WITNESS_TOL * s * s
        && (m[2] - x3).abs() <= MOMENT_WITNESS_TOL * s * s * s
}

// ---- factorial helpers -------------------------------------------------

/// `ln k!`, exact products up to 20!, log-gamma above.
pub fn ln_factorial(k: usize) -> f64 {
    if k <= 20 {
        let mut acc = 1.0f64;
        for i in 2..=k {
            acc *= i as f64;
        }
        acc.ln()
    } else {
        ln_gamma(k as f64 + 1.0)
    }
}

/// `sqrt(k!)` in f64, overflow-safe via logs above 20!.
pub fn factorial_sqrt(k: usize) -> f64 {
    (0.5 * ln_factorial(k)).exp()
}

/// `k!` in f64 (via logs above 20!).
pub fn factorial(k: usize) -> f64 {
    ln_factorial(k).exp()
}

/// Lanczos approximation of `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection, not needed for factorials but kept total.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Gauss–Hermite nodes/weights for the standard normal weight:
    /// Golub–Welsch eigenvalues polished by Newton on `h_m`, with weights
    /// from the Christoffel function `1 / Σ_{k<m} h_k(x)²`.
    fn gauss_hermite(m: usize) -> Vec<(f64, f64)> {
        let mut jacobi = DMatrix::zeros(m, m);
        for k in 1..m {
            let b = (k as f64).sqrt();
            jacobi[(k - 1, k)] = b;
            jacobi[(k, k - 1)] = b;
        }
        let eig = jacobi.symmetric_eigen();
        let mut out: Vec<(f64, f64)> = (0..m)
            .map(|j| {
                let mut x = eig.eigenvalues[j];
                for _ in 0..4 {
                    let h = hermite_eval_unchecked(m, x);
                    let dh = (m as f64).sqrt() * hermite_eval_unchecked(m - 1, x);
                    if dh != 0.0 {
                        x -= h / dh;
                    }
                }
                let christoffel: f64 = (0..m).map(|k| hermite_eval_unchecked(k, x).powi(2)).sum();
                (x, 1.0 / christoffel)
            })
            .collect();
        out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        out
    }

    #[test]
    fn hermite_base_values() {
        assert_eq!(hermite_eval(0, 7.3).unwrap(), 1.0);
        // h_2(x) = (x^2 - 1)/sqrt(2) vanishes at 1.
        assert!(hermite_eval(2, 1.0).unwrap().abs() < 1e-15);
        // Recurrence oracle: H_{e,3}(2) = 8 - 3*2 = 2, normalized by sqrt(3!).
        let expect = 2.0 / 6.0f64.sqrt();
        assert!((hermite_eval(3, 2.0).unwrap() - expect).abs() < 1e-14);
        assert!(hermite_eval(65, 0.0).is_err());
    }

    #[test]
    fn orthonormality_via_quadrature() {
        let quad = gauss_hermite(32);
        for j in 0..=20usize {
            for k in j..=20usize {
                let integral: f64 = quad
                    .iter()
                    .map(|&(x, w)| w * hermite_eval_unchecked(j, x) * hermite_eval_unchecked(k, x))
                    .sum();
                let expect = if j == k { 1.0 } else { 0.0 };
                assert!(
                    (integral - expect).abs() < 1e-8,
                    "orthonormality failed at ({j},{k}): {integral}"
                );
            }
        }
    }

    #[test]
    fn monomial_expansion_examples() {
        let e0 = hermite_expand_monomial(0).unwrap();
        assert_eq!(e0.entries.len(), 1);
        assert!((e0.coeff(0) - 1.0).abs() < 1e-15);

        let e2 = hermite_expand_monomial(2).unwrap();
        assert!((e2.coeff(2) - 2.0f64.sqrt()).abs() < 1e-14);
        assert!((e2.coeff(0) - 1.0).abs() < 1e-14);

        let e4 = hermite_expand_monomial(4).unwrap();
        assert!((e4.coeff(4) - 24.0f64.sqrt()).abs() < 1e-12);
        assert!((e4.coeff(2) - 6.0 * 2.0f64.sqrt()).abs() < 1e-12);
        assert!((e4.coeff(0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn monomial_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for ell in 0..=12usize {
            let coeffs = hermite_expand_monomial(ell).unwrap();
            for _ in 0..50 {
                let x: f64 = 4.0 * (rng.gen::<f64>() - 0.5);
                let resynth = coeffs.eval(x);
                let direct = x.powi(ell as i32);
                let scale = direct.abs().max(1.0);
                assert!(
                    (resynth - direct).abs() <= 1e-9 * scale,
                    "round trip failed at ell={ell}, x={x}: {resynth} vs {direct}"
                );
            }
        }
    }

    #[test]
    fn gaussian_moments() {
        // First Hermite moment is the mean.
        for &mu in &[-2.5, 0.0, 1.25] {
            assert!((gaussian_hermite_moment(1, mu, 1.0).unwrap() - mu).abs() < 1e-12);
        }
        // Direct integral E (X^2-1)/sqrt(2) at N(0, 1/2).
        let v = gaussian_hermite_moment(2, 0.0, 0.5).unwrap();
        assert!((v - (0.5 - 1.0) / 2.0f64.sqrt()).abs() < 1e-12);
        // Standard Gaussian kills all positive orders.
        for j in 1..=20 {
            assert!(gaussian_hermite_moment(j, 0.0, 1.0).unwrap().abs() < 1e-14);
        }
        assert!(gaussian_hermite_moment(2, 0.0, 1.5).is_err());
    }

    #[test]
    fn hermite_near_origin_decay_envelope() {
        // h_i(x)^2 sqrt(i) stays below a single calibrated constant on
        // |x| <= 1 for 4 <= i <= 40 (measured 1.305 over this range).
        let mut worst = 0.0f64;
        for i in 4..=40usize {
            let mut m = 0.0f64;
            for step in 0..=200 {
                let x = -1.0 + 2.0 * step as f64 / 200.0;
                let h = hermite_eval_unchecked(i, x);
                m = m.max(h * h * (i as f64).sqrt());
            }
            worst = worst.max(m);
        }
        assert!(worst <= 1.5, "envelope constant blew up: {worst}");
    }

    #[test]
    fn wick_examples() {
        let e1 = vec![1.0, 0.0, 0.0];
        let q = MatchingMomentQuery {
            vectors: vec![e1.clone(), e1.clone()],
            norm_power: 0,
            dim: 3,
        };
        assert!((wick_moment(&q).unwrap() - 1.0).abs() < 1e-14);

        let q4 = MatchingMomentQuery {
            vectors: vec![e1.clone(), e1.clone(), e1.clone(), e1.clone()],
            norm_power: 0,
            dim: 3,
        };
        assert!((wick_moment(&q4).unwrap() - 3.0).abs() < 1e-14);

        for d in 1..=10usize {
            let q = MatchingMomentQuery {
                vectors: vec![],
                norm_power: 2,
                dim: d,
            };
            assert!((wick_moment(&q).unwrap() - d as f64).abs() < 1e-12);
        }

        // Odd numbers of vectors vanish by symmetry.
        let q_odd = MatchingMomentQuery {
            vectors: vec![e1.clone(), e1.clone(), e1],
            norm_power: 2,
            dim: 3,
        };
        assert_eq!(wick_moment(&q_odd).unwrap(), 0.0);
    }

    #[test]
    fn norm_moments_match_rising_product() {
        // E ||g||^{2k} = d (d+2) ... (d+2k-2), checked for k <= 6, d <= 10.
        for d in 1..=10usize {
            let mut expect = 1.0;
            for k in 1..=6usize {
                expect *= (d + 2 * (k - 1)) as f64;
                let q = MatchingMomentQuery {
                    vectors: vec![],
                    norm_power: 2 * k,
                    dim: d,
                };
                let got = wick_moment(&q).unwrap();
                assert!(
                    (got - expect).abs() <= 1e-9 * expect,
                    "E||g||^{} at d={d}: {got} vs {expect}",
                    2 * k
                );
            }
        }
    }

    #[test]
    fn wick_vs_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let samples = 200_000usize;
        for trial in 0..20 {
            let d = 2 + (trial % 7);
            let k = 2 * (1 + trial % 3); // 2, 4, 6
            let kp = 2 * (trial % 3); // 0, 2, 4
            let vectors: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..d).map(|_| rng.gen::<f64>() - 0.5).collect())
                .collect();
            let q = MatchingMomentQuery {
                vectors: vec![vec![0.0; d]; 0],
                norm_power: kp,
                dim: d,
            };
            let _ = q;
            let query = MatchingMomentQuery {
                vectors: vectors.clone(),
                norm_power: kp,
                dim: d,
            };
            let exact = wick_moment(&query).unwrap();
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..samples {
                let g: Vec<f64> = (0..d)
                    .map(|_| crate::dataset::standard_normal(&mut rng))
                    .collect();
                let mut val = g.iter().map(|x| x * x).sum::<f64>().powi((kp / 2) as i32);
                for u in &vectors {
                    val *= dot(&g, u);
                }
                sum += val;
                sumsq += val * val;
            }
            let mean = sum / samples as f64;
            let var = (sumsq / samples as f64 - mean * mean).max(0.0);
            let se = (var / samples as f64).sqrt();
            assert!(
                (exact - mean).abs() <= 3.0 * se + 1e-9,
                "trial {trial}: exact {exact} vs MC {mean} (se {se})"
            );
        }
    }

    #[test]
    fn moment_match_examples() {
        match moment_match(0.0, 0.0, 0.0, 1.0).unwrap() {
            MomentMatch::Feasible { atoms } => {
                let spread: f64 = atoms.iter().map(|&(t, w)| w * t * t).sum();
                assert!(spread.abs() < 1e-10);
            }
            _ => panic!("point mass should be feasible"),
        }
        let b = 2.0;
        match moment_match(0.0, b * b, 0.0, b).unwrap() {
            MomentMatch::Feasible { atoms } => {
                for &(t, w) in &atoms {
                    if w > 1e-9 {
                        assert!((t.abs() - b).abs() < 1e-9);
                        assert!((w - 0.5).abs() < 1e-9);
                    }
                }
            }
            _ => panic!("symmetric two-point should be feasible"),
        }
        match moment_match(0.0, 2.0 * b * b, 0.0, b).unwrap() {
            MomentMatch::Infeasible { min_eigenvalue } => assert!(min_eigenvalue < 0.0),
            _ => panic!("second moment above B^2 must be infeasible"),
        }
    }

    #[test]
    fn moment_match_reflection_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let b = 0.5 + 2.0 * rng.gen::<f64>();
            let x1 = b * (rng.gen::<f64>() - 0.5);
            let x2 = 2.0 * b * b * rng.gen::<f64>();
            let x3 = b * b * b * (rng.gen::<f64>() - 0.5);
            let fwd = matches!(
                moment_match(x1, x2, x3, b).unwrap(),
                MomentMatch::Feasible { .. }
            );
            let refl = matches!(
                moment_match(-x1, x2, -x3, b).unwrap(),
                MomentMatch::Feasible { .. }
            );
            assert_eq!(fwd, refl, "reflection changed feasibility at ({x1},{x2},{x3},{b})");
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}

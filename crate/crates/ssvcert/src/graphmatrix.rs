//! Matrix representations of graph polynomials, graph matrices in the
//! Hermite basis, admissible circle/diamond merges, and flow-based norm
//! predictions.
//!
//! Two matrix paths coexist. Small representations are materialized densely
//! with the valid-labeling zeros built in. Large ones are matrix-free: the
//! free-sum operator (no labeling-validity zeros) factors through the data
//! matrix, so a matrix-vector product costs a handful of `n×n · n×d^m`
//! products instead of `n^{|V|}` work; the certificate layer accounts for
//! the coincident-labeling difference separately as lower-order graph
//! polynomials.

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use nalgebra::DMatrix;

use crate::dataset::Dataset;
use crate::graphpoly::{equal_es_expansion, set_partitions, Multigraph, Vertex};
use crate::kernel::hermite_eval_unchecked;
use crate::linalg::{dense_op_norm, op_norm, LinearOp, PowerIterSettings};
use crate::{Error, Result};

/// Dense materialization cap (entries).
pub const DENSE_ENTRY_CAP: usize = 4_000_000;
/// Two-vertex representations stay dense up to this many rows.
pub const DENSE_V2_MAX_N: usize = 1500;
/// Cap on `n · d^m` for one factored feature block.
const FEATURE_ENTRY_CAP: usize = 150_000_000;

/// Weighted multigraph terms sharing one vertex set; the represented
/// polynomial is `Σ_k c_k P_{G_k}`.
pub type ComboTerm = (f64, Multigraph);

// ---------------------------------------------------------------------
// Gram-factored features of a dataset
// ---------------------------------------------------------------------

/// Cached per-dataset factors: Khatri–Rao feature powers `Y_m` (so that
/// `A^{∘m} = Y_m Y_mᵀ`), Hadamard powers of the Gram matrix, and norm-power
/// node weights.
pub struct GramFeatures {
    x: DMatrix<f64>,
    kr: std::cell::RefCell<BTreeMap<usize, Rc<DMatrix<f64>>>>,
    kr_pairs: std::cell::RefCell<BTreeMap<(usize, usize), Rc<DMatrix<f64>>>>,
    hadamard: std::cell::RefCell<BTreeMap<usize, Rc<DMatrix<f64>>>>,
    node_weights: std::cell::RefCell<BTreeMap<usize, Rc<Vec<f64>>>>,
}

impl GramFeatures {
    pub fn new(x: &Dataset) -> Rc<Self> {
        Rc::new(Self {
            x: x.data.clone(),
            kr: Default::default(),
            kr_pairs: Default::default(),
            hadamard: Default::default(),
            node_weights: Default::default(),
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// `Y_m`: n × d^m with `Y_m[i, (j_1..j_m)] = Π_k x_i(j_k)`; `Y_0` is the
    /// all-ones column.
    pub fn kr_power(&self, m: usize) -> Result<Rc<DMatrix<f64>>> {
        if let Some(y) = self.kr.borrow().get(&m) {
            return Ok(y.clone());
        }
        let n = self.n();
        let d = self.d();
        let cols = d.checked_pow(m as u32).unwrap_or(usize::MAX);
        if cols == usize::MAX || n.saturating_mul(cols) > FEATURE_ENTRY_CAP {
            return Err(Error::SizeCap(format!(
                "feature block n·d^{m} exceeds cap {FEATURE_ENTRY_CAP}"
            )));
        }
        let y = if m == 0 {
            DMatrix::from_element(n, 1, 1.0)
        } else {
            let prev = self.kr_power(m - 1)?;
            let pc = prev.ncols();
            let mut y = DMatrix::zeros(n, pc * d);
            for c in 0..pc {
                for j in 0..d {
                    let col = c * d + j;
                    for i in 0..n {
                        y[(i, col)] = prev[(i, c)] * self.x[(i, j)];
                    }
                }
            }
            y
        };
        let y = Rc::new(y);
        self.kr.borrow_mut().insert(m, y.clone());
        Ok(y)
    }

    /// `A^{∘m}` (entrywise power of the Gram matrix), materialized n×n.
    pub fn hadamard_gram(&self, m: usize) -> Result<Rc<DMatrix<f64>>> {
        if let Some(a) = self.hadamard.borrow().get(&m) {
            return Ok(a.clone());
        }
        let n = self.n();
        if n * n > FEATURE_ENTRY_CAP {
            return Err(Error::SizeCap(format!(
                "gram matrix n²={} exceeds cap {FEATURE_ENTRY_CAP}",
                n * n
            )));
        }
        let a = if m == 1 {
            &self.x * self.x.transpose()
        } else {
            let base = self.hadamard_gram(1)?;
            let mut a = (*base).clone();
            for v in a.iter_mut() {
                *v = v.powi(m as i32);
            }
            a
        };
        let a = Rc::new(a);
        self.hadamard.borrow_mut().insert(m, a.clone());
        Ok(a)
    }

    /// Node weights `||x_i||^{2s}`.
    pub fn node_weight(&self, s: usize) -> Rc<Vec<f64>> {
        if let Some(w) = self.node_weights.borrow().get(&s) {
            return w.clone();
        }
        let n = self.n();
        let w: Vec<f64> = (0..n)
            .map(|i| self.x.row(i).norm_squared().powi(s as i32))
            .collect();
        let w = Rc::new(w);
        self.node_weights.borrow_mut().insert(s, w.clone());
        w
    }

    /// Cached column-wise Khatri–Rao product of two feature powers.
    pub fn kr_pair(&self, ma: usize, mb: usize) -> Result<Rc<DMatrix<f64>>> {
        if let Some(y) = self.kr_pairs.borrow().get(&(ma, mb)) {
            return Ok(y.clone());
        }
        let a = self.kr_power(ma)?;
        let b = self.kr_power(mb)?;
        if self.n().saturating_mul(a.ncols() * b.ncols()) > FEATURE_ENTRY_CAP {
            return Err(Error::SizeCap("khatri-rao pair exceeds cap".into()));
        }
        let y = Rc::new(kr_columns(&a, &b));
        self.kr_pairs.borrow_mut().insert((ma, mb), y.clone());
        Ok(y)
    }

    /// Inner product of rows `i` and `j`.
    pub fn gram_entry(&self, i: usize, j: usize) -> f64 {
        self.x.row(i).dot(&self.x.row(j))
    }
}

// ---------------------------------------------------------------------
// Free-sum matrix-free operator for term combinations
// ---------------------------------------------------------------------

/// One term's contraction data relative to the row/column role slots.
struct TermPlan {
    coef: f64,
    /// Cross multiplicities `m[row_slot][col_slot]`.
    cross: [[usize; 2]; 2],
    row_row: usize,
    col_col: usize,
    row_loops: [usize; 2],
    col_loops: [usize; 2],
}

/// Matrix-free operator for `Σ_k c_k M_{G_k}` **without** validity zeros:
/// the entry at (α, β) is `Σ_k c_k Π_{edges} ⟨…⟩` over all labelings, with
/// tuple layout `t_1 + n·t_2`. Supports one or two slots per side.
pub struct FreeComboOp {
    feats: Rc<GramFeatures>,
    n_left: usize,
    n_right: usize,
    plans: Vec<TermPlan>,
    t_plans: Vec<TermPlan>,
    symmetric: bool,
}

impl FreeComboOp {
    /// Builds the operator for terms over a shared vertex set split into
    /// `left` and `right` role slots (vertex ids index the term graphs).
    pub fn new(
        terms: &[ComboTerm],
        left: &[Vertex],
        right: &[Vertex],
        feats: Rc<GramFeatures>,
    ) -> Result<Self> {
        if left.is_empty() || right.is_empty() || left.len() > 2 || right.len() > 2 {
            return Err(Error::InvalidArgument(format!(
                "free operator needs 1..=2 slots per side, got {} | {}",
                left.len(),
                right.len()
            )));
        }
        let plans = Self::build_plans(terms, left, right)?;
        let t_plans = Self::build_plans(terms, right, left)?;
        let symmetric = terms_symmetric(terms, left, right);
        Ok(Self {
            feats,
            n_left: left.len(),
            n_right: right.len(),
            plans,
            t_plans,
            symmetric,
        })
    }

    fn build_plans(terms: &[ComboTerm], rows: &[Vertex], cols: &[Vertex]) -> Result<Vec<TermPlan>> {
        let mut out = Vec::with_capacity(terms.len());
        for (coef, g) in terms {
            let mut slot_of = BTreeMap::new();
            for (i, &v) in rows.iter().enumerate() {
                slot_of.insert(v, (true, i));
            }
            for (i, &v) in cols.iter().enumerate() {
                slot_of.insert(v, (false, i));
            }
            let mut plan = TermPlan {
                coef: *coef,
                cross: [[0; 2]; 2],
                row_row: 0,
                col_col: 0,
                row_loops: [0; 2],
                col_loops: [0; 2],
            };
            for (u, v, m) in g.edges() {
                let su = slot_of.get(&u).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!("vertex {u} not assigned to a side"))
                })?;
                let sv = slot_of.get(&v).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!("vertex {v} not assigned to a side"))
                })?;
                if u == v {
                    match su {
                        (true, i) => plan.row_loops[i] += m,
                        (false, i) => plan.col_loops[i] += m,
                    }
                    continue;
                }
                match (su, sv) {
                    ((true, _), (true, _)) => plan.row_row += m,
                    ((false, _), (false, _)) => plan.col_col += m,
                    ((true, i), (false, j)) | ((false, j), (true, i)) => plan.cross[i][j] += m,
                }
            }
            out.push(plan);
        }
        Ok(out)
    }

    fn len_side(&self, slots: usize) -> usize {
        self.feats.n().pow(slots as u32)
    }

    fn apply_plans(
        &self,
        plans: &[TermPlan],
        n_rows: usize,
        n_cols: usize,
        v: &[f64],
        out: &mut [f64],
    ) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let n = self.feats.n();
        let base_vm = if n_cols == 2 {
            Some(DMatrix::from_column_slice(n, n, v))
        } else {
            None
        };
        // Per-call memos: scaled column matrices keyed by the column
        // transform, and column-side feature contractions keyed by the
        // transform plus feature orders (shared across terms).
        let mut scaled: BTreeMap<(usize, usize, usize), Rc<DMatrix<f64>>> = BTreeMap::new();
        let mut contracted: BTreeMap<(usize, usize, usize, usize, usize), Rc<DMatrix<f64>>> =
            BTreeMap::new();
        for plan in plans {
            match (n_rows, n_cols) {
                (2, 2) => self.apply_22(plan, base_vm.as_ref().unwrap(), &mut scaled, &mut contracted, out),
                (2, 1) => self.apply_21(plan, v, out),
                (1, 2) => self.apply_12(plan, base_vm.as_ref().unwrap(), &mut scaled, &mut contracted, out),
                (1, 1) => self.apply_11(plan, v, out),
                _ => unreachable!(),
            }
        }
    }

    fn col_sig(plan: &TermPlan) -> (usize, usize, usize) {
        (plan.col_loops[0], plan.col_loops[1], plan.col_col)
    }

    fn scaled_for<'m>(
        &self,
        plan: &TermPlan,
        base: &DMatrix<f64>,
        scaled: &'m mut BTreeMap<(usize, usize, usize), Rc<DMatrix<f64>>>,
    ) -> Rc<DMatrix<f64>> {
        let sig = Self::col_sig(plan);
        if let Some(m) = scaled.get(&sig) {
            return m.clone();
        }
        let m = if Self::needs_col_transform(plan) {
            Rc::new(self.scaled_cols_matrix(plan, base))
        } else {
            Rc::new(base.clone())
        };
        scaled.insert(sig, m.clone());
        m
    }

    fn needs_col_transform(plan: &TermPlan) -> bool {
        plan.col_loops[0] > 0 || plan.col_loops[1] > 0 || plan.col_col > 0
    }

    /// v as an n×n matrix with column node weights and the col-col edge
    /// folded in.
    fn scaled_cols_matrix(&self, plan: &TermPlan, base: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.feats.n();
        let mut vm = base.clone();
        if plan.col_loops[0] > 0 {
            let w = self.feats.node_weight(plan.col_loops[0]);
            for j in 0..n {
                for i in 0..n {
                    vm[(i, j)] *= w[i];
                }
            }
        }
        if plan.col_loops[1] > 0 {
            let w = self.feats.node_weight(plan.col_loops[1]);
            for j in 0..n {
                let wj = w[j];
                for i in 0..n {
                    vm[(i, j)] *= wj;
                }
            }
        }
        if plan.col_col > 0 {
            let a = self.feats.hadamard_gram(plan.col_col).expect("gram cap");
            vm.component_mul_assign(&a);
        }
        vm
    }

    fn apply_row_side(&self, plan: &TermPlan, out_m: &mut DMatrix<f64>) {
        let n = self.feats.n();
        if plan.row_row > 0 {
            let a = self.feats.hadamard_gram(plan.row_row).expect("gram cap");
            out_m.component_mul_assign(&a);
        }
        if plan.row_loops[0] > 0 {
            let w = self.feats.node_weight(plan.row_loops[0]);
            for j in 0..n {
                for i in 0..n {
                    out_m[(i, j)] *= w[i];
                }
            }
        }
        if plan.row_loops[1] > 0 {
            let w = self.feats.node_weight(plan.row_loops[1]);
            for j in 0..n {
                let wj = w[j];
                for i in 0..n {
                    out_m[(i, j)] *= wj;
                }
            }
        }
    }

    fn apply_22(
        &self,
        plan: &TermPlan,
        base: &DMatrix<f64>,
        scaled: &mut BTreeMap<(usize, usize, usize), Rc<DMatrix<f64>>>,
        contracted: &mut BTreeMap<(usize, usize, usize, usize, usize), Rc<DMatrix<f64>>>,
        out: &mut [f64],
    ) {
        let n = self.feats.n();
        let ya = self.feats.kr_power(plan.cross[0][0]).expect("feature cap");
        let yb = self.feats.kr_power(plan.cross[0][1]).expect("feature cap");
        let yc = self.feats.kr_power(plan.cross[1][0]).expect("feature cap");
        let yd = self.feats.kr_power(plan.cross[1][1]).expect("feature cap");
        let (ra, rb, rc, rd) = (ya.ncols(), yb.ncols(), yc.ncols(), yd.ncols());
        // W[(fa,fc),(fb,fd)] = (Ya⊙Yc)ᵀ ṽ (Yb⊙Yd); ṽ·(Yb⊙Yd) is shared
        // across terms with the same column structure.
        let yac = self
            .feats
            .kr_pair(plan.cross[0][0], plan.cross[1][0])
            .expect("feature cap");
        let sig = Self::col_sig(plan);
        let ckey = (sig.0, sig.1, sig.2, plan.cross[0][1], plan.cross[1][1]);
        let t1 = match contracted.get(&ckey) {
            Some(t) => t.clone(),
            None => {
                let vm = self.scaled_for(plan, base, scaled);
                let ybd = self
                    .feats
                    .kr_pair(plan.cross[0][1], plan.cross[1][1])
                    .expect("feature cap");
                let t = Rc::new(&*vm * &*ybd);
                contracted.insert(ckey, t.clone());
                t
            }
        };
        let w = yac.transpose() * &*t1; // ra·rc × rb·rd
        // Reshape to W̃[(fa,fb),(fc,fd)].
        let mut wt = DMatrix::zeros(ra * rb, rc * rd);
        for fa in 0..ra {
            for fc in 0..rc {
                for fb in 0..rb {
                    for fd in 0..rd {
                        wt[(fa * rb + fb, fc * rd + fd)] = w[(fa * rc + fc, fb * rd + fd)];
                    }
                }
            }
        }
        let yab = self
            .feats
            .kr_pair(plan.cross[0][0], plan.cross[0][1])
            .expect("feature cap");
        let ycd = self
            .feats
            .kr_pair(plan.cross[1][0], plan.cross[1][1])
            .expect("feature cap");
        let mut out_m = &*yab * wt * ycd.transpose(); // [ρ1, ρ2]
        self.apply_row_side(plan, &mut out_m);
        for j in 0..n {
            for i in 0..n {
                out[i + n * j] += plan.coef * out_m[(i, j)];
            }
        }
    }

    fn apply_21(&self, plan: &TermPlan, v: &[f64], out: &mut [f64]) {
        let n = self.feats.n();
        let mut vt = nalgebra::DVector::from_column_slice(v);
        if plan.col_loops[0] > 0 {
            let w = self.feats.node_weight(plan.col_loops[0]);
            for i in 0..n {
                vt[i] *= w[i];
            }
        }
        let y1 = self.feats.kr_power(plan.cross[0][0]).expect("feature cap");
        let y2 = self.feats.kr_power(plan.cross[1][0]).expect("feature cap");
        let (r1, r2) = (y1.ncols(), y2.ncols());
        let y12 = self
            .feats
            .kr_pair(plan.cross[0][0], plan.cross[1][0])
            .expect("feature cap");
        let z = y12.transpose() * &vt; // r1·r2
        let zm = DMatrix::from_fn(r1, r2, |f1, f2| z[f1 * r2 + f2]);
        let mut out_m = &*y1 * zm * y2.transpose();
        self.apply_row_side(plan, &mut out_m);
        for j in 0..n {
            for i in 0..n {
                out[i + n * j] += plan.coef * out_m[(i, j)];
            }
        }
    }

    fn apply_12(
        &self,
        plan: &TermPlan,
        base: &DMatrix<f64>,
        scaled: &mut BTreeMap<(usize, usize, usize), Rc<DMatrix<f64>>>,
        contracted: &mut BTreeMap<(usize, usize, usize, usize, usize), Rc<DMatrix<f64>>>,
        out: &mut [f64],
    ) {
        let n = self.feats.n();
        let y1 = self.feats.kr_power(plan.cross[0][0]).expect("feature cap");
        let y2 = self.feats.kr_power(plan.cross[0][1]).expect("feature cap");
        // ṽ·Y2 shared across terms with the same column structure.
        let sig = Self::col_sig(plan);
        let ckey = (sig.0, sig.1, sig.2, plan.cross[0][1], usize::MAX);
        let t1 = match contracted.get(&ckey) {
            Some(t) => t.clone(),
            None => {
                let vm = self.scaled_for(plan, base, scaled);
                let t = Rc::new(&*vm * &*y2);
                contracted.insert(ckey, t.clone());
                t
            }
        };
        let t = y1.transpose() * &*t1; // r1 × r2
        let mut res: nalgebra::DVector<f64> = nalgebra::DVector::zeros(n);
        for f1 in 0..y1.ncols() {
            for f2 in 0..y2.ncols() {
                let c = t[(f1, f2)];
                if c != 0.0 {
                    for i in 0..n {
                        res[i] += y1[(i, f1)] * y2[(i, f2)] * c;
                    }
                }
            }
        }
        if plan.row_loops[0] > 0 {
            let w = self.feats.node_weight(plan.row_loops[0]);
            for i in 0..n {
                res[i] *= w[i];
            }
        }
        for i in 0..n {
            out[i] += plan.coef * res[i];
        }
    }

    fn apply_11(&self, plan: &TermPlan, v: &[f64], out: &mut [f64]) {
        let n = self.feats.n();
        let mut vt = nalgebra::DVector::from_column_slice(v);
        if plan.col_loops[0] > 0 {
            let w = self.feats.node_weight(plan.col_loops[0]);
            for i in 0..n {
                vt[i] *= w[i];
            }
        }
        let y = self.feats.kr_power(plan.cross[0][0]).expect("feature cap");
        let z = y.transpose() * &vt;
        let mut res = &*y * z;
        if plan.row_loops[0] > 0 {
            let w = self.feats.node_weight(plan.row_loops[0]);
            for i in 0..n {
                res[i] *= w[i];
            }
        }
        for i in 0..n {
            out[i] += plan.coef * res[i];
        }
    }
}

impl LinearOp for FreeComboOp {
    fn nrows(&self) -> usize {
        self.len_side(self.n_left)
    }
    fn ncols(&self) -> usize {
        self.len_side(self.n_right)
    }
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        self.apply_plans(&self.plans, self.n_left, self.n_right, v, out);
    }
    fn apply_t(&self, v: &[f64], out: &mut [f64]) {
        if self.symmetric {
            self.apply_plans(&self.plans, self.n_left, self.n_right, v, out);
        } else {
            self.apply_plans(&self.t_plans, self.n_right, self.n_left, v, out);
        }
    }
    fn is_self_adjoint(&self) -> bool {
        self.symmetric
    }
}

/// Is the represented matrix symmetric? True when the slot swap
/// `left[i] ↔ right[i]` is an automorphism of every term.
fn terms_symmetric(terms: &[ComboTerm], left: &[Vertex], right: &[Vertex]) -> bool {
    if left.len() != right.len() {
        return false;
    }
    let k = left.len() + right.len();
    let mut swap = vec![0usize; k];
    for i in 0..left.len() {
        swap[left[i]] = right[i];
        swap[right[i]] = left[i];
    }
    terms.iter().all(|(_, g)| {
        let mut mapped = Multigraph::new(g.n_vertices());
        for (u, v, m) in g.edges() {
            mapped.add_edge(swap[u], swap[v], m);
        }
        mapped == *g
    })
}

// ---------------------------------------------------------------------
// Coincidence-pattern machinery
// ---------------------------------------------------------------------

/// A partition of the operator's vertex slots, blocks sorted by minimum.
type SlotPartition = Vec<Vec<usize>>;

fn canonical_partition(mut p: SlotPartition) -> SlotPartition {
    for b in &mut p {
        b.sort_unstable();
    }
    p.sort_by_key(|b| b[0]);
    p
}

/// All coarsenings of `sigma` (merging whole blocks), with the partition
/// lattice Möbius weight `μ(σ, π) = Π_B (-1)^{n_B-1}(n_B-1)!` where `n_B`
/// counts σ-blocks merged into each π-block.
fn coarsenings_with_mu(sigma: &SlotPartition) -> Vec<(SlotPartition, f64)> {
    let b = sigma.len();
    crate::graphpoly::set_partitions(b)
        .into_iter()
        .map(|grouping| {
            let mut mu = 1.0f64;
            let mut blocks = Vec::with_capacity(grouping.len());
            for group in &grouping {
                let mut merged = Vec::new();
                for &gi in group {
                    merged.extend_from_slice(&sigma[gi]);
                }
                let nb = group.len();
                let mut f = 1.0;
                for i in 1..nb {
                    f *= -(i as f64);
                }
                mu *= f;
                blocks.push(merged);
            }
            (canonical_partition(blocks), mu)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PatternClass {
    /// No mixed (row+col) block: handled by a quotient operator plus
    /// diagonal gather/scatter.
    Quotient,
    /// Mixed blocks but at most two blocks total: handled by an O(n²)
    /// table sweep.
    Table,
    /// One tied (row, col) pair plus one free row and one free column:
    /// handled by entrywise folds and two feature products.
    Cross,
    /// Anything else: left to the caller as a polynomial correction.
    Expensive,
}

/// Classifies a partition of the slot indices `0..n_left+n_right` (row
/// slots first).
fn classify_pattern(partition: &SlotPartition, n_left: usize) -> PatternClass {
    let mixed = partition
        .iter()
        .any(|b| b.iter().any(|&s| s < n_left) && b.iter().any(|&s| s >= n_left));
    if !mixed {
        PatternClass::Quotient
    } else if partition.len() <= 2 {
        PatternClass::Table
    } else if partition.len() == 3
        && partition
            .iter()
            .any(|b| b.len() == 2 && b.iter().any(|&s| s < n_left) && b.iter().any(|&s| s >= n_left))
    {
        PatternClass::Cross
    } else {
        PatternClass::Expensive
    }
}

/// One cheap coincidence pattern of the implicit operator, with its Möbius
/// combination weight.
enum CheapPattern {
    Quotient {
        coef: f64,
        op: FreeComboOp,
        /// row slot -> position inside the quotient's left blocks
        row_slot_block: Vec<usize>,
        col_slot_block: Vec<usize>,
        q_left: usize,
        q_right: usize,
    },
    Table2 {
        coef: f64,
        table: DMatrix<f64>,
        /// per row slot: 0 = first varying index, 1 = second
        out_syms: Vec<usize>,
        v_syms: Vec<usize>,
    },
    Table1 {
        coef: f64,
        table: Vec<f64>,
        out_slots: usize,
        v_slots: usize,
    },
    /// One (row, col) slot pair tied, one free row slot, one free col slot.
    Cross {
        coef: f64,
        plans: Vec<CrossPlan>,
        /// Which row slot (0/1) carries the tied index.
        tied_row_slot: usize,
        /// Which col slot (0/1) carries the tied index.
        tied_col_slot: usize,
    },
}

/// Per-term contraction data for a [`CheapPattern::Cross`]: quotient blocks
/// t (tied), fr (free row), fc (free col).
struct CrossPlan {
    coef: f64,
    m_t_fc: usize,
    m_t_fr: usize,
    m_fr_fc: usize,
    s_t: usize,
    s_fr: usize,
    s_fc: usize,
}

/// The implicit operator actually used by large matrix representations:
/// the free-sum operator with every cheap coincidence pattern subtracted,
/// so that its entries agree with the valid-labeling matrix except on the
/// `residual_patterns` manifolds (reported to the caller, which accounts
/// for them as lower-order polynomials).
pub struct ImplicitComboOp {
    free: FreeComboOp,
    cheap: Vec<CheapPattern>,
    t_cheap: Vec<CheapPattern>,
    residual: Vec<SlotPartition>,
    n: usize,
}

impl ImplicitComboOp {
    pub fn new(
        terms: &[ComboTerm],
        left: &[Vertex],
        right: &[Vertex],
        feats: Rc<GramFeatures>,
    ) -> Result<Self> {
        let free = FreeComboOp::new(terms, left, right, feats.clone())?;
        let k = left.len() + right.len();
        // Accumulate Möbius weights over coarsenings of every cheap
        // non-discrete pattern; the closure of cheap patterns under
        // coarsening stays cheap.
        let mut weights: BTreeMap<SlotPartition, f64> = BTreeMap::new();
        let mut residual = Vec::new();
        for sigma in crate::graphpoly::set_partitions(k) {
            if sigma.len() == k {
                continue;
            }
            let sigma = canonical_partition(sigma);
            match classify_pattern(&sigma, left.len()) {
                PatternClass::Expensive => residual.push(sigma),
                _ => {
                    for (pi, mu) in coarsenings_with_mu(&sigma) {
                        *weights.entry(pi).or_insert(0.0) += mu;
                    }
                }
            }
        }
        let mut cheap = Vec::new();
        let mut t_cheap = Vec::new();
        for (pi, coef) in &weights {
            if coef.abs() < 1e-300 {
                continue;
            }
            cheap.push(build_cheap_pattern(
                terms, left, right, pi, *coef, &feats, false,
            )?);
            t_cheap.push(build_cheap_pattern(
                terms, left, right, pi, *coef, &feats, true,
            )?);
        }
        Ok(Self {
            free,
            cheap,
            t_cheap,
            residual,
            n: feats.n(),
        })
    }

    /// Coincidence patterns *not* folded into the operator.
    pub fn residual_patterns(&self) -> &[SlotPartition] {
        &self.residual
    }

    /// Timing breakdown per pattern kind (diagnostics).
    pub fn profile_pattern_kinds(&self, v: &[f64]) -> Vec<(String, std::time::Duration)> {
        let mut out_buf = vec![0.0; self.nrows()];
        let mut res = Vec::new();
        let t0 = std::time::Instant::now();
        self.free.apply(v, &mut out_buf);
        res.push(("free".to_string(), t0.elapsed()));
        for (i, pat) in self.cheap.iter().enumerate() {
            let name = match pat {
                CheapPattern::Quotient { .. } => format!("quotient#{i}"),
                CheapPattern::Table2 { .. } => format!("table2#{i}"),
                CheapPattern::Table1 { .. } => format!("table1#{i}"),
                CheapPattern::Cross { .. } => format!("cross#{i}"),
            };
            let t0 = std::time::Instant::now();
            self.apply_patterns(std::slice::from_ref(pat), v, &mut out_buf);
            res.push((name, t0.elapsed()));
        }
        res
    }

    fn apply_patterns(&self, patterns: &[CheapPattern], v: &[f64], out: &mut [f64]) {
        let n = self.n;
        for pat in patterns {
            match pat {
                CheapPattern::Quotient {
                    coef,
                    op,
                    row_slot_block,
                    col_slot_block,
                    q_left,
                    q_right,
                } => {
                    // gather v into the quotient column space
                    let qcols = n.pow(*q_right as u32);
                    let mut qv = vec![0.0; qcols];
                    // stride of quotient digit b inside the original index
                    let stride = |slot_block: &[usize], b: usize| -> usize {
                        let mut total = 0;
                        for (s, &bb) in slot_block.iter().enumerate() {
                            if bb == b {
                                total += n.pow(s as u32);
                            }
                        }
                        total
                    };
                    if *q_right == 1 {
                        let st = stride(col_slot_block, 0);
                        for (i, qvi) in qv.iter_mut().enumerate() {
                            *qvi = v[i * st];
                        }
                    } else {
                        let s0 = stride(col_slot_block, 0);
                        let s1 = stride(col_slot_block, 1);
                        for d1 in 0..n {
                            let base = d1 * s1;
                            let dst = &mut qv[d1 * n..(d1 + 1) * n];
                            for (d0, q) in dst.iter_mut().enumerate() {
                                *q = v[base + d0 * s0];
                            }
                        }
                    }
                    let qrows = n.pow(*q_left as u32);
                    let mut qout = vec![0.0; qrows];
                    op.apply(&qv, &mut qout);
                    if *q_left == 1 {
                        let st = stride(row_slot_block, 0);
                        for (i, qo) in qout.iter().enumerate() {
                            out[i * st] -= coef * qo;
                        }
                    } else {
                        let s0 = stride(row_slot_block, 0);
                        let s1 = stride(row_slot_block, 1);
                        for d1 in 0..n {
                            let base = d1 * s1;
                            let src = &qout[d1 * n..(d1 + 1) * n];
                            for (d0, qo) in src.iter().enumerate() {
                                out[base + d0 * s0] -= coef * qo;
                            }
                        }
                    }
                }
                CheapPattern::Table2 {
                    coef,
                    table,
                    out_syms,
                    v_syms,
                } => {
                    for j in 0..n {
                        for i in 0..n {
                            let t = table[(i, j)];
                            if t == 0.0 {
                                continue;
                            }
                            let pick = |sym: usize| if sym == 0 { i } else { j };
                            let mut o = 0usize;
                            for (s, &sym) in out_syms.iter().enumerate() {
                                o += pick(sym) * n.pow(s as u32);
                            }
                            let mut w = 0usize;
                            for (s, &sym) in v_syms.iter().enumerate() {
                                w += pick(sym) * n.pow(s as u32);
                            }
                            out[o] -= coef * t * v[w];
                        }
                    }
                }
                CheapPattern::Cross {
                    coef,
                    plans,
                    tied_row_slot,
                    tied_col_slot,
                } => {
                    let feats = &self.free.feats;
                    // v as a matrix with axes (col slot 0, col slot 1);
                    // orient so rows follow the tied index.
                    let oriented = if *tied_col_slot == 0 {
                        DMatrix::from_column_slice(n, n, v)
                    } else {
                        DMatrix::from_column_slice(n, n, v).transpose()
                    };
                    // Group plans sharing the v-side transform, then the
                    // feature contraction; apply plan-specific factors as a
                    // fused scatter.
                    let mut groups: BTreeMap<(usize, usize), Vec<&CrossPlan>> = BTreeMap::new();
                    for plan in plans {
                        groups
                            .entry((plan.s_fc, plan.m_t_fc))
                            .or_default()
                            .push(plan);
                    }
                    for ((s_fc, m_t_fc), group) in groups {
                        let mut w = oriented.clone();
                        if s_fc > 0 {
                            let nw = feats.node_weight(s_fc);
                            for j in 0..n {
                                let sc = nw[j];
                                for i in 0..n {
                                    w[(i, j)] *= sc;
                                }
                            }
                        }
                        if m_t_fc > 0 {
                            let a = feats.hadamard_gram(m_t_fc).expect("gram cap");
                            w.component_mul_assign(&a);
                        }
                        let mut by_fr: BTreeMap<usize, Vec<&CrossPlan>> = BTreeMap::new();
                        for plan in group {
                            by_fr.entry(plan.m_fr_fc).or_default().push(plan);
                        }
                        for (m_fr_fc, plist) in by_fr {
                            let y = feats.kr_power(m_fr_fc).expect("feature cap");
                            let z = &w * &*y;
                            let o = z * y.transpose(); // O[i (tied), c (free row)]
                            let o_t = if *tied_row_slot == 1 {
                                Some(o.transpose())
                            } else {
                                None
                            };
                            for plan in plist {
                                let total_coef = coef * plan.coef;
                                let a = if plan.m_t_fr > 0 {
                                    Some(feats.hadamard_gram(plan.m_t_fr).expect("gram cap"))
                                } else {
                                    None
                                };
                                let nw_fr = if plan.s_fr > 0 {
                                    Some(feats.node_weight(plan.s_fr))
                                } else {
                                    None
                                };
                                let nw_t = if plan.s_t > 0 {
                                    Some(feats.node_weight(plan.s_t))
                                } else {
                                    None
                                };
                                // out index: tied slot 0 -> out[i + n·c] with
                                // o[(i,c)]; tied slot 1 -> out[c + n·i] with
                                // the transposed copy, so the inner loop is
                                // contiguous either way.
                                for c in 0..n {
                                    let ocol = if let Some(ot) = &o_t {
                                        ot.column(c)
                                    } else {
                                        o.column(c)
                                    };
                                    let (fr_scale, t_weights): (f64, Option<&[f64]>) =
                                        if o_t.is_some() {
                                            (
                                                nw_t.as_ref().map_or(1.0, |v| v[c]),
                                                nw_fr.as_deref().map(|v| &v[..]),
                                            )
                                        } else {
                                            (
                                                nw_fr.as_ref().map_or(1.0, |v| v[c]),
                                                nw_t.as_deref().map(|v| &v[..]),
                                            )
                                        };
                                    let acol_owned;
                                    let acol: Option<&[f64]> = match &a {
                                        Some(am) => {
                                            if o_t.is_some() {
                                                acol_owned =
                                                    am.column(c).iter().copied().collect::<Vec<f64>>();
                                                Some(&acol_owned[..])
                                            } else {
                                                acol_owned =
                                                    am.column(c).iter().copied().collect::<Vec<f64>>();
                                                Some(&acol_owned[..])
                                            }
                                        }
                                        None => None,
                                    };
                                    let dst = &mut out[c * n..(c + 1) * n];
                                    match (acol, t_weights) {
                                        (None, None) => {
                                            for (d, oi) in dst.iter_mut().zip(ocol.iter()) {
                                                *d -= total_coef * fr_scale * oi;
                                            }
                                        }
                                        (Some(ac), None) => {
                                            for ((d, oi), ai) in
                                                dst.iter_mut().zip(ocol.iter()).zip(ac)
                                            {
                                                *d -= total_coef * fr_scale * oi * ai;
                                            }
                                        }
                                        (None, Some(tw)) => {
                                            for ((d, oi), ti) in
                                                dst.iter_mut().zip(ocol.iter()).zip(tw)
                                            {
                                                *d -= total_coef * fr_scale * oi * ti;
                                            }
                                        }
                                        (Some(ac), Some(tw)) => {
                                            for (((d, oi), ai), ti) in
                                                dst.iter_mut().zip(ocol.iter()).zip(ac).zip(tw)
                                            {
                                                *d -= total_coef * fr_scale * oi * ai * ti;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                CheapPattern::Table1 {
                    coef,
                    table,
                    out_slots,
                    v_slots,
                } => {
                    for (i, t) in table.iter().enumerate() {
                        let mut o = 0usize;
                        for s in 0..*out_slots {
                            o += i * n.pow(s as u32);
                        }
                        let mut w = 0usize;
                        for s in 0..*v_slots {
                            w += i * n.pow(s as u32);
                        }
                        out[o] -= coef * t * v[w];
                    }
                }
            }
        }
    }
}

impl LinearOp for ImplicitComboOp {
    fn nrows(&self) -> usize {
        self.free.nrows()
    }
    fn ncols(&self) -> usize {
        self.free.ncols()
    }
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        self.free.apply(v, out);
        self.apply_patterns(&self.cheap, v, out);
    }
    fn apply_t(&self, v: &[f64], out: &mut [f64]) {
        if self.free.symmetric {
            self.apply(v, out);
        } else {
            self.free.apply_t(v, out);
            self.apply_patterns(&self.t_cheap, v, out);
        }
    }
    fn is_self_adjoint(&self) -> bool {
        self.free.symmetric
    }
}

/// Builds one cheap pattern (or its transpose when `transposed`). The
/// partition is over slot indices: row slots `0..|L|` (slot `s` carries
/// vertex `left[s]`), then column slots (vertex `right[s-|L|]`).
fn build_cheap_pattern(
    terms: &[ComboTerm],
    left: &[Vertex],
    right: &[Vertex],
    partition: &SlotPartition,
    coef: f64,
    feats: &Rc<GramFeatures>,
    transposed: bool,
) -> Result<CheapPattern> {
    let nl = left.len();
    let k = nl + right.len();
    let slot_vertex: Vec<Vertex> = left.iter().chain(right.iter()).copied().collect();
    let mut block_of_slot = vec![0usize; k];
    for (b, block) in partition.iter().enumerate() {
        for &s in block {
            block_of_slot[s] = b;
        }
    }
    // Quotient the terms (vertex -> block of its slot).
    let mut block_of_vertex = vec![0usize; k];
    for (s, &v) in slot_vertex.iter().enumerate() {
        block_of_vertex[v] = block_of_slot[s];
    }
    let mut acc: BTreeMap<Multigraph, f64> = BTreeMap::new();
    for (c, g) in terms {
        let mut g2 = Multigraph::new(partition.len());
        for (u, v, m) in g.edges() {
            g2.add_edge(block_of_vertex[u], block_of_vertex[v], m);
        }
        *acc.entry(g2).or_insert(0.0) += c;
    }
    let q_terms: Vec<ComboTerm> = acc.into_iter().map(|(g, c)| (c, g)).collect();

    // Row/col slot lists for the (possibly transposed) product.
    let row_slots: Vec<usize> = if transposed {
        (nl..k).collect()
    } else {
        (0..nl).collect()
    };
    let col_slots: Vec<usize> = if transposed {
        (0..nl).collect()
    } else {
        (nl..k).collect()
    };
    match classify_pattern(partition, nl) {
        PatternClass::Expensive => Err(Error::InvalidArgument(
            "expensive pattern cannot be folded into the operator".into(),
        )),
        PatternClass::Cross => {
            // Identify tied / free-row / free-col blocks relative to the
            // (possibly transposed) roles.
            let mut tied_block = usize::MAX;
            let mut fr_block = usize::MAX;
            let mut fc_block = usize::MAX;
            for (b, block) in partition.iter().enumerate() {
                let has_row = block.iter().any(|s| row_slots.contains(s));
                let has_col = block.iter().any(|s| col_slots.contains(s));
                match (has_row, has_col) {
                    (true, true) => tied_block = b,
                    (true, false) => fr_block = b,
                    (false, true) => fc_block = b,
                    (false, false) => unreachable!(),
                }
            }
            let plans: Vec<CrossPlan> = q_terms
                .iter()
                .map(|(c, g)| {
                    let mut plan = CrossPlan {
                        coef: *c,
                        m_t_fc: 0,
                        m_t_fr: 0,
                        m_fr_fc: 0,
                        s_t: 0,
                        s_fr: 0,
                        s_fc: 0,
                    };
                    for (u, v, m) in g.edges() {
                        if u == v {
                            if u == tied_block {
                                plan.s_t += m;
                            } else if u == fr_block {
                                plan.s_fr += m;
                            } else {
                                plan.s_fc += m;
                            }
                        } else {
                            let pair = (u.min(v), u.max(v));
                            let tb = (tied_block.min(fc_block), tied_block.max(fc_block));
                            let tr = (tied_block.min(fr_block), tied_block.max(fr_block));
                            if pair == tb {
                                plan.m_t_fc += m;
                            } else if pair == tr {
                                plan.m_t_fr += m;
                            } else {
                                plan.m_fr_fc += m;
                            }
                        }
                    }
                    plan
                })
                .collect();
            // Slot positions of the tied pair within the role order.
            let tied_row_slot = row_slots
                .iter()
                .position(|s| partition[tied_block].contains(s))
                .unwrap();
            let tied_col_slot = col_slots
                .iter()
                .position(|s| partition[tied_block].contains(s))
                .unwrap();
            Ok(CheapPattern::Cross {
                coef,
                plans,
                tied_row_slot,
                tied_col_slot,
            })
        }
        PatternClass::Quotient => {
            // Blocks carrying row slots vs column slots (disjoint here).
            let mut row_blocks: Vec<usize> = Vec::new();
            let mut col_blocks: Vec<usize> = Vec::new();
            for (b, block) in partition.iter().enumerate() {
                if block.iter().any(|s| row_slots.contains(s)) {
                    row_blocks.push(b);
                } else {
                    col_blocks.push(b);
                }
            }
            // The quotient operator works on block ids as vertices.
            let op = FreeComboOp::new(&q_terms, &row_blocks, &col_blocks, feats.clone())?;
            let row_slot_block: Vec<usize> = row_slots
                .iter()
                .map(|&s| {
                    row_blocks
                        .iter()
                        .position(|&b| b == block_of_slot[s])
                        .unwrap()
                })
                .collect();
            let col_slot_block: Vec<usize> = col_slots
                .iter()
                .map(|&s| {
                    col_blocks
                        .iter()
                        .position(|&b| b == block_of_slot[s])
                        .unwrap()
                })
                .collect();
            Ok(CheapPattern::Quotient {
                coef,
                op,
                row_slot_block,
                col_slot_block,
                q_left: row_blocks.len(),
                q_right: col_blocks.len(),
            })
        }
        PatternClass::Table => {
            let n = feats.n();
            if partition.len() == 1 {
                let gram = feats.hadamard_gram(1)?;
                let mut table = vec![0.0; n];
                for (i, ti) in table.iter_mut().enumerate() {
                    let mut total = 0.0;
                    for (c, g) in &q_terms {
                        let mut prod = *c;
                        for (_, _, m) in g.edges() {
                            let ip = gram[(i, i)];
                            for _ in 0..m {
                                prod *= ip;
                            }
                        }
                        total += prod;
                    }
                    *ti = total;
                }
                Ok(CheapPattern::Table1 {
                    coef,
                    table,
                    out_slots: row_slots.len(),
                    v_slots: col_slots.len(),
                })
            } else {
                let gram = feats.hadamard_gram(1)?;
                let mut table = DMatrix::zeros(n, n);
                for j in 0..n {
                    for i in 0..n {
                        let labels = [i, j];
                        let mut total = 0.0;
                        for (c, g) in &q_terms {
                            let mut prod = *c;
                            for (u, v, m) in g.edges() {
                                let ip = gram[(labels[u], labels[v])];
                                for _ in 0..m {
                                    prod *= ip;
                                }
                            }
                            total += prod;
                        }
                        table[(i, j)] = total;
                    }
                }
                let out_syms: Vec<usize> =
                    row_slots.iter().map(|&s| block_of_slot[s]).collect();
                let v_syms: Vec<usize> = col_slots.iter().map(|&s| block_of_slot[s]).collect();
                Ok(CheapPattern::Table2 {
                    coef,
                    table,
                    out_syms,
                    v_syms,
                })
            }
        }
    }
}

/// Column-wise Khatri–Rao product: `out[:, fa·rb + fb] = a[:, fa] ∘ b[:, fb]`.
fn kr_columns(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let (ra, rb) = (a.ncols(), b.ncols());
    let mut out = DMatrix::zeros(n, ra * rb);
    for fa in 0..ra {
        for fb in 0..rb {
            let col = fa * rb + fb;
            for i in 0..n {
                out[(i, col)] = a[(i, fa)] * b[(i, fb)];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------
// Matrix representations of graph polynomials
// ---------------------------------------------------------------------

/// Entry transform selector for [`build_matrix_representation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixEsMode {
    /// Plain edge products.
    Raw,
    /// The `=V` Efron–Stein transform applied entrywise.
    EqualV,
}

/// A matrix representation handle: either densely materialized (with
/// valid-labeling zeros) or an implicit free-sum operator.
pub enum MatrixRep {
    Dense {
        matrix: DMatrix<f64>,
        n: usize,
        left: Vec<Vertex>,
        right: Vec<Vertex>,
    },
    /// Pattern-subtracted free operator; entries agree with the valid
    /// matrix except on the residual coincidence patterns. Entry queries
    /// still apply validity.
    Implicit {
        op: ImplicitComboOp,
        terms: Vec<ComboTerm>,
        left: Vec<Vertex>,
        right: Vec<Vertex>,
        feats: Rc<GramFeatures>,
    },
}

impl MatrixRep {
    pub fn nrows(&self) -> usize {
        match self {
            MatrixRep::Dense { matrix, .. } => matrix.nrows(),
            MatrixRep::Implicit { op, .. } => op.nrows(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            MatrixRep::Dense { matrix, .. } => matrix.ncols(),
            MatrixRep::Implicit { op, .. } => op.ncols(),
        }
    }

    /// Operator norm: exact for dense; power iteration for implicit (of the
    /// free-sum operator).
    pub fn op_norm(&self) -> f64 {
        match self {
            MatrixRep::Dense { matrix, .. } => dense_op_norm(matrix),
            MatrixRep::Implicit { op, .. } => op_norm(op, PowerIterSettings::default()),
        }
    }

    /// Matrix-vector product (free-sum semantics for the implicit path).
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        match self {
            MatrixRep::Dense { matrix, .. } => {
                let mut out = vec![0.0; matrix.nrows()];
                LinearOp::apply(matrix, v, &mut out);
                out
            }
            MatrixRep::Implicit { op, .. } => {
                let mut out = vec![0.0; op.nrows()];
                op.apply(v, &mut out);
                out
            }
        }
    }

    /// Entry at a labeling; coincident labels return 0.
    pub fn entry(&self, alpha: &[usize], beta: &[usize]) -> f64 {
        match self {
            MatrixRep::Dense { matrix, n, .. } => {
                let r = tuple_index(alpha, *n);
                let c = tuple_index(beta, *n);
                matrix[(r, c)]
            }
            MatrixRep::Implicit {
                terms,
                left,
                right,
                feats,
                ..
            } => {
                let mut labels = vec![0usize; left.len() + right.len()];
                let mut all = Vec::new();
                for (i, &v) in left.iter().enumerate() {
                    labels[v] = alpha[i];
                    all.push(alpha[i]);
                }
                for (i, &v) in right.iter().enumerate() {
                    labels[v] = beta[i];
                    all.push(beta[i]);
                }
                let mut sorted = all.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != all.len() {
                    return 0.0;
                }
                eval_terms_at_labels(terms, &labels, feats)
            }
        }
    }

    /// The representation as a matrix-free operator.
    pub fn as_linear_op(&self) -> &dyn LinearOp {
        match self {
            MatrixRep::Dense { matrix, .. } => matrix,
            MatrixRep::Implicit { op, .. } => op,
        }
    }

    /// Coincidence patterns the implicit path leaves to the caller
    /// (empty for dense representations, whose entries are exact).
    pub fn residual_patterns(&self) -> &[Vec<Vec<usize>>] {
        match self {
            MatrixRep::Dense { .. } => &[],
            MatrixRep::Implicit { op, .. } => op.residual_patterns(),
        }
    }

    pub fn sides(&self) -> (&[Vertex], &[Vertex]) {
        match self {
            MatrixRep::Dense { left, right, .. } => (left, right),
            MatrixRep::Implicit { left, right, .. } => (left, right),
        }
    }
}

fn tuple_index(t: &[usize], n: usize) -> usize {
    let mut idx = 0;
    for (k, &v) in t.iter().enumerate() {
        idx += v * n.pow(k as u32);
    }
    idx
}

/// Evaluates `Σ_k c_k Π edges` at explicit row labels.
pub fn eval_terms_at_labels_pub(terms: &[ComboTerm], labels: &[usize], feats: &GramFeatures) -> f64 {
    eval_terms_at_labels(terms, labels, feats)
}

pub(crate) fn eval_terms_at_labels(
    terms: &[ComboTerm],
    labels: &[usize],
    feats: &GramFeatures,
) -> f64 {
    let mut total = 0.0;
    for (c, g) in terms {
        let mut prod = *c;
        for (u, v, m) in g.edges() {
            let ip = feats.gram_entry(labels[u], labels[v]);
            for _ in 0..m {
                prod *= ip;
            }
        }
        total += prod;
    }
    total
}

/// Builds a matrix representation of `P_G` (or of its `=V` transform) for
/// the bipartition `left ∪ right = V(G)`. Dense up to [`DENSE_ENTRY_CAP`]
/// entries; implicit (free-sum) beyond that, for at most two slots per side.
pub fn build_matrix_representation(
    graph: &Multigraph,
    left: &[Vertex],
    right: &[Vertex],
    x: &Dataset,
    mode: MatrixEsMode,
) -> Result<MatrixRep> {
    if left.is_empty() || right.is_empty() {
        return Err(Error::InvalidArgument(
            "both sides of the bipartition must be non-empty".into(),
        ));
    }
    let nv = graph.n_vertices();
    let mut seen = vec![false; nv];
    for &v in left.iter().chain(right) {
        if v >= nv || seen[v] {
            return Err(Error::InvalidArgument(
                "L/R is not a bipartition of V".into(),
            ));
        }
        seen[v] = true;
    }
    if !seen.iter().all(|&s| s) {
        return Err(Error::InvalidArgument("L/R must cover V".into()));
    }
    let terms: Vec<ComboTerm> = match mode {
        MatrixEsMode::Raw => vec![(1.0, graph.clone())],
        MatrixEsMode::EqualV => {
            let full: BTreeSet<Vertex> = (0..nv).collect();
            equal_es_expansion(graph, &full, x.d() as f64)
        }
    };
    build_combo_representation(&terms, left, right, x)
}

/// Matrix representation for a term combination.
pub(crate) fn build_combo_representation(
    terms: &[ComboTerm],
    left: &[Vertex],
    right: &[Vertex],
    x: &Dataset,
) -> Result<MatrixRep> {
    let n = x.n();
    let rows = n.checked_pow(left.len() as u32).unwrap_or(usize::MAX);
    let cols = n.checked_pow(right.len() as u32).unwrap_or(usize::MAX);
    let entries = rows.saturating_mul(cols);
    let dense_ok = entries <= DENSE_ENTRY_CAP
        && (left.len() + right.len() > 2 || n <= DENSE_V2_MAX_N);
    if dense_ok {
        let matrix = dense_combo_matrix(terms, left, right, x)?;
        return Ok(MatrixRep::Dense {
            matrix,
            n,
            left: left.to_vec(),
            right: right.to_vec(),
        });
    }
    if left.len() > 2 || right.len() > 2 {
        return Err(Error::SizeCap(format!(
            "matrix side n^{} too large to materialize and too wide for the implicit path",
            left.len().max(right.len())
        )));
    }
    let feats = GramFeatures::new(x);
    let op = ImplicitComboOp::new(terms, left, right, feats.clone())?;
    Ok(MatrixRep::Implicit {
        op,
        terms: terms.to_vec(),
        left: left.to_vec(),
        right: right.to_vec(),
        feats,
    })
}

fn dense_combo_matrix(
    terms: &[ComboTerm],
    left: &[Vertex],
    right: &[Vertex],
    x: &Dataset,
) -> Result<DMatrix<f64>> {
    let n = x.n();
    let nl = left.len();
    let nr = right.len();
    let rows = n.pow(nl as u32);
    let cols = n.pow(nr as u32);
    let feats = GramFeatures::new(x);
    let gram = feats.hadamard_gram(1)?;
    let mut m = DMatrix::zeros(rows, cols);
    let mut alpha = vec![0usize; nl];
    let mut beta = vec![0usize; nr];
    let mut labels = vec![0usize; nl + nr];
    // flattened term list avoids per-entry map iteration
    let flat: Vec<(f64, Vec<(usize, usize, usize)>)> = terms
        .iter()
        .map(|(c, g)| (*c, g.edges().collect()))
        .collect();
    for rix in 0..rows {
        let mut t = rix;
        for k in 0..nl {
            alpha[k] = t % n;
            t /= n;
        }
        if has_dup(&alpha) {
            continue;
        }
        'cols: for cix in 0..cols {
            let mut t = cix;
            for k in 0..nr {
                beta[k] = t % n;
                t /= n;
            }
            for i in 0..nr {
                for j in i + 1..nr {
                    if beta[i] == beta[j] {
                        continue 'cols;
                    }
                }
                if alpha.contains(&beta[i]) {
                    continue 'cols;
                }
            }
            for (k, &v) in left.iter().enumerate() {
                labels[v] = alpha[k];
            }
            for (k, &v) in right.iter().enumerate() {
                labels[v] = beta[k];
            }
            let mut val = 0.0;
            for (c, edges) in &flat {
                let mut prod = *c;
                for &(u, v, mult) in edges {
                    let ip = gram[(labels[u], labels[v])];
                    for _ in 0..mult {
                        prod *= ip;
                    }
                }
                val += prod;
            }
            m[(rix, cix)] = val;
        }
    }
    Ok(m)
}

fn has_dup(t: &[usize]) -> bool {
    for i in 0..t.len() {
        for j in i + 1..t.len() {
            if t[i] == t[j] {
                return true;
            }
        }
    }
    false
}

// ---------------------------------------------------------------------
// Graph matrices in the Hermite basis
// ---------------------------------------------------------------------

/// Side of a circle vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CircleSide {
    Left,
    Right,
}

/// A bipartite circle/diamond shape describing a graph matrix: entries sum,
/// over injective diamond labelings into `[d]`, products of Hermite
/// polynomials `h_{ℓ(e)}` of single data coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteShape {
    pub n_circles: usize,
    pub n_diamonds: usize,
    pub circle_sides: Vec<CircleSide>,
    /// (circle, diamond) -> Hermite order ℓ(e) ≥ 1.
    pub edges: BTreeMap<(usize, usize), usize>,
}

impl BipartiteShape {
    pub fn left_circles(&self) -> Vec<usize> {
        (0..self.n_circles)
            .filter(|&c| self.circle_sides[c] == CircleSide::Left)
            .collect()
    }

    pub fn right_circles(&self) -> Vec<usize> {
        (0..self.n_circles)
            .filter(|&c| self.circle_sides[c] == CircleSide::Right)
            .collect()
    }

    /// Total Hermite order over the edges.
    pub fn total_order(&self) -> usize {
        self.edges.values().sum()
    }

    /// Total vertex weight: circles weigh 1, diamonds `diamond_weight`.
    pub fn vertex_weight(&self, diamond_weight: f64) -> f64 {
        self.n_circles as f64 + self.n_diamonds as f64 * diamond_weight
    }

    pub fn isolated_diamonds(&self) -> usize {
        (0..self.n_diamonds)
            .filter(|&t| !self.edges.keys().any(|&(_, dd)| dd == t))
            .count()
    }

    pub fn isolated_circles(&self) -> usize {
        (0..self.n_circles)
            .filter(|&c| !self.edges.keys().any(|&(cc, _)| cc == c))
            .count()
    }

    /// Structure key for deduplication.
    pub fn dedup_key(&self) -> Vec<u64> {
        let mut key = vec![
            self.n_circles as u64,
            self.n_diamonds as u64,
            self.left_circles().len() as u64,
        ];
        let mut edges: Vec<u64> = self
            .edges
            .iter()
            .map(|(&(c, d), &l)| {
                let side = match self.circle_sides[c] {
                    CircleSide::Left => 0u64,
                    CircleSide::Right => 1,
                };
                side << 48 | (c as u64) << 32 | (d as u64) << 16 | l as u64
            })
            .collect();
        edges.sort_unstable();
        key.extend(edges);
        key
    }
}

/// Cap on diamonds for [`build_graph_matrix`].
pub const MAX_DIAMONDS: usize = 4;

/// Builds the dense graph matrix of a shape: the entry at a valid circle
/// labeling is the injective-diamond-labeling sum of the entrywise Hermite
/// products; other entries are 0. The injective sum is evaluated by
/// inclusion–exclusion over diamond coincidence patterns; the per-pattern
/// free sums factor across merged diamonds, so each entry costs
/// `O(Bell(#diamonds) · d)` rather than `d^{#diamonds}`.
pub fn build_graph_matrix(shape: &BipartiteShape, x: &Dataset) -> Result<DMatrix<f64>> {
    if shape.n_diamonds > MAX_DIAMONDS {
        return Err(Error::SizeCap(format!(
            "at most {MAX_DIAMONDS} diamonds supported, got {}",
            shape.n_diamonds
        )));
    }
    let n = x.n();
    let d = x.d();
    let left = shape.left_circles();
    let right = shape.right_circles();
    if left.is_empty() || right.is_empty() {
        return Err(Error::InvalidArgument(
            "graph matrix needs circles on both sides".into(),
        ));
    }
    let rows = n.checked_pow(left.len() as u32).unwrap_or(usize::MAX);
    let cols = n.checked_pow(right.len() as u32).unwrap_or(usize::MAX);
    if rows.saturating_mul(cols) > DENSE_ENTRY_CAP {
        return Err(Error::SizeCap(format!(
            "graph matrix would have {rows}×{cols} entries"
        )));
    }

    // Cache h_ℓ(x_i(j)).
    let max_order = shape.edges.values().copied().max().unwrap_or(0);
    let mut hermite = vec![0.0; n * d * (max_order + 1)];
    for i in 0..n {
        for j in 0..d {
            let v = x.data[(i, j)];
            for l in 0..=max_order {
                hermite[(i * d + j) * (max_order + 1) + l] = hermite_eval_unchecked(l, v);
            }
        }
    }
    let h = |i: usize, j: usize, l: usize| hermite[(i * d + j) * (max_order + 1) + l];

    // Diamond coincidence patterns with Möbius coefficients
    // μ(π) = Π_B (-1)^{|B|-1} (|B|-1)!.
    let patterns: Vec<(f64, Vec<Vec<usize>>)> = set_partitions(shape.n_diamonds)
        .into_iter()
        .map(|blocks| {
            let mu: f64 = blocks
                .iter()
                .map(|b| {
                    let mut f = 1.0;
                    for i in 1..b.len() {
                        f *= -(i as f64);
                    }
                    f
                })
                .product();
            (mu, blocks)
        })
        .collect();
    // Edges grouped by diamond.
    let mut by_diamond: Vec<Vec<(usize, usize)>> = vec![Vec::new(); shape.n_diamonds];
    for (&(c, dd), &l) in &shape.edges {
        by_diamond[dd].push((c, l));
    }

    let mut m = DMatrix::zeros(rows, cols);
    let mut alpha = vec![0usize; left.len()];
    let mut beta = vec![0usize; right.len()];
    let mut circle_label = vec![0usize; shape.n_circles];
    for rix in 0..rows {
        let mut t = rix;
        for k in 0..left.len() {
            alpha[k] = t % n;
            t /= n;
        }
        if has_dup(&alpha) {
            continue;
        }
        'cols: for cix in 0..cols {
            let mut t = cix;
            for k in 0..right.len() {
                beta[k] = t % n;
                t /= n;
            }
            if has_dup(&beta) {
                continue;
            }
            for b in &beta {
                if alpha.contains(b) {
                    continue 'cols;
                }
            }
            for (k, &c) in left.iter().enumerate() {
                circle_label[c] = alpha[k];
            }
            for (k, &c) in right.iter().enumerate() {
                circle_label[c] = beta[k];
            }
            let mut entry = 0.0;
            for (mu, blocks) in &patterns {
                let mut prod = *mu;
                for block in blocks {
                    let mut s = 0.0;
                    for j in 0..d {
                        let mut term = 1.0;
                        for &dd in block {
                            for &(c, l) in &by_diamond[dd] {
                                term *= h(circle_label[c], j, l);
                            }
                        }
                        s += term;
                    }
                    prod *= s;
                }
                entry += prod;
            }
            m[(rix, cix)] = entry;
        }
    }
    Ok(m)
}

// ---------------------------------------------------------------------
// Admissible circle/diamond merges
// ---------------------------------------------------------------------

/// An admissible merged shape with its derivation bookkeeping.
#[derive(Debug, Clone)]
pub struct AdmissibleShape {
    pub shape: BipartiteShape,
    /// Number of super-circles (blocks of the circle partition).
    pub s_blocks: usize,
    /// Number of super-diamonds (blocks of the diamond partition).
    pub t_blocks: usize,
    pub removed_edges: usize,
}

/// The alternating base shape for cycles with the given lengths: one circle
/// and one diamond per cycle position, circles alternating between L and R
/// (odd cycles put the last two circles on the same side), arranged so that
/// `|L| = ⌈p/2⌉` and `|R| = ⌊p/2⌋`.
pub fn base_shape(cycle_lengths: &[usize]) -> BipartiteShape {
    let p: usize = cycle_lengths.iter().sum();
    let mut sides: Vec<CircleSide> = Vec::with_capacity(p);
    let mut edges = BTreeMap::new();
    let mut offset = 0usize;
    for &len in cycle_lengths {
        for i in 0..len {
            let side = if len % 2 == 1 && len > 1 && i == len - 1 {
                sides[offset + len - 2]
            } else if i % 2 == 0 {
                CircleSide::Left
            } else {
                CircleSide::Right
            };
            sides.push(side);
        }
        for i in 0..len {
            let c1 = offset + i;
            let c2 = offset + (i + 1) % len;
            let dd = offset + i;
            edges.insert((c1, dd), 1);
            if c2 != c1 {
                edges.insert((c2, dd), 1);
            }
            // 1-cycles keep a single edge (parallel edges identified).
        }
        offset += len;
    }
    let mut shape = BipartiteShape {
        n_circles: p,
        n_diamonds: p,
        circle_sides: sides,
        edges,
    };
    // Global balance: |L| = ⌈p/2⌉. Flip whole cycles greedily if needed.
    let want_left = p.div_ceil(2);
    let mut have_left = shape.left_circles().len();
    if have_left != want_left {
        let mut offset = 0usize;
        for &len in cycle_lengths {
            let in_left = (offset..offset + len)
                .filter(|&c| shape.circle_sides[c] == CircleSide::Left)
                .count();
            let flipped_left = have_left - in_left + (len - in_left);
            if (flipped_left as i64 - want_left as i64).abs()
                < (have_left as i64 - want_left as i64).abs()
            {
                for c in offset..offset + len {
                    shape.circle_sides[c] = match shape.circle_sides[c] {
                        CircleSide::Left => CircleSide::Right,
                        CircleSide::Right => CircleSide::Left,
                    };
                }
                have_left = flipped_left;
            }
            offset += len;
        }
    }
    shape
}

/// Enumeration cap for [`enumerate_admissible`].
pub const MAX_ADMISSIBLE_P: usize = 6;

/// All admissible circle- and diamond-merged shapes reachable from the base
/// shape of `cycle_lengths`: circle partitions whose blocks never share a
/// diamond neighbor, arbitrary diamond partitions, and removal of edges
/// that had multiplicity ≥ 2 when formed, with no super-circle left
/// isolated. Deduplicated by shape structure.
pub fn enumerate_admissible(cycle_lengths: &[usize]) -> Result<Vec<AdmissibleShape>> {
    let p: usize = cycle_lengths.iter().sum();
    if p == 0 || p > MAX_ADMISSIBLE_P {
        return Err(Error::SizeCap(format!(
            "admissible enumeration supports 1 <= p <= {MAX_ADMISSIBLE_P}"
        )));
    }
    let g0 = base_shape(cycle_lengths);
    // Which circles share a diamond in G0?
    let mut share = vec![vec![false; p]; p];
    for (&(c1, d1), _) in &g0.edges {
        for (&(c2, d2), _) in &g0.edges {
            if d1 == d2 && c1 != c2 {
                share[c1][c2] = true;
            }
        }
    }
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for s_partition in set_partitions(p) {
        let ok = s_partition.iter().all(|block| {
            block
                .iter()
                .all(|&a| block.iter().all(|&b| a == b || !share[a][b]))
        });
        if !ok {
            continue;
        }
        let mut circle_block = vec![0usize; p];
        for (b, block) in s_partition.iter().enumerate() {
            for &c in block {
                circle_block[c] = b;
            }
        }
        let s_sides: Vec<CircleSide> = s_partition
            .iter()
            .map(|block| {
                if block
                    .iter()
                    .any(|&c| g0.circle_sides[c] == CircleSide::Left)
                {
                    CircleSide::Left
                } else {
                    CircleSide::Right
                }
            })
            .collect();
        for t_partition in set_partitions(p) {
            let mut diamond_block = vec![0usize; p];
            for (b, block) in t_partition.iter().enumerate() {
                for &dd in block {
                    diamond_block[dd] = b;
                }
            }
            let mut mult: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            for (&(c, dd), _) in &g0.edges {
                *mult
                    .entry((circle_block[c], diamond_block[dd]))
                    .or_insert(0) += 1;
            }
            let removable: Vec<(usize, usize)> = mult
                .iter()
                .filter(|(_, &m)| m >= 2)
                .map(|(&e, _)| e)
                .collect();
            for mask in 0u32..(1u32 << removable.len()) {
                let removed: BTreeSet<(usize, usize)> = removable
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask >> i & 1 == 1)
                    .map(|(_, &e)| e)
                    .collect();
                let mut edges = BTreeMap::new();
                for (&e, _) in &mult {
                    if !removed.contains(&e) {
                        edges.insert(e, 1usize);
                    }
                }
                let iso_circle =
                    (0..s_partition.len()).any(|c| !edges.keys().any(|&(cc, _)| cc == c));
                if iso_circle {
                    continue;
                }
                let shape = BipartiteShape {
                    n_circles: s_partition.len(),
                    n_diamonds: t_partition.len(),
                    circle_sides: s_sides.clone(),
                    edges,
                };
                if seen.insert(shape.dedup_key()) {
                    out.push(AdmissibleShape {
                        shape,
                        s_blocks: s_partition.len(),
                        t_blocks: t_partition.len(),
                        removed_edges: removed.len(),
                    });
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Vertex-capacitated max flow / min separator
// ---------------------------------------------------------------------

/// Outcome of a vertex-capacitated max-flow computation on a shape.
#[derive(Debug, Clone)]
pub struct FlowResult {
    pub value: f64,
    /// Throughput per vertex: circles first, then diamonds.
    pub witness: Vec<f64>,
    /// Vertices (same indexing) forming a minimum-weight separator.
    pub separator: Vec<usize>,
    pub separator_weight: f64,
}

/// Maximum vertex-capacitated (L, R)-flow of a shape, with circles of
/// capacity 1 and diamonds of capacity `log_n d`, via node splitting and
/// max flow; the separator is read off the min cut.
pub fn max_flow_separator(shape: &BipartiteShape, n: usize, d: usize) -> FlowResult {
    let w_diamond = (d as f64).ln() / (n as f64).ln();
    let nc = shape.n_circles;
    let nd = shape.n_diamonds;
    let total = nc + nd;
    let node_in = |v: usize| 2 * v;
    let node_out = |v: usize| 2 * v + 1;
    let s = 2 * total;
    let t = 2 * total + 1;
    let mut net = FlowNetwork::new(2 * total + 2);
    let mut split_edges = Vec::with_capacity(total);
    for v in 0..total {
        let cap = if v < nc { 1.0 } else { w_diamond };
        split_edges.push(net.add_edge(node_in(v), node_out(v), cap));
    }
    const INF: f64 = 1e18;
    for (&(c, dd), _) in &shape.edges {
        let dv = nc + dd;
        net.add_edge(node_out(c), node_in(dv), INF);
        net.add_edge(node_out(dv), node_in(c), INF);
    }
    for c in 0..nc {
        match shape.circle_sides[c] {
            CircleSide::Left => {
                net.add_edge(s, node_in(c), INF);
            }
            CircleSide::Right => {
                net.add_edge(node_out(c), t, INF);
            }
        }
    }
    let value = net.max_flow(s, t);
    let witness: Vec<f64> = split_edges.iter().map(|&e| net.flow_through(e)).collect();
    let reach = net.residual_reachable(s);
    let mut separator = Vec::new();
    let mut separator_weight = 0.0;
    for v in 0..total {
        if reach[node_in(v)] && !reach[node_out(v)] {
            separator.push(v);
            separator_weight += if v < nc { 1.0 } else { w_diamond };
        }
    }
    FlowResult {
        value,
        witness,
        separator,
        separator_weight,
    }
}

/// Norm prediction for a shape: `n^{(w(V) - w(S_min) + w(V_iso))/2}`, with
/// the polylog prefactor `(w(V)·log n)^{Σ ℓ(e)}` reported separately as a
/// diagnostic.
#[derive(Debug, Clone)]
pub struct NormPrediction {
    pub exponent: f64,
    pub value: f64,
    pub polylog_prefactor: f64,
    pub separator_weight: f64,
}

pub fn predicted_norm_bound(shape: &BipartiteShape, n: usize, d: usize) -> NormPrediction {
    let w_diamond = (d as f64).ln() / (n as f64).ln();
    let flow = max_flow_separator(shape, n, d);
    let w_v = shape.vertex_weight(w_diamond);
    let w_iso =
        shape.isolated_diamonds() as f64 * w_diamond + shape.isolated_circles() as f64;
    let exponent = 0.5 * (w_v - flow.separator_weight + w_iso);
    let value = (n as f64).powf(exponent);
    let ell = shape.total_order().max(1) as f64;
    let polylog = (w_v * (n as f64).ln()).powf(ell);
    NormPrediction {
        exponent,
        value,
        polylog_prefactor: polylog,
        separator_weight: flow.separator_weight,
    }
}

/// Dinic max flow with f64 capacities.
struct FlowNetwork {
    first: Vec<Option<usize>>,
    to: Vec<usize>,
    next: Vec<Option<usize>>,
    cap: Vec<f64>,
}

const FLOW_EPS: f64 = 1e-12;

impl FlowNetwork {
    fn new(n: usize) -> Self {
        Self {
            first: vec![None; n],
            to: Vec::new(),
            next: Vec::new(),
            cap: Vec::new(),
        }
    }

    fn add_edge(&mut self, u: usize, v: usize, cap: f64) -> usize {
        let id = self.to.len();
        self.to.push(v);
        self.next.push(self.first[u]);
        self.cap.push(cap);
        self.first[u] = Some(id);
        self.to.push(u);
        self.next.push(self.first[v]);
        self.cap.push(0.0);
        self.first[v] = Some(id + 1);
        id
    }

    fn flow_through(&self, edge: usize) -> f64 {
        self.cap[edge ^ 1]
    }

    fn bfs_levels(&self, s: usize, t: usize) -> Option<Vec<i32>> {
        let mut level = vec![-1; self.first.len()];
        let mut queue = std::collections::VecDeque::new();
        level[s] = 0;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            let mut e = self.first[u];
            while let Some(id) = e {
                let v = self.to[id];
                if level[v] < 0 && self.cap[id] > FLOW_EPS {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
                e = self.next[id];
            }
        }
        if level[t] >= 0 {
            Some(level)
        } else {
            None
        }
    }

    fn dfs_push(
        &mut self,
        u: usize,
        t: usize,
        pushed: f64,
        level: &[i32],
        iter: &mut [Option<usize>],
    ) -> f64 {
        if u == t {
            return pushed;
        }
        while let Some(id) = iter[u] {
            let v = self.to[id];
            if level[v] == level[u] + 1 && self.cap[id] > FLOW_EPS {
                let d = self.dfs_push(v, t, pushed.min(self.cap[id]), level, iter);
                if d > FLOW_EPS {
                    self.cap[id] -= d;
                    self.cap[id ^ 1] += d;
                    return d;
                }
            }
            iter[u] = self.next[id];
        }
        0.0
    }

    fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let mut flow = 0.0;
        while let Some(level) = self.bfs_levels(s, t) {
            let mut iter = self.first.clone();
            loop {
                let pushed = self.dfs_push(s, t, f64::INFINITY, &level, &mut iter);
                if pushed <= FLOW_EPS {
                    break;
                }
                flow += pushed;
            }
        }
        flow
    }

    fn residual_reachable(&self, s: usize) -> Vec<bool> {
        let mut seen = vec![false; self.first.len()];
        let mut queue = std::collections::VecDeque::new();
        seen[s] = true;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            let mut e = self.first[u];
            while let Some(id) = e {
                let v = self.to[id];
                if !seen[v] && self.cap[id] > FLOW_EPS {
                    seen[v] = true;
                    queue.push_back(v);
                }
                e = self.next[id];
            }
        }
        seen
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphpoly::{eval_graph_poly, MergedCycleGraph, SelectorAssignment};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_form_identity_raw() {
        // (w^{⊗|L|})ᵀ M_G w^{⊗|R|} = P_G(w, x) on random small instances.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in 2..=4usize {
            for g in crate::graphpoly::graphs_from_partitions(p, 1).unwrap() {
                if g.n_vertices() < 2 {
                    continue;
                }
                let n = 7;
                let x = Dataset::gaussian(n, 3, 40 + p as u64);
                let w = SelectorAssignment::random(n, 4, &mut rng);
                let (l, r) = g.alternation_split();
                let rep =
                    build_matrix_representation(&g.graph, &l, &r, &x, MatrixEsMode::Raw).unwrap();
                let m = match &rep {
                    MatrixRep::Dense { matrix, .. } => matrix.clone(),
                    _ => panic!("expected dense at this size"),
                };
                let wk = |k: usize| -> nalgebra::DVector<f64> {
                    let len = n.pow(k as u32);
                    nalgebra::DVector::from_fn(len, |idx, _| {
                        let mut t = idx;
                        let mut val = 1.0;
                        for _ in 0..k {
                            if !w.get(t % n) {
                                val = 0.0;
                            }
                            t /= n;
                        }
                        val
                    })
                };
                let lhs = (wk(l.len()).transpose() * &m * wk(r.len()))[(0, 0)];
                let rhs = eval_graph_poly(&g, &w, &x).unwrap();
                assert!(
                    (lhs - rhs).abs() <= 1e-8 * rhs.abs().max(1e-9),
                    "p={p} graph={g}: {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn diagonal_blocks_vanish() {
        let g = MergedCycleGraph::from_cycles(&[2]).unwrap();
        let x = Dataset::gaussian(6, 2, 3);
        let rep =
            build_matrix_representation(&g.graph, &[0], &[1], &x, MatrixEsMode::Raw).unwrap();
        for i in 0..6 {
            assert_eq!(rep.entry(&[i], &[i]), 0.0);
        }
    }

    #[test]
    fn free_op_matches_dense_free_sums() {
        // The implicit operator equals the dense free-sum matrix (validity
        // not applied) in both product directions.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 8;
        let x = Dataset::gaussian(n, 3, 77);
        let feats = GramFeatures::new(&x);
        for p in 2..=4usize {
            for g in crate::graphpoly::graphs_from_partitions(p, 1).unwrap() {
                let nv = g.n_vertices();
                if nv < 2 {
                    continue;
                }
                let (l, r) = g.alternation_split();
                if l.len() > 2 || r.len() > 2 {
                    continue;
                }
                let full: BTreeSet<usize> = (0..nv).collect();
                let terms = equal_es_expansion(&g.graph, &full, 3.0);
                let op = FreeComboOp::new(&terms, &l, &r, feats.clone()).unwrap();
                let rows = op.nrows();
                let cols = op.ncols();
                let mut dense = DMatrix::zeros(rows, cols);
                let mut labels = vec![0usize; nv];
                for cix in 0..cols {
                    for rix in 0..rows {
                        let mut t = rix;
                        for &v in &l {
                            labels[v] = t % n;
                            t /= n;
                        }
                        let mut t = cix;
                        for &v in &r {
                            labels[v] = t % n;
                            t /= n;
                        }
                        dense[(rix, cix)] = eval_terms_at_labels(&terms, &labels, &feats);
                    }
                }
                let v: Vec<f64> = (0..cols).map(|_| rng.gen::<f64>() - 0.5).collect();
                let mut got = vec![0.0; rows];
                op.apply(&v, &mut got);
                let expect = &dense * nalgebra::DVector::from_column_slice(&v);
                for i in 0..rows {
                    assert!(
                        (got[i] - expect[i]).abs() <= 1e-8 * expect[i].abs().max(1.0),
                        "matvec mismatch p={p} graph={g} row {i}: {} vs {}",
                        got[i],
                        expect[i]
                    );
                }
                let u: Vec<f64> = (0..rows).map(|_| rng.gen::<f64>() - 0.5).collect();
                let mut got_t = vec![0.0; cols];
                op.apply_t(&u, &mut got_t);
                let expect_t = dense.transpose() * nalgebra::DVector::from_column_slice(&u);
                for i in 0..cols {
                    assert!(
                        (got_t[i] - expect_t[i]).abs() <= 1e-8 * expect_t[i].abs().max(1.0),
                        "transpose matvec mismatch p={p} graph={g} row {i}"
                    );
                }
            }
        }
    }

    #[test]
    fn implicit_op_matches_pattern_reference() {
        // The implicit operator equals: valid entries, plus entries on the
        // residual coincidence patterns, zero on all cheap patterns.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 7;
        let x = Dataset::gaussian(n, 3, 555);
        let feats = GramFeatures::new(&x);
        for p in 2..=4usize {
            for g in crate::graphpoly::graphs_from_partitions(p, 1).unwrap() {
                let nv = g.n_vertices();
                if nv < 2 {
                    continue;
                }
                let (l, r) = g.alternation_split();
                if l.len() > 2 || r.len() > 2 {
                    continue;
                }
                let full: BTreeSet<usize> = (0..nv).collect();
                let terms = equal_es_expansion(&g.graph, &full, 3.0);
                let op = ImplicitComboOp::new(&terms, &l, &r, feats.clone()).unwrap();
                let residual: Vec<Vec<Vec<usize>>> = op.residual_patterns().to_vec();
                let rows = op.nrows();
                let cols = op.ncols();
                let slot_vertex: Vec<usize> = l.iter().chain(r.iter()).copied().collect();
                let mut dense = DMatrix::zeros(rows, cols);
                let mut labels = vec![0usize; nv];
                for cix in 0..cols {
                    for rix in 0..rows {
                        // slot values in (L ++ R) order
                        let mut slots = vec![0usize; nv];
                        let mut t = rix;
                        for s in 0..l.len() {
                            slots[s] = t % n;
                            t /= n;
                        }
                        let mut t = cix;
                        for s in 0..r.len() {
                            slots[l.len() + s] = t % n;
                            t /= n;
                        }
                        for (s, &v) in slot_vertex.iter().enumerate() {
                            labels[v] = slots[s];
                        }
                        // coincidence pattern of the slots
                        let mut blocks: Vec<Vec<usize>> = Vec::new();
                        for (s, &val) in slots.iter().enumerate() {
                            if let Some(b) = blocks
                                .iter_mut()
                                .find(|b| slots[b[0]] == val)
                            {
                                b.push(s);
                            } else {
                                blocks.push(vec![s]);
                            }
                        }
                        blocks.sort_by_key(|b| b[0]);
                        let keep = blocks.len() == nv || residual.contains(&blocks);
                        if keep {
                            dense[(rix, cix)] = eval_terms_at_labels(&terms, &labels, &feats);
                        }
                    }
                }
                let v: Vec<f64> = (0..cols).map(|_| rng.gen::<f64>() - 0.5).collect();
                let mut got = vec![0.0; rows];
                op.apply(&v, &mut got);
                let expect = &dense * nalgebra::DVector::from_column_slice(&v);
                for i in 0..rows {
                    assert!(
                        (got[i] - expect[i]).abs() <= 1e-8 * expect[i].abs().max(1.0),
                        "implicit matvec mismatch p={p} graph={g} row {i}: {} vs {}",
                        got[i],
                        expect[i]
                    );
                }
                let u: Vec<f64> = (0..rows).map(|_| rng.gen::<f64>() - 0.5).collect();
                let mut got_t = vec![0.0; cols];
                op.apply_t(&u, &mut got_t);
                let expect_t = dense.transpose() * nalgebra::DVector::from_column_slice(&u);
                for i in 0..cols {
                    assert!(
                        (got_t[i] - expect_t[i]).abs() <= 1e-8 * expect_t[i].abs().max(1.0),
                        "implicit transpose mismatch p={p} graph={g} row {i}: {} vs {}",
                        got_t[i],
                        expect_t[i]
                    );
                }
            }
        }
    }

    #[test]
    fn graph_matrix_order_one_is_inner_product() {
        // One L-circle, one R-circle, one diamond, both edges order 1:
        // entry (i, j) = ⟨x_i, x_j⟩ for i ≠ j.
        let shape = BipartiteShape {
            n_circles: 2,
            n_diamonds: 1,
            circle_sides: vec![CircleSide::Left, CircleSide::Right],
            edges: [((0, 0), 1), ((1, 0), 1)].into_iter().collect(),
        };
        let x = Dataset::gaussian(7, 3, 21);
        let m = build_graph_matrix(&shape, &x).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let expect = if i == j { 0.0 } else { x.row(i).dot(&x.row(j)) };
                assert!(
                    (m[(i, j)] - expect).abs() < 1e-10,
                    "entry ({i},{j}): {} vs {expect}",
                    m[(i, j)]
                );
            }
        }
    }

    #[test]
    fn graph_matrix_injective_sum_matches_enumeration() {
        let shape = BipartiteShape {
            n_circles: 2,
            n_diamonds: 3,
            circle_sides: vec![CircleSide::Left, CircleSide::Right],
            edges: [
                ((0, 0), 1),
                ((1, 0), 1),
                ((0, 1), 2),
                ((1, 2), 1),
                ((0, 2), 1),
            ]
            .into_iter()
            .collect(),
        };
        let x = Dataset::gaussian(5, 4, 8);
        let m = build_graph_matrix(&shape, &x).unwrap();
        let d = 4usize;
        for i in 0..5 {
            for j in 0..5 {
                if i == j {
                    continue;
                }
                let labels = [i, j];
                let mut expect = 0.0;
                for j1 in 0..d {
                    for j2 in 0..d {
                        for j3 in 0..d {
                            if j1 == j2 || j1 == j3 || j2 == j3 {
                                continue;
                            }
                            let coords = [j1, j2, j3];
                            let mut term = 1.0;
                            for (&(c, dd), &l) in &shape.edges {
                                term *=
                                    hermite_eval_unchecked(l, x.data[(labels[c], coords[dd])]);
                            }
                            expect += term;
                        }
                    }
                }
                assert!(
                    (m[(i, j)] - expect).abs() <= 1e-9 * expect.abs().max(1.0),
                    "injective sum mismatch at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn base_shape_counts() {
        let g0 = base_shape(&[2]);
        assert_eq!(g0.n_circles, 2);
        assert_eq!(g0.n_diamonds, 2);
        assert_eq!(g0.left_circles().len(), 1);
        let g0 = base_shape(&[4]);
        assert_eq!(g0.left_circles().len(), 2);
        let g0 = base_shape(&[5]);
        assert_eq!(g0.left_circles().len(), 3);
        let g0 = base_shape(&[2, 1]);
        assert_eq!(g0.n_circles, 3);
        assert_eq!(g0.left_circles().len(), 2);
    }

    #[test]
    fn base_flow_equals_sum_floor_half() {
        for lengths in [
            vec![2],
            vec![3],
            vec![4],
            vec![2, 2],
            vec![3, 2],
            vec![4, 1],
        ] {
            let g0 = base_shape(&lengths);
            let expect: f64 = lengths.iter().map(|&l| (l / 2) as f64).sum();
            for (n, d) in [(8usize, 4usize), (16, 4), (64, 8)] {
                let flow = max_flow_separator(&g0, n, d);
                assert!(
                    (flow.value - expect).abs() < 1e-9,
                    "f(G0) for {lengths:?} at (n={n},d={d}): {} vs {expect}",
                    flow.value
                );
                assert!(
                    (flow.value - flow.separator_weight).abs() < 1e-9,
                    "max-flow/min-cut duality violated"
                );
            }
        }
    }

    #[test]
    fn disconnected_sides_have_zero_flow() {
        let shape = BipartiteShape {
            n_circles: 2,
            n_diamonds: 1,
            circle_sides: vec![CircleSide::Left, CircleSide::Right],
            edges: [((0, 0), 1)].into_iter().collect(),
        };
        let flow = max_flow_separator(&shape, 8, 4);
        assert!(flow.value.abs() < 1e-12);
    }

    #[test]
    fn single_diamond_separator_flow() {
        let shape = BipartiteShape {
            n_circles: 2,
            n_diamonds: 1,
            circle_sides: vec![CircleSide::Left, CircleSide::Right],
            edges: [((0, 0), 1), ((1, 0), 1)].into_iter().collect(),
        };
        for (n, d) in [(8usize, 4usize), (16, 4), (64, 8), (4, 16)] {
            let w = (d as f64).ln() / (n as f64).ln();
            let flow = max_flow_separator(&shape, n, d);
            assert!(
                (flow.value - w.min(1.0)).abs() < 1e-9,
                "flow {} vs min(1, {w})",
                flow.value
            );
        }
    }

    #[test]
    fn admissible_enumeration_smoke() {
        let shapes = enumerate_admissible(&[2]).unwrap();
        assert!(shapes
            .iter()
            .any(|s| s.shape.n_circles == 2 && s.shape.n_diamonds == 2));
        // The two circles of the 2-cycle share both diamonds: no circle
        // merge is admissible.
        assert!(shapes.iter().all(|s| s.shape.n_circles == 2));
        for s in &shapes {
            assert_eq!(s.shape.isolated_circles(), 0);
        }
    }

    #[test]
    fn flow_lemma_small_cases() {
        for lengths in [vec![2], vec![3], vec![2, 1]] {
            let p: usize = lengths.iter().sum();
            let shapes = enumerate_admissible(&lengths).unwrap();
            for (n, d) in [(8usize, 4usize), (64, 8)] {
                let w = (d as f64).ln() / (n as f64).ln();
                for s in &shapes {
                    let flow = max_flow_separator(&s.shape, n, d);
                    let bound = lengths.iter().map(|&l| (l / 2) as f64).sum::<f64>()
                        + w * s.shape.isolated_diamonds() as f64
                        - w * (p - s.t_blocks) as f64
                        - 1.5 * (p - s.s_blocks) as f64;
                    assert!(
                        flow.value >= bound - 1e-9,
                        "flow lemma failed for {lengths:?} (n={n},d={d}): {} < {bound}",
                        flow.value
                    );
                }
            }
        }
    }

    #[test]
    fn prediction_counts_isolated_diamonds() {
        // An isolated diamond raises both w(V) and w(V_iso) by the diamond
        // weight, multiplying the prediction by n^{w_⋄} = d.
        let mut shape = BipartiteShape {
            n_circles: 2,
            n_diamonds: 1,
            circle_sides: vec![CircleSide::Left, CircleSide::Right],
            edges: [((0, 0), 1), ((1, 0), 1)].into_iter().collect(),
        };
        let base = predicted_norm_bound(&shape, 16, 4);
        shape.n_diamonds = 2;
        let with_iso = predicted_norm_bound(&shape, 16, 4);
        let ratio = with_iso.value / base.value;
        assert!(
            (ratio - 4.0).abs() < 1e-9,
            "isolated diamond factor: {ratio} vs d=4"
        );
    }
}

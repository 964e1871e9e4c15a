use ssvcert::dataset::Dataset;
use ssvcert::graphmatrix::*;
use ssvcert::graphpoly::*;
use ssvcert::linalg::{op_norm, PowerIterSettings, sym_eig_max, sym_eig_min, LinearOp};
use std::collections::BTreeSet;

fn main() {
    let n = 1024;
    let x = Dataset::gaussian(n, 8, 1001);
    // double-edge =V combo, dense valid matrix
    let g = MergedCycleGraph::from_cycles(&[2]).unwrap();
    let full: BTreeSet<usize> = [0usize, 1].into_iter().collect();
    let terms = equal_es_expansion(&g.graph, &full, 8.0);
    let rep = build_matrix_representation(&g.graph, &[0], &[1], &x, MatrixEsMode::EqualV).unwrap();
    match &rep {
        MatrixRep::Dense { matrix, .. } => {
            let t0 = std::time::Instant::now();
            let lmax = sym_eig_max(matrix);
            let lmin = sym_eig_min(matrix);
            println!("dense 2-vertex: lam_max={lmax:.2} lam_min={lmin:.2} exact-norm={:.2} [{:?}]", lmax.max(-lmin), t0.elapsed());
            let lz = op_norm(matrix, PowerIterSettings::default());
            println!("lanczos estimate: {lz:.2}");
        }
        _ => println!("not dense"),
    }
    let _ = terms;
    // time one C4 matvec
    let c4 = MergedCycleGraph::from_cycles(&[4]).unwrap();
    let (l, r) = c4.alternation_split();
    let fullv: BTreeSet<usize> = (0..4).collect();
    let t4 = equal_es_expansion(&c4.graph, &fullv, 8.0);
    let feats = GramFeatures::new(&x);
    let t0 = std::time::Instant::now();
    let op = ImplicitComboOp::new(&t4, &l, &r, feats).unwrap();
    println!("C4 op build: {:?}", t0.elapsed());
    let v = vec![1.0; op.ncols()];
    let mut out = vec![0.0; op.nrows()];
    let t0 = std::time::Instant::now();
    for _ in 0..3 { op.apply(&v, &mut out); }
    println!("C4 matvec ×3: {:?}", t0.elapsed());
}

use ssvcert::dataset::Dataset;
use ssvcert::graphmatrix::*;
use ssvcert::graphpoly::*;
use ssvcert::linalg::LinearOp;
use std::collections::BTreeSet;

fn main() {
    let n = 1024;
    let x = Dataset::gaussian(n, 8, 1001);
    let feats = GramFeatures::new(&x);
    let c4 = MergedCycleGraph::from_cycles(&[4]).unwrap();
    let (l, r) = c4.alternation_split();
    let fullv: BTreeSet<usize> = (0..4).collect();
    let t4 = equal_es_expansion(&c4.graph, &fullv, 8.0);
    let op = ImplicitComboOp::new(&t4, &l, &r, feats.clone()).unwrap();
    let v = vec![1.0; op.ncols()];
    let mut out = vec![0.0; op.nrows()];
    op.apply(&v, &mut out);
    for (name, kinds) in op.profile_pattern_kinds(&v) {
        println!("{name}: {kinds:?}");
    }
    let t0 = std::time::Instant::now();
    for _ in 0..5 { op.apply(&v, &mut out); }
    println!("total x5: {:?}", t0.elapsed());
}

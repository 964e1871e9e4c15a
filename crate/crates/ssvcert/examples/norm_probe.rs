use ssvcert::dataset::Dataset;
use ssvcert::graphmatrix::*;
use ssvcert::graphpoly::*;
use ssvcert::linalg::{op_norm, PowerIterSettings, LinearOp};
use std::collections::BTreeSet;
use nalgebra::DMatrix;

fn main() {
    let n = 40;
    let x = Dataset::gaussian(n, 8, 1001);
    let feats = GramFeatures::new(&x);
    // triangle and C4 =V combos
    for (name, lens, part) in [
        ("triangle", vec![3usize], vec![vec![0usize], vec![1], vec![2]]),
        ("C4", vec![4], vec![vec![0usize], vec![1], vec![2], vec![3]]),
    ] {
        let g = MergedCycleGraph::merged_cycles(&lens, &part).unwrap();
        let nv = g.n_vertices();
        let (l, r) = g.alternation_split();
        let full: BTreeSet<usize> = (0..nv).collect();
        let terms = equal_es_expansion(&g.graph, &full, 8.0);
        let op = ImplicitComboOp::new(&terms, &l, &r, feats.clone()).unwrap();
        let imp_norm = op_norm(&op, PowerIterSettings::default());
        // dense valid
        let rows = op.nrows();
        let cols = op.ncols();
        let slot_vertex: Vec<usize> = l.iter().chain(r.iter()).copied().collect();
        let mut dense = DMatrix::zeros(rows, cols);
        let mut labels = vec![0usize; nv];
        for cix in 0..cols {
            for rix in 0..rows {
                let mut slots = vec![0usize; nv];
                let mut t = rix;
                for s in 0..l.len() { slots[s] = t % n; t /= n; }
                let mut t = cix;
                for s in 0..r.len() { slots[l.len() + s] = t % n; t /= n; }
                let mut sorted = slots.clone(); sorted.sort_unstable(); sorted.dedup();
                if sorted.len() != nv { continue; }
                for (s, &v) in slot_vertex.iter().enumerate() { labels[v] = slots[s]; }
                dense[(rix, cix)] = eval_terms_at_labels_pub(&terms, &labels, &feats);
            }
        }
        let valid_norm = op_norm(&dense, PowerIterSettings::default());
        println!("{name}: implicit {imp_norm:.4e}  dense-valid {valid_norm:.4e}  ratio {:.3}", imp_norm / valid_norm);
    }
}

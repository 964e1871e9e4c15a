use ssvcert::certify::{certify_schatten_p, certify_trivial, AuditNode};
use ssvcert::dataset::Dataset;

fn dump(node: &AuditNode, depth: usize, thresh: f64) {
    if depth > 2 || node.value < thresh { return; }
    println!("{}{} = {:.5e}", "  ".repeat(depth), node.label.chars().take(100).collect::<String>(), node.value);
    for c in &node.children { dump(c, depth + 1, thresh); }
}

fn main() {
    let d = 8; let p = 4; let eta = 0.25;
    for n in [256usize, 1024] {
        let t0 = std::time::Instant::now();
        let x = Dataset::gaussian(n, d, 1001);
        let c = certify_schatten_p(&x, eta, p).unwrap();
        let t = certify_trivial(&x, eta);
        println!("n={n}: B_cert_audit={:.4e} resilience={:.4} ssv={:.4} trivial_ssv={:.4} ratio={:.4} [{:?}]",
            c.audit.value, c.value, c.normalized_ssv(), t.normalized_ssv(),
            c.normalized_ssv()/t.normalized_ssv(), t0.elapsed());
        if n == 1024 { dump(&c.audit, 0, 0.03 * c.audit.value); }
    }
}

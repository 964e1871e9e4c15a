//! Quick probe of the schatten certificate at benchmark scale.
use ssvcert::certify::{certify_schatten_p, certify_trivial};
use ssvcert::dataset::Dataset;

fn main() {
    let d = 8;
    let p = 4;
    let eta = 0.25;
    for n in [64usize, 128, 256, 512, 1024] {
        let mut ssv_sch = 0.0;
        let mut ssv_triv = 0.0;
        let seeds = if n >= 512 { 3 } else { 2 };
        let t0 = std::time::Instant::now();
        for seed in 0..seeds {
            let x = Dataset::gaussian(n, d, 1000 + seed);
            let c = certify_schatten_p(&x, eta, p).unwrap();
            let t = certify_trivial(&x, eta);
            ssv_sch += c.normalized_ssv();
            ssv_triv += t.normalized_ssv();
        }
        ssv_sch /= seeds as f64;
        ssv_triv /= seeds as f64;
        println!(
            "n={n:5} ssv_schatten={ssv_sch:.4} ssv_trivial={ssv_triv:.4} ratio={:.4} time/seed={:?}",
            ssv_sch / ssv_triv,
            t0.elapsed() / seeds as u32
        );
    }
}

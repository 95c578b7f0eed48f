//! Times forward runs on the desk problem and prints the prior predictive
//! spread of the monitoring data.
use std::time::Instant;

use hierassim::forward::{observe, simulate, Channel, SimConfig};
use hierassim::geomodel::{sample_prior, CovarianceModel, FieldGenerator, HyperPrior};
use hierassim::rng;

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let cfg = SimConfig::desk_default().truncated(5);
    let prior = HyperPrior::reference_box(5.0, 0.2).unwrap();
    let gen = FieldGenerator::new(cfg.grid, CovarianceModel::default()).unwrap();
    let t0 = Instant::now();
    gen.factor(5.0).unwrap();
    println!("factorization: {:?}", t0.elapsed());

    let mut draws = Vec::new();
    let t0 = Instant::now();
    let (mut iters, mut subs) = (0, 0);
    let mut tgen = 0.0;
    for k in 0..n {
        let mut r = rng::stream(1, &[k as u64]);
        let h = sample_prior(&prior, &mut r);
        let tg = Instant::now();
        let f = gen.generate(&h, rng::derive_seed(2, &[k as u64])).unwrap();
        tgen += tg.elapsed().as_secs_f64();
        let out = simulate(&f, &cfg).unwrap();
        iters += out.stats.solver_iterations;
        subs += out.stats.tracer_substeps;
        let d = observe(&out, &[0, 1, 2, 3, 4], &[Channel::Pressure, Channel::Saturation]).unwrap();
        draws.push((h, d.values));
    }
    let el = t0.elapsed();
    println!(
        "{n} runs in {:?} ({:.3} ms/run), {:.1} cg its/run, {:.1} substeps/run",
        el,
        el.as_secs_f64() * 1e3 / n as f64,
        iters as f64 / n as f64,
        subs as f64 / n as f64
    );
    println!("field generation {:.3} ms/run", tgen * 1e3 / n as f64);
    for e in 0..10 {
        let mut v: Vec<f64> = draws.iter().map(|d| d.1[e]).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!(
            "obs {e}: p10 {:.4} p50 {:.4} p90 {:.4}",
            v[n / 10],
            v[n / 2],
            v[9 * n / 10]
        );
    }
    for (h, d) in draws.iter().take(8) {
        println!("{:.2} {:.2} {:.2} -> p13 {:.3} s {:?}", h.mu_logk, h.sigma_logk, h.log10_ar, d[4], &d[5..].iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>());
    }
}

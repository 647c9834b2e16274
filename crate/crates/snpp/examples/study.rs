//! Quick convergence study: `study <neumann|dirichlet> <N> <1/eps>...`
use snpp::grid::CellGeometry;
use snpp::micro::ScalingConfig;
use snpp::verify::{run_convergence_study, StudyConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scaling = if args.get(1).map(String::as_str) == Some("dirichlet") {
        ScalingConfig::dirichlet()
    } else {
        ScalingConfig::default()
    };
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let ladder: Vec<f64> = args[3.min(args.len())..]
        .iter()
        .map(|s| 1.0 / s.parse::<f64>().unwrap())
        .collect();
    let mut cfg = StudyConfig {
        geometry: CellGeometry::new(0.5, n),
        scaling,
        ..Default::default()
    };
    if !ladder.is_empty() {
        cfg.ladder = ladder;
    }
    if let Ok(m) = std::env::var("MACRO_N") {
        cfg.macro_resolution = m.parse().unwrap();
    }
    let t = std::time::Instant::now();
    let rep = run_convergence_study(&cfg, true).unwrap();
    for r in &rep.records {
        println!("eps {:.5} h_limited {}", r.epsilon, r.h_limited);
        for (k, v) in &r.norms {
            println!("  {k:20} {v:.6e}");
        }
        for (k, v) in &r.diagnostics {
            println!("  [{k:18}] {v:.6e}");
        }
    }
    for r in &rep.rates {
        let f = r
            .fit
            .map(|f| format!("slope {:.3} r2 {:.3} mono {}", f.slope, f.r2, f.monotone))
            .unwrap_or_default();
        println!(
            "{:20} theory {:.3} floor {:.3} {f} pass {:?}",
            r.name, r.theoretical, r.floor, r.pass
        );
    }
    println!("{:?}", rep.lemmas);
    eprintln!("{:.1}s", t.elapsed().as_secs_f64());
}

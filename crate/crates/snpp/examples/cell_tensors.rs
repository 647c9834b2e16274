//! Print effective tensors for a range of resolutions.
use snpp::cell::solve_all_cells;
use snpp::grid::CellGeometry;
use snpp::linalg::SolverSettings;

fn main() {
    let hole: f64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.5);
    for n in [8, 16, 32, 64] {
        let t0 = std::time::Instant::now();
        let (_, t) =
            solve_all_cells(CellGeometry::new(hole, n), &SolverSettings::default()).unwrap();
        println!(
            "N={n:3} D={:.8} K={:.8e} phi_int={:.8e} ({:.2}s)",
            t.d[0][0],
            t.k.unwrap()[0][0],
            t.phi_integral.unwrap(),
            t0.elapsed().as_secs_f64()
        );
    }
}

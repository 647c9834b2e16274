use snpp::grid::{build_perforated_grid, CellGeometry};
use snpp::micro::{run_micro, uniform_times, InitialData, MicroOptions, ScalingConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let inv: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(32.0);
    let n: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8);
    let interval: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1);
    let g = build_perforated_grid(1.0 / inv, CellGeometry::new(0.5, n)).unwrap();
    let cfg = ScalingConfig::default();
    let opts = MicroOptions {
        stokes_interval: interval,
        ..Default::default()
    };
    let t = Instant::now();
    let run = run_micro(
        &cfg,
        &g,
        &InitialData::default(),
        &uniform_times(0.1, 11),
        &opts,
    )
    .unwrap();
    println!(
        "cells {} time {:.2}s",
        g.num_fluid_cells(),
        t.elapsed().as_secs_f64()
    );
    for d in &run.diagnostics {
        println!(
            "t={:.2} mass={:.12} Q={:.3e} minc={:.4} divv={:.2e} |v|={:.3e} it={} mom={:.1e} proj={:.1e}",
            d.time, d.mass, d.charge, d.min_c, d.max_div_v,
            run.snapshots.iter().find(|s| s.time == d.time).unwrap().v.max_abs(),
            d.stokes.outer_iterations, d.stokes.momentum_residual, d.projection
        );
    }
}

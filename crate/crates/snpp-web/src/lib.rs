//! Browser bindings: effective tensors against hole size, unit-cell solution maps and
//! a small microscopic run. Results cross the boundary as JSON strings.

use serde_json::{json, Value};
use snpp::cell::{face_component_to_cells, solve_all_cells, CellSolutions};
use snpp::grid::{build_perforated_grid, Axis, CellGeometry, FieldOnGrid, PerforatedGrid};
use snpp::linalg::SolverSettings;
use snpp::micro::{run_micro, uniform_times, InitialData, MicroOptions, ScalingConfig};
use wasm_bindgen::prelude::*;

/// Largest cells-per-side the page may request; keeps a click under a second or so.
pub const MAX_RESOLUTION: usize = 64;
pub const MAX_MICRO_CELLS: usize = 96;

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn cell_tensors(hole_sides: &str, resolution: usize) -> Result<String, JsValue> {
    js(cell_tensors_json(hole_sides, resolution))
}

#[wasm_bindgen]
pub fn cell_field(hole_side: f64, resolution: usize, field: &str) -> Result<String, JsValue> {
    js(cell_field_json(hole_side, resolution, field))
}

#[wasm_bindgen]
pub fn micro_snapshot(
    hole_side: f64,
    resolution: usize,
    inv_eps: usize,
    t_final: f64,
) -> Result<String, JsValue> {
    js(micro_snapshot_json(hole_side, resolution, inv_eps, t_final))
}

fn geometry(hole_side: f64, resolution: usize) -> Result<CellGeometry, String> {
    if !(2..=MAX_RESOLUTION).contains(&resolution) {
        return Err(format!("resolution must lie in 2..={MAX_RESOLUTION}"));
    }
    let g = CellGeometry::new(hole_side, resolution);
    g.hole_range().map_err(|e| e.to_string())?;
    Ok(g)
}

/// Tensors for each comma-separated hole side.
pub fn cell_tensors_json(hole_sides: &str, resolution: usize) -> Result<String, String> {
    let mut rows = Vec::new();
    for s in hole_sides
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
    {
        let hole: f64 = s.parse().map_err(|_| format!("bad hole side `{s}`"))?;
        let (_, t) = solve_all_cells(geometry(hole, resolution)?, &SolverSettings::default())
            .map_err(|e| format!("hole {hole}: {e}"))?;
        rows.push(json!({
            "hole_side": hole,
            "porosity": t.porosity,
            "D": t.d,
            "K": t.k,
            "phi_integral": t.phi_integral,
        }));
    }
    if rows.is_empty() {
        return Err("no hole sides given".into());
    }
    Ok(Value::Array(rows).to_string())
}

/// Row-major `n × n` map of a fluid-cell field, `null` on solid cells.
fn raster(grid: &PerforatedGrid, values: &[f64]) -> Value {
    let n = grid.n();
    let mut out = vec![Value::Null; n * n];
    for (&(i, j), &v) in grid.cells().iter().zip(values) {
        out[j * n + i] = json!(v);
    }
    json!({ "n": n, "values": out })
}

fn pick(cells: &CellSolutions, field: &str) -> Result<Vec<f64>, String> {
    let missing = || format!("`{field}` needs a hole");
    let w = |i: Axis, j: usize| -> Result<Vec<f64>, String> {
        let w = cells.w_j.as_ref().ok_or_else(missing)?;
        Ok(face_component_to_cells(&cells.grid, &w[j], i))
    };
    let pi = |j: usize| -> Result<Vec<f64>, String> {
        Ok(cells.pi_j.as_ref().ok_or_else(missing)?[j].values.clone())
    };
    match field {
        "phi1" => Ok(cells.phi_j[0].values.clone()),
        "phi2" => Ok(cells.phi_j[1].values.clone()),
        "w11" => w(Axis::X, 0),
        "w21" => w(Axis::Y, 0),
        "w12" => w(Axis::X, 1),
        "w22" => w(Axis::Y, 1),
        "pi1" => pi(0),
        "pi2" => pi(1),
        "phi" => Ok(cells.phi.as_ref().ok_or_else(missing)?.values.clone()),
        _ => Err(format!(
            "unknown field `{field}`; try phi1, phi2, w11, w12, w21, w22, pi1, pi2, phi"
        )),
    }
}

/// One cell solution on the unit cell. `w{i}{j}` is component `i` of `w_j`.
pub fn cell_field_json(hole_side: f64, resolution: usize, field: &str) -> Result<String, String> {
    let (cells, _) = solve_all_cells(geometry(hole_side, resolution)?, &SolverSettings::default())
        .map_err(|e| e.to_string())?;
    let values = pick(&cells, field)?;
    let mut v = raster(&cells.grid, &values);
    v["field"] = json!(field);
    Ok(v.to_string())
}

/// Neumann run with default scaling: final charge density, pressure and diagnostics.
pub fn micro_snapshot_json(
    hole_side: f64,
    resolution: usize,
    inv_eps: usize,
    t_final: f64,
) -> Result<String, String> {
    if inv_eps == 0 || inv_eps * resolution > MAX_MICRO_CELLS {
        return Err(format!(
            "(1/eps)·resolution must lie in 1..={MAX_MICRO_CELLS}"
        ));
    }
    if !(t_final > 0.0 && t_final <= 0.1) {
        return Err("t_final must lie in (0, 0.1]".into());
    }
    let grid = build_perforated_grid(1.0 / inv_eps as f64, geometry(hole_side, resolution)?)
        .map_err(|e| e.to_string())?;
    let dt = 1e-3;
    let steps = (t_final / dt).round().max(1.0);
    let cfg = ScalingConfig {
        t_final: steps * dt,
        dt,
        ..Default::default()
    };
    let times = uniform_times(cfg.t_final, 2);
    let run = run_micro(
        &cfg,
        &grid,
        &InitialData::default(),
        &times,
        &MicroOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let last = run.snapshots.last().ok_or("no snapshots")?;
    let diag = run.diagnostics.last().ok_or("no diagnostics")?;
    let charge: FieldOnGrid = last.charge_field();
    Ok(json!({
        "time": last.time,
        "charge": raster(&grid, &charge.values),
        "pressure": raster(&grid, &last.p.values),
        "mass": diag.mass,
        "charge_total": diag.charge,
        "min_c": diag.min_c,
        "max_div_v": diag.max_div_v,
        "max_speed": last.v.max_abs(),
    })
    .to_string())
}

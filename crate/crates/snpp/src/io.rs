//! Snapshot export: a wide CSV table and a little-endian binary container.
//!
//! Binary layout (all integers `u64`, all reals `f64`, little-endian):
//! magic `SNPPFLD1`, `n`, `h`, `epsilon`, field count and length-prefixed UTF-8
//! names, then cell, x-face and y-face index lists (count, then `u32` pairs),
//! then the frame count and per frame `t`, every cell field in name order,
//! the x-face and the y-face velocity values.

use crate::error::{Error, Result};
use crate::grid::{Axis, PerforatedGrid};
use crate::macroscale::MacroRun;
use crate::micro::MicroState;

const MAGIC: &[u8; 8] = b"SNPPFLD1";

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub time: f64,
    /// One vector per cell field, in `FieldFile::names` order.
    pub cell: Vec<Vec<f64>>,
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
}

/// Snapshots of one run, detached from the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldFile {
    pub n: usize,
    pub h: f64,
    pub epsilon: f64,
    pub names: Vec<String>,
    pub cells: Vec<(usize, usize)>,
    pub xfaces: Vec<(usize, usize)>,
    pub yfaces: Vec<(usize, usize)>,
    pub frames: Vec<Frame>,
}

impl FieldFile {
    fn empty(grid: &PerforatedGrid, names: &[&str]) -> Self {
        FieldFile {
            n: grid.n(),
            h: grid.h(),
            epsilon: grid.epsilon(),
            names: names.iter().map(|s| s.to_string()).collect(),
            cells: grid.cells().to_vec(),
            xfaces: grid.faces(Axis::X).faces.clone(),
            yfaces: grid.faces(Axis::Y).faces.clone(),
            frames: Vec::new(),
        }
    }

    pub fn from_micro(grid: &PerforatedGrid, snapshots: &[MicroState]) -> Self {
        let mut f = Self::empty(grid, &["p", "phi", "c_plus", "c_minus"]);
        f.frames = snapshots
            .iter()
            .map(|s| Frame {
                time: s.time,
                cell: [&s.p, &s.phi, &s.c_plus, &s.c_minus]
                    .iter()
                    .map(|x| x.values.clone())
                    .collect(),
                vx: s.v.x.values.clone(),
                vy: s.v.y.values.clone(),
            })
            .collect();
        f
    }

    pub fn from_macro(run: &MacroRun) -> Self {
        let mut f = Self::empty(&run.grid, &["p0", "Phi0", "c0_plus", "c0_minus"]);
        f.frames = run
            .snapshots
            .iter()
            .map(|s| Frame {
                time: s.time,
                cell: [&s.p0, &s.phi0, &s.c0_plus, &s.c0_minus]
                    .iter()
                    .map(|x| x.values.clone())
                    .collect(),
                vx: s.v_bar.x.values.clone(),
                vy: s.v_bar.y.values.clone(),
            })
            .collect();
        f
    }

    /// Columns `t,i,j,entity-kind`, one per cell field, then `v`; blanks where a
    /// field does not live on the entity.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,i,j,entity-kind");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push_str(",v\n");
        let blanks = ",".repeat(self.names.len());
        for fr in &self.frames {
            for (k, &(i, j)) in self.cells.iter().enumerate() {
                out.push_str(&format!("{},{i},{j},cell", fr.time));
                for field in &fr.cell {
                    out.push_str(&format!(",{}", field[k]));
                }
                out.push_str(",\n");
            }
            for (kind, faces, vals) in [
                ("x-face", &self.xfaces, &fr.vx),
                ("y-face", &self.yfaces, &fr.vy),
            ] {
                for (&(i, j), v) in faces.iter().zip(vals) {
                    out.push_str(&format!("{},{i},{j},{kind}{blanks},{v}\n", fr.time));
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        put_u64(&mut b, self.n as u64);
        put_f64(&mut b, self.h);
        put_f64(&mut b, self.epsilon);
        put_u64(&mut b, self.names.len() as u64);
        for n in &self.names {
            put_u64(&mut b, n.len() as u64);
            b.extend_from_slice(n.as_bytes());
        }
        for list in [&self.cells, &self.xfaces, &self.yfaces] {
            put_u64(&mut b, list.len() as u64);
            for &(i, j) in list.iter() {
                b.extend_from_slice(&(i as u32).to_le_bytes());
                b.extend_from_slice(&(j as u32).to_le_bytes());
            }
        }
        put_u64(&mut b, self.frames.len() as u64);
        for fr in &self.frames {
            put_f64(&mut b, fr.time);
            for v in fr.cell.iter().flatten().chain(&fr.vx).chain(&fr.vy) {
                put_f64(&mut b, *v);
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::ParseError("not an snpp field file".into()));
        }
        let n = r.len()?;
        let h = r.f64()?;
        let epsilon = r.f64()?;
        let nf = r.len()?;
        let mut names = Vec::with_capacity(nf);
        for _ in 0..nf {
            let l = r.len()?;
            let s = std::str::from_utf8(r.take(l)?)
                .map_err(|e| Error::ParseError(format!("field name: {e}")))?;
            names.push(s.to_string());
        }
        let mut lists = Vec::with_capacity(3);
        for _ in 0..3 {
            let m = r.len()?;
            let mut l = Vec::with_capacity(m);
            for _ in 0..m {
                l.push((r.u32()? as usize, r.u32()? as usize));
            }
            lists.push(l);
        }
        let yfaces = lists.pop().unwrap();
        let xfaces = lists.pop().unwrap();
        let cells = lists.pop().unwrap();
        let nframes = r.len()?;
        let mut frames = Vec::with_capacity(nframes);
        for _ in 0..nframes {
            let time = r.f64()?;
            let cell = (0..nf)
                .map(|_| r.f64s(cells.len()))
                .collect::<Result<Vec<_>>>()?;
            let vx = r.f64s(xfaces.len())?;
            let vy = r.f64s(yfaces.len())?;
            frames.push(Frame { time, cell, vx, vy });
        }
        if r.pos != bytes.len() {
            return Err(Error::ParseError(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(FieldFile {
            n,
            h,
            epsilon,
            names,
            cells,
            xfaces,
            yfaces,
            frames,
        })
    }
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(b: &mut Vec<u8>, v: f64) {
    b.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(k).filter(|&e| e <= self.b.len());
        let end =
            end.ok_or_else(|| Error::ParseError(format!("truncated at byte {}", self.pos)))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::ParseError(format!("length {v} too large")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, k: usize) -> Result<Vec<f64>> {
        (0..k).map(|_| self.f64()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_perforated_grid, CellGeometry, FieldOnGrid, Placement, VelocityField};

    fn sample() -> (PerforatedGrid, Vec<MicroState>) {
        let g = build_perforated_grid(0.5, CellGeometry::new(0.5, 4)).unwrap();
        let f = |s: f64| FieldOnGrid::from_fn(&g, Placement::CellCenter, move |x, y| s * x + y * y);
        let mut v = VelocityField::zeros(&g);
        v.x.values
            .iter_mut()
            .enumerate()
            .for_each(|(k, x)| *x = k as f64 / 3.0);
        v.y.values
            .iter_mut()
            .enumerate()
            .for_each(|(k, x)| *x = -(k as f64) * 0.1);
        let s = |t: f64| MicroState {
            time: t,
            v: v.clone(),
            p: f(1.0),
            phi: f(-2.0),
            c_plus: f(0.3),
            c_minus: f(1e-17),
        };
        let snaps = vec![s(0.0), s(0.05)];
        (g, snaps)
    }

    #[test]
    fn binary_round_trip() {
        let (g, snaps) = sample();
        let file = FieldFile::from_micro(&g, &snaps);
        let bytes = file.to_bytes();
        assert_eq!(FieldFile::from_bytes(&bytes).unwrap(), file);
        assert!(FieldFile::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(FieldFile::from_bytes(b"garbage!").is_err());
    }

    #[test]
    fn csv_shape() {
        let (g, snaps) = sample();
        let csv = FieldFile::from_micro(&g, &snaps).to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("t,i,j,entity-kind,p,phi,c_plus,c_minus,v")
        );
        let per_frame = g.num_fluid_cells() + g.faces(Axis::X).len() + g.faces(Axis::Y).len();
        assert_eq!(csv.lines().count(), 1 + 2 * per_frame);
        assert!(csv.lines().all(|l| l.split(',').count() == 9));
        let first = csv.lines().nth(1).unwrap();
        assert!(first.starts_with("0,") && first.contains(",cell,") && first.ends_with(','));
        // Display output parses back exactly.
        let v: f64 = first.split(',').nth(4).unwrap().parse().unwrap();
        assert_eq!(v, snaps[0].p.values[0]);
    }
}

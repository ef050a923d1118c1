//! Observation files and legacy VTK output.
//!
//! Observation file layout, all little-endian:
//!
//! ```text
//! magic    b"WCIP"
//! version  u32
//! nodes    u64          number of trace nodes
//! n_steps  u64
//! dt       f64
//! delta    f64          noise level
//! seed     u64
//! zeta     f64          width of the time-weight ramp
//! comps    u8           bit c set when component c is observed
//! crc      u32          CRC32 of the fixed block above
//! per node u64 id, 3 × f64 coordinates
//! mask     ⌈nodes/8⌉ bytes, bit i of byte i/8 for node i
//! crc      u32          CRC32 of the node table and mask
//! payload  n_steps × nodes × 3 f64, step-major
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::mesh::{StructuredGrid, TetraMesh};
use crate::objective::ObservationSet;
use crate::scalar::{Real, Vec3};
use crate::solver::TraceRecord;

pub const MAGIC: [u8; 4] = *b"WCIP";
pub const VERSION: u32 = 1;

/// Serializes observations together with the coordinates of their nodes.
pub fn write_observations<S: Real, W: Write>(
    out: &mut W,
    obs: &ObservationSet<S>,
    grid: &StructuredGrid<S>,
) -> Result<()> {
    let t = &obs.trace;
    let n = t.nodes.len();
    if obs.mask.len() != n || t.values.len() != n * t.n_steps {
        return Err(Error::Contract("observation set is internally inconsistent".into()));
    }
    let mut h = Vec::with_capacity(64 + n * 32);
    h.extend_from_slice(&MAGIC);
    h.extend_from_slice(&VERSION.to_le_bytes());
    h.extend_from_slice(&(n as u64).to_le_bytes());
    h.extend_from_slice(&(t.n_steps as u64).to_le_bytes());
    h.extend_from_slice(&t.dt.as_f64().to_le_bytes());
    h.extend_from_slice(&obs.noise_level.as_f64().to_le_bytes());
    h.extend_from_slice(&obs.seed.to_le_bytes());
    h.extend_from_slice(&obs.zeta.as_f64().to_le_bytes());
    let comps = (0..3).filter(|&c| obs.components[c]).fold(0u8, |b, c| b | 1 << c);
    h.push(comps);
    let crc = crc32fast::hash(&h);
    h.extend_from_slice(&crc.to_le_bytes());
    let table_start = h.len();
    for &id in &t.nodes {
        h.extend_from_slice(&(id as u64).to_le_bytes());
        for x in grid.coords(id) {
            h.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    let mut mask = vec![0u8; n.div_ceil(8)];
    for (i, &m) in obs.mask.iter().enumerate() {
        if m {
            mask[i / 8] |= 1 << (i % 8);
        }
    }
    h.extend_from_slice(&mask);
    let crc = crc32fast::hash(&h[table_start..]);
    h.extend_from_slice(&crc.to_le_bytes());
    out.write_all(&h)?;

    let mut payload = Vec::with_capacity(t.values.len() * 24);
    for v in &t.values {
        for c in v {
            payload.extend_from_slice(&c.as_f64().to_le_bytes());
        }
    }
    out.write_all(&payload)?;
    Ok(())
}

/// Observations read back from a file, with the stored node coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationFile<S> {
    pub obs: ObservationSet<S>,
    pub coords: Vec<Vec3<S>>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated file: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn count(v: u64, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in memory")))
}

/// Parses and verifies an observation file.
pub fn read_observations<S: Real, R: Read>(input: &mut R) -> Result<ObservationFile<S>> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad magic; not an observation file".into()));
    }
    let version = c.u32()?;
    let n = count(c.u64()?, "node count")?;
    let n_steps = count(c.u64()?, "step count")?;
    let dt = c.f64()?;
    let delta = c.f64()?;
    let seed = c.u64()?;
    let zeta = c.f64()?;
    let comps = c.take(1)?[0];
    let fixed_end = c.pos;
    let stored = c.u32()?;
    let computed = crc32fast::hash(&buf[..fixed_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let table_start = c.pos;
    let per_node = n
        .checked_mul(32)
        .ok_or_else(|| Error::Format("node count overflows".into()))?;
    let nodes_raw = c.take(per_node)?;
    let mask_raw = c.take(n.div_ceil(8))?;
    let table_end = c.pos;
    let stored = c.u32()?;
    let computed = crc32fast::hash(&buf[table_start..table_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let expected = n
        .checked_mul(n_steps)
        .and_then(|x| x.checked_mul(24))
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let payload = &buf[c.pos..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {expected}",
            payload.len()
        )));
    }

    let f = |b: &[u8]| f64::from_le_bytes(b.try_into().unwrap());
    let mut nodes = Vec::with_capacity(n);
    let mut coords = Vec::with_capacity(n);
    for rec in nodes_raw.chunks_exact(32) {
        nodes.push(count(u64::from_le_bytes(rec[..8].try_into().unwrap()), "node id")?);
        coords.push([S::lit(f(&rec[8..16])), S::lit(f(&rec[16..24])), S::lit(f(&rec[24..32]))]);
    }
    let mask = (0..n).map(|i| mask_raw[i / 8] >> (i % 8) & 1 == 1).collect();
    let values = payload
        .chunks_exact(24)
        .map(|v| [S::lit(f(&v[..8])), S::lit(f(&v[8..16])), S::lit(f(&v[16..]))])
        .collect();
    let obs = ObservationSet {
        trace: TraceRecord {
            nodes,
            values,
            dt: S::lit(dt),
            n_steps,
        },
        mask,
        components: [comps & 1 != 0, comps & 2 != 0, comps & 4 != 0],
        zeta: S::lit(zeta),
        noise_level: S::lit(delta),
        seed,
    };
    Ok(ObservationFile { obs, coords })
}

impl<S: Real> ObservationFile<S> {
    /// Checks that the stored nodes sit where `grid` puts them.
    pub fn check_grid(&self, grid: &StructuredGrid<S>) -> Result<()> {
        let tol = grid.spacing * S::lit(1e-9);
        for (&id, x) in self.obs.trace.nodes.iter().zip(&self.coords) {
            if id >= grid.len() {
                return Err(Error::Contract(format!("observation node {id} is outside the grid")));
            }
            let y = grid.coords(id);
            if (0..3).any(|d| (x[d] - y[d]).abs() > tol) {
                return Err(Error::Contract(format!(
                    "observation node {id} lies at {x:?} in the file but at {y:?} on the grid"
                )));
            }
        }
        Ok(())
    }
}

/// Point data attached to a VTK file.
pub enum PointData<'a, S> {
    Scalar(&'a str, &'a [S]),
    Vector(&'a str, &'a [Vec3<S>]),
}

/// Legacy ASCII VTK unstructured grid of a tetrahedral mesh.
pub fn write_vtk<S: Real, W: Write>(
    out: &mut W,
    title: &str,
    mesh: &TetraMesh<S>,
    data: &[PointData<'_, S>],
) -> Result<()> {
    let nv = mesh.n_vertices();
    let nt = mesh.n_tets();
    let mut s = String::with_capacity(64 * (nv + nt));
    use std::fmt::Write as _;
    let title: String = title.chars().filter(|c| *c != '\n').take(255).collect();
    let _ = writeln!(s, "# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {nv} double");
    for x in mesh.vertices() {
        let _ = writeln!(s, "{:e} {:e} {:e}", x[0].as_f64(), x[1].as_f64(), x[2].as_f64());
    }
    let _ = writeln!(s, "CELLS {nt} {}", 5 * nt);
    for t in mesh.tets() {
        let _ = writeln!(s, "4 {} {} {} {}", t[0], t[1], t[2], t[3]);
    }
    let _ = writeln!(s, "CELL_TYPES {nt}");
    for _ in 0..nt {
        s.push_str("10\n");
    }
    if !data.is_empty() {
        let _ = writeln!(s, "POINT_DATA {nv}");
    }
    for d in data {
        match d {
            PointData::Scalar(name, v) => {
                if v.len() != nv {
                    return Err(Error::Contract(format!("field {name} has {} values for {nv} points", v.len())));
                }
                let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
                for x in *v {
                    let _ = writeln!(s, "{:e}", x.as_f64());
                }
            }
            PointData::Vector(name, v) => {
                if v.len() != nv {
                    return Err(Error::Contract(format!("field {name} has {} values for {nv} points", v.len())));
                }
                let _ = writeln!(s, "VECTORS {name} double");
                for x in *v {
                    let _ = writeln!(s, "{:e} {:e} {:e}", x[0].as_f64(), x[1].as_f64(), x[2].as_f64());
                }
            }
        }
    }
    out.write_all(s.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::TimeGrid;

    fn grid() -> StructuredGrid<f64> {
        StructuredGrid::new([0.0; 3], [2.0; 3], 0.5)
    }

    fn sample(n_steps: usize) -> ObservationSet<f64> {
        let g = TimeGrid::from_steps(0.125, n_steps);
        let mut t = TraceRecord::zeros(vec![3, 17, 40, 124], &g);
        for (k, v) in t.values.iter_mut().enumerate() {
            *v = [k as f64 * 0.1, -1.0 / (k as f64 + 1.0), f64::MIN_POSITIVE];
        }
        let mut o = ObservationSet::new(t);
        o.mask = vec![true, false, true, true];
        o.components = [false, true, true];
        o.noise_level = 0.1;
        o.seed = 7;
        o.zeta = 0.3;
        o
    }

    fn bytes(o: &ObservationSet<f64>) -> Vec<u8> {
        let mut b = Vec::new();
        write_observations(&mut b, o, &grid()).unwrap();
        b
    }

    #[test]
    fn round_trip_is_exact() {
        for n_steps in [0, 5] {
            let o = sample(n_steps);
            let f = read_observations::<f64, _>(&mut bytes(&o).as_slice()).unwrap();
            assert_eq!(f.obs, o);
            f.check_grid(&grid()).unwrap();
            assert_eq!(f.coords[1], grid().coords(17));
        }
    }

    #[test]
    fn corrupted_header_byte_fails_the_checksum() {
        let b = bytes(&sample(3));
        for pos in [5, 9, 30, 56, 59, 70, 150, 190] {
            let mut bad = b.clone();
            bad[pos] ^= 0x40;
            assert!(matches!(
                read_observations::<f64, _>(&mut bad.as_slice()),
                Err(Error::Checksum { .. })
            ));
        }
    }

    #[test]
    fn malformed_files_are_rejected() {
        let b = bytes(&sample(3));
        let mut magic = b.clone();
        magic[0] = b'X';
        assert!(matches!(read_observations::<f64, _>(&mut magic.as_slice()), Err(Error::Format(_))));
        let short = &b[..b.len() - 1];
        assert!(matches!(read_observations::<f64, _>(&mut &short[..]), Err(Error::Format(_))));
        assert!(matches!(read_observations::<f64, _>(&mut &b[..20]), Err(Error::Format(_))));

        // a consistent header with another version number
        let mut other = b.clone();
        other[4] = 2;
        let crc = crc32fast::hash(&other[..57]);
        other[57..61].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(read_observations::<f64, _>(&mut other.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn node_mismatch_is_detected() {
        let f = read_observations::<f64, _>(&mut bytes(&sample(2)).as_slice()).unwrap();
        let other = StructuredGrid::new([0.0; 3], [3.0; 3], 0.5);
        assert!(f.check_grid(&other).is_err());
    }

    #[test]
    fn vtk_layout() {
        let mesh = TetraMesh::<f64>::structured_box([0.0; 3], [1.0; 3], 1.0).unwrap();
        let eps = vec![1.0; mesh.n_vertices()];
        let e = vec![[0.0, 1.0, 0.0]; mesh.n_vertices()];
        let mut out = Vec::new();
        write_vtk(&mut out, "t", &mesh, &[PointData::Scalar("eps", &eps), PointData::Vector("E", &e)]).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert!(s.starts_with("# vtk DataFile Version 3.0\nt\nASCII\nDATASET UNSTRUCTURED_GRID\nPOINTS 8 double\n"));
        assert!(s.contains("CELLS 6 30\n"));
        assert!(s.contains("CELL_TYPES 6\n"));
        assert!(s.contains("POINT_DATA 8\nSCALARS eps double 1\nLOOKUP_TABLE default\n"));
        assert!(s.contains("VECTORS E double\n"));
        assert!(write_vtk(&mut Vec::new(), "t", &mesh, &[PointData::Scalar("x", &eps[..3])]).is_err());
    }
}

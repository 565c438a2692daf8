//! File formats and atomic writes.
//!
//! Field CSV: header `x,t,<p>_1,..,<p>_n` with one row per node, time
//! outer and space inner. Values use Rust's shortest round-trip formatting.
//!
//! Checkpoint: little-endian binary.
//!
//! | offset | size | content                                           |
//! |--------|------|---------------------------------------------------|
//! | 0      | 8    | magic `CHSTRIP1`                                  |
//! | 8      | 4    | `n` (u32)                                         |
//! | 12     | 4    | `nx` (u32)                                        |
//! | 16     | 4    | `nt` (u32)                                        |
//! | 20     | 4    | topology tag (u32): 0 periodic, 1 window          |
//! | 24     | 24   | three f64: `period, origin, 0` or `t_lo, t_hi, spin_up` |
//! | 48     | 8 N  | payload, N = n (nx + 1) × time nodes, f64         |
//!
//! The payload is component-major, then spatial node, then time node; a
//! periodic grid has `nt` time nodes and a window `nt + 1`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use charstrip_core::fields::{Grid, GridField, TimeTopology};
use serde::Serialize;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CHSTRIP1";
const HEADER_LEN: usize = 48;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Os { path: PathBuf, source: std::io::Error },
    #[error("{path}: not a checkpoint: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

fn os(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Os { path: path.to_path_buf(), source }
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(os(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(os(dir))?;
    tmp.write_all(bytes).map_err(os(path))?;
    tmp.as_file().sync_all().map_err(os(path))?;
    tmp.persist(path).map_err(|e| IoError::Os { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| IoError::Os { path: path.to_path_buf(), source: e.into() })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// CSV of one or more fields on the same grid; `prefixes[i]` names the
/// columns of `fields[i]`.
pub fn fields_csv(fields: &[&GridField], prefixes: &[&str]) -> String {
    assert_eq!(fields.len(), prefixes.len());
    let g = fields[0].grid;
    let mut out = String::from("x,t");
    for (f, p) in fields.iter().zip(prefixes) {
        assert_eq!(f.grid, g, "fields must share a grid");
        for j in 1..=f.n {
            let _ = write!(out, ",{p}_{j}");
        }
    }
    out.push('\n');
    for k in 0..g.ntn() {
        let t = g.t(k);
        for i in 0..g.nxn() {
            let _ = write!(out, "{:?},{:?}", g.x(i), t);
            for f in fields {
                for c in 0..f.n {
                    let _ = write!(out, ",{:?}", f.get(c, i, k));
                }
            }
            out.push('\n');
        }
    }
    out
}

/// CSV with a header row and one row per entry of the equal-length columns.
pub fn columns_csv(names: &[&str], columns: &[&[f64]]) -> String {
    let mut out = names.join(",");
    out.push('\n');
    let rows = columns.first().map_or(0, |c| c.len());
    for r in 0..rows {
        for (i, c) in columns.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{:?}", c[r]);
        }
        out.push('\n');
    }
    out
}

pub fn encode_checkpoint(u: &GridField) -> Vec<u8> {
    let g = u.grid;
    let mut b = Vec::with_capacity(HEADER_LEN + 8 * u.data.len());
    b.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [u.n, g.nx, g.nt] {
        b.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let (tag, p) = match g.topology {
        TimeTopology::Periodic { period, origin } => (0u32, [period, origin, 0.0]),
        TimeTopology::Window { t_lo, t_hi, spin_up } => (1u32, [t_lo, t_hi, spin_up]),
    };
    b.extend_from_slice(&tag.to_le_bytes());
    for v in p {
        b.extend_from_slice(&v.to_le_bytes());
    }
    for v in &u.data {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<GridField, IoError> {
    let bad = |message: &str| IoError::Checkpoint { path: path.to_path_buf(), message: message.into() };
    if bytes.len() < HEADER_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let (n, nx, nt, tag) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
    let p = [f64_at(24), f64_at(32), f64_at(40)];
    let topology = match tag {
        0 => TimeTopology::Periodic { period: p[0], origin: p[1] },
        1 => TimeTopology::Window { t_lo: p[0], t_hi: p[1], spin_up: p[2] },
        _ => return Err(bad("unknown topology tag")),
    };
    let grid = Grid::new(nx, nt, topology).map_err(|e| bad(&e.to_string()))?;
    let len = n * grid.nodes();
    if bytes.len() != HEADER_LEN + 8 * len {
        return Err(bad("payload length does not match the header"));
    }
    let data = (0..len).map(|i| f64_at(HEADER_LEN + 8 * i)).collect();
    GridField::from_data(grid, n, data).map_err(|e| bad(&e.to_string()))
}

pub fn write_checkpoint(path: &Path, u: &GridField) -> Result<(), IoError> {
    write_atomic(path, &encode_checkpoint(u))
}

pub fn read_checkpoint(path: &Path) -> Result<GridField, IoError> {
    let bytes = std::fs::read(path).map_err(os(path))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trips() {
        for topology in
            [TimeTopology::Periodic { period: 6.0, origin: 0.25 }, TimeTopology::Window { t_lo: -1.0, t_hi: 5.0, spin_up: 2.0 }]
        {
            let g = Grid::new(8, 12, topology).unwrap();
            let u = GridField::from_fn(g, 2, |c, x, t| c as f64 + x * t.sin());
            let back = decode_checkpoint(&encode_checkpoint(&u), Path::new("mem")).unwrap();
            assert_eq!(back, u);
        }
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let g = Grid::new(8, 8, TimeTopology::Periodic { period: 1.0, origin: 0.0 }).unwrap();
        let bytes = encode_checkpoint(&GridField::zeros(g, 1));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
        assert!(decode_checkpoint(b"nonsense", Path::new("mem")).is_err());
    }

    #[test]
    fn csv_layout() {
        let g = Grid::new(8, 8, TimeTopology::Periodic { period: 1.0, origin: 0.0 }).unwrap();
        let u = GridField::from_fn(g, 1, |_, x, _| x);
        let csv = fields_csv(&[&u], &["u"]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x,t,u_1");
        assert_eq!(lines.len(), 1 + 9 * 8);
        assert_eq!(lines[2], "0.125,0.0,0.125");
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}

//! WF2D binary spectrum files.
//!
//! Layout, little-endian throughout: magic `WF2D`, `u32` version (1),
//! `u32 nx`, `u32 ny`, `f64 x_min, x_max, y_min, y_max, omega0, B`,
//! `u32 n_states`, then per state an `f64` energy followed by `nx·ny`
//! `(re, im)` pairs in row-major order with x fastest.
//!
//! The format has no room for provenance, so [`write_with_meta`] puts the
//! config hash in a `<file>.meta` text file alongside.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use scarlab::grid::{Grid2D, WaveField};
use scarlab::Complex64;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"WF2D";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum Wf2dError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}: not a WF2D file")]
    BadMagic(PathBuf),
    #[error("{path}: unsupported WF2D version {version}")]
    BadVersion { path: PathBuf, version: u32 },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("states and energies disagree in count or grid")]
    Inconsistent,
}

/// Contents of one WF2D file.
#[derive(Debug, Clone, PartialEq)]
pub struct Wf2d {
    pub grid: Grid2D,
    pub omega0: f64,
    pub b_field: f64,
    pub energies: Vec<f64>,
    pub states: Vec<WaveField>,
}

impl Wf2d {
    pub fn new(omega0: f64, b_field: f64, energies: Vec<f64>, states: Vec<WaveField>) -> Result<Self, Wf2dError> {
        let grid = *states.first().ok_or(Wf2dError::Inconsistent)?.grid();
        if energies.len() != states.len() || states.iter().any(|s| s.grid() != &grid) {
            return Err(Wf2dError::Inconsistent);
        }
        Ok(Self {
            grid,
            omega0,
            b_field,
            energies,
            states,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let g = &self.grid;
        let mut out = Vec::with_capacity(64 + self.states.len() * (8 + 16 * g.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(g.nx() as u32).to_le_bytes());
        out.extend_from_slice(&(g.ny() as u32).to_le_bytes());
        for v in [g.x_min(), g.x_max(), g.y_min(), g.y_max(), self.omega0, self.b_field] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.states.len() as u32).to_le_bytes());
        for (e, psi) in self.energies.iter().zip(&self.states) {
            out.extend_from_slice(&e.to_le_bytes());
            for v in psi.values() {
                out.extend_from_slice(&v.re.to_le_bytes());
                out.extend_from_slice(&v.im.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, Wf2dError> {
        let malformed = |m: &str| Wf2dError::Malformed {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Wf2dError::BadMagic(path.to_path_buf()))?;
        if &magic != MAGIC {
            return Err(Wf2dError::BadMagic(path.to_path_buf()));
        }
        let truncated = || malformed("truncated file");
        let version = read_u32(&mut r).ok_or_else(truncated)?;
        if version != VERSION {
            return Err(Wf2dError::BadVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        let nx = read_u32(&mut r).ok_or_else(truncated)? as usize;
        let ny = read_u32(&mut r).ok_or_else(truncated)? as usize;
        let mut head = [0.0; 6];
        for v in &mut head {
            *v = read_f64(&mut r).ok_or_else(truncated)?;
        }
        let [x_min, x_max, y_min, y_max, omega0, b_field] = head;
        let count = read_u32(&mut r).ok_or_else(truncated)? as usize;
        let grid = Grid2D::from_bounds(nx, ny, x_min, x_max, y_min, y_max).map_err(|e| malformed(&e.to_string()))?;
        let expected = count
            .checked_mul(8 + 16 * grid.len())
            .ok_or_else(|| malformed("state count overflows"))?;
        if r.len() != expected {
            return Err(malformed(&format!("expected {expected} payload bytes, found {}", r.len())));
        }
        let mut energies = Vec::with_capacity(count);
        let mut states = Vec::with_capacity(count);
        for _ in 0..count {
            energies.push(read_f64(&mut r).ok_or_else(truncated)?);
            let mut values = Vec::with_capacity(grid.len());
            for _ in 0..grid.len() {
                let re = read_f64(&mut r).ok_or_else(truncated)?;
                let im = read_f64(&mut r).ok_or_else(truncated)?;
                values.push(Complex64::new(re, im));
            }
            states.push(WaveField::from_values(grid, values).map_err(|e| malformed(&e.to_string()))?);
        }
        Ok(Self {
            grid,
            omega0,
            b_field,
            energies,
            states,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), Wf2dError> {
        let io = |source| Wf2dError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, Wf2dError> {
        let bytes = fs::read(path).map_err(|source| Wf2dError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }
}

fn read_u32(r: &mut &[u8]) -> Option<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Option<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).ok()?;
    Some(f64::from_le_bytes(b))
}

/// Path of the provenance sidecar of a WF2D file.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes the file and its `.meta` sidecar holding `key = value` lines.
pub fn write_with_meta(data: &Wf2d, path: &Path, meta: &[(&str, String)]) -> Result<(), Wf2dError> {
    data.write(path)?;
    let text: String = meta.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    let meta = meta_path(path);
    fs::write(&meta, text).map_err(|source| Wf2dError::Io { path: meta, source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use scarlab::grid::make_grid;

    fn sample() -> Wf2d {
        let grid = Grid2D::new(16, 20, 1.5, 2.0).unwrap();
        let states = (0..3)
            .map(|k| WaveField::from_fn(grid, |x, y| Complex64::new(x * k as f64 + 0.1, y - 1.0 / 3.0)))
            .collect();
        Wf2d::new(1.0, 0.5f64.sqrt(), vec![1.0 / 3.0, 2.0, f64::MIN_POSITIVE], states).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = sample();
        let bytes = a.to_bytes();
        let b = Wf2d::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(b.to_bytes(), bytes);
        for (x, y) in a.energies.iter().zip(&b.energies) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (s, t) in a.states.iter().zip(&b.states) {
            for (u, v) in s.values().iter().zip(t.values()) {
                assert_eq!((u.re.to_bits(), u.im.to_bits()), (v.re.to_bits(), v.im.to_bits()));
            }
        }
        assert_eq!(a.grid, b.grid);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"WF2D");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 16);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 20);
        assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), -1.5);
        assert_eq!(u32::from_le_bytes(bytes[64..68].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 68 + 3 * (8 + 16 * 320));
    }

    #[test]
    fn rejects_damage() {
        let mut bytes = sample().to_bytes();
        assert!(Wf2d::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        bytes[0] = b'X';
        assert!(matches!(Wf2d::from_bytes(&bytes, Path::new("x")), Err(Wf2dError::BadMagic(_))));
        let mut bytes = sample().to_bytes();
        bytes[4] = 2;
        assert!(matches!(Wf2d::from_bytes(&bytes, Path::new("x")), Err(Wf2dError::BadVersion { .. })));
    }

    #[test]
    fn square_grid_survives() {
        let grid = make_grid(16, 16, 3.7).unwrap();
        let psi = WaveField::from_fn(grid, |x, y| Complex64::new((-(x * x + y * y)).exp(), 0.0));
        let a = Wf2d::new(1.0, 0.0, vec![1.0], vec![psi]).unwrap();
        let b = Wf2d::from_bytes(&a.to_bytes(), Path::new("m")).unwrap();
        assert_eq!(a, b);
    }
}

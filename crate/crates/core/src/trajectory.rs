//! Trajectories and the `.pnda` binary bundle format.
//!
//! Layout (little endian): `b"PNDA"`, `u32` version, `u32` C, `u32` T,
//! `u32` dtype flag (0 = f32, 1 = f64), then C×T values row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PNDA";
pub const BUNDLE_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// `values` is channels × timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub values: Array2<f64>,
    pub dt: f64,
    pub t0: f64,
    pub spec_ref: String,
}

impl Trajectory {
    pub fn new(values: Array2<f64>, dt: f64, t0: f64, spec_ref: impl Into<String>) -> Result<Self> {
        if values.ncols() < 2 {
            return Err(Error::invalid("trajectory needs at least 2 timesteps"));
        }
        if !(dt > 0.0) {
            return Err(Error::invalid("dt must be positive"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                index: i,
                detail: "trajectory value is not finite".into(),
            });
        }
        Ok(Self {
            values,
            dt,
            t0,
            spec_ref: spec_ref.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn state(&self, t: usize) -> Vec<f64> {
        self.values.column(t).to_vec()
    }

    pub fn channel(&self, c: usize) -> ArrayView1<'_, f64> {
        self.values.row(c)
    }

    /// Timesteps `[start, end)` as a new trajectory.
    pub fn slice(&self, start: usize, end: usize) -> Trajectory {
        Trajectory {
            values: self.values.slice(ndarray::s![.., start..end]).to_owned(),
            dt: self.dt,
            t0: self.t0 + start as f64 * self.dt,
            spec_ref: self.spec_ref.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F32,
    F64,
}

pub fn encode_values(values: &Array2<f64>, dtype: DType) -> Vec<u8> {
    let (c, t) = values.dim();
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + c * t * width);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(c as u32).to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    let flag: u32 = match dtype {
        DType::F32 => 0,
        DType::F64 => 1,
    };
    buf.extend_from_slice(&flag.to_le_bytes());
    for v in values.iter() {
        match dtype {
            DType::F32 => buf.extend_from_slice(&(*v as f32).to_le_bytes()),
            DType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
        }
    }
    buf
}

fn u32_at(bytes: &[u8], off: usize) -> Result<u32> {
    let s = bytes.get(off..off + 4).ok_or_else(|| Error::Format {
        offset: off as u64,
        detail: "truncated header".into(),
    })?;
    Ok(u32::from_le_bytes(s.try_into().expect("4 bytes")))
}

pub fn decode_values(bytes: &[u8]) -> Result<(Array2<f64>, DType)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic".into(),
        });
    }
    let version = u32_at(bytes, 4)?;
    if version != BUNDLE_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: BUNDLE_VERSION,
        });
    }
    let c = u32_at(bytes, 8)? as usize;
    let t = u32_at(bytes, 12)? as usize;
    let (dtype, width) = match u32_at(bytes, 16)? {
        0 => (DType::F32, 4),
        1 => (DType::F64, 8),
        other => {
            return Err(Error::Format {
                offset: 16,
                detail: format!("unknown dtype flag {other}"),
            })
        }
    };
    let need = HEADER_LEN + c * t * width;
    if bytes.len() != need {
        return Err(Error::Format {
            offset: bytes.len().min(need) as u64,
            detail: format!("expected {need} bytes, found {}", bytes.len()),
        });
    }
    let mut vals = Vec::with_capacity(c * t);
    for (k, chunk) in bytes[HEADER_LEN..].chunks_exact(width).enumerate() {
        let v = match dtype {
            DType::F32 => f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64,
            DType::F64 => f64::from_le_bytes(chunk.try_into().expect("8 bytes")),
        };
        if !v.is_finite() {
            return Err(Error::Format {
                offset: (HEADER_LEN + k * width) as u64,
                detail: "non-finite value".into(),
            });
        }
        vals.push(v);
    }
    let arr = Array2::from_shape_vec((c, t), vals).map_err(|e| Error::Format {
        offset: 8,
        detail: e.to_string(),
    })?;
    Ok((arr, dtype))
}

pub fn write_values(path: &Path, values: &Array2<f64>, dtype: DType) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_values(values, dtype))?;
    Ok(())
}

pub fn read_values(path: &Path) -> Result<(Array2<f64>, DType)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    decode_values(&fs::read(path)?)
}

/// JSON written next to each `.pnda` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub spec_ref: String,
    pub dt: f64,
    pub t0: f64,
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

pub fn write_trajectory(
    path: &Path,
    traj: &Trajectory,
    extra: serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    write_values(path, &traj.values, DType::F64)?;
    let side = Sidecar {
        spec_ref: traj.spec_ref.clone(),
        dt: traj.dt,
        t0: traj.t0,
        extra,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<(Trajectory, Sidecar)> {
    let (values, _) = read_values(path)?;
    let sp = sidecar_path(path);
    if !sp.exists() {
        return Err(Error::MissingArtifact(sp));
    }
    let side: Sidecar = serde_json::from_str(&fs::read_to_string(&sp)?)?;
    let traj = Trajectory::new(values, side.dt, side.t0, side.spec_ref.clone())?;
    Ok((traj, side))
}

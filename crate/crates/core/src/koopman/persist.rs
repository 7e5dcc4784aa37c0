use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::{EigenvalueSet, KoopmanModel, LiftTable, N_OUTPUTS};
use crate::error::{Error, Result};
use crate::io::{BinReader, BinWriter};

const MODEL_MAGIC: &[u8; 8] = b"KMPCMODL";
const MODEL_VERSION: u32 = 1;

/// Binary layout: magic, version, Ts, N_y, N_Λ, k, eigenvalues, B
/// (row-major), then the lift table as sample count, trajectory offsets,
/// points and lifted vectors. `A` and `C` are rebuilt from the eigenvalues.
pub fn write_model<W: Write>(m: &KoopmanModel, out: W) -> Result<W> {
    let mut w = BinWriter::new(out);
    w.bytes(MODEL_MAGIC)?;
    w.u32(MODEL_VERSION)?;
    w.f64(m.ts)?;
    w.u64(N_OUTPUTS as u64)?;
    w.u64(m.n_lambda() as u64)?;
    w.u64(m.k_neighbors as u64)?;
    w.f64s(m.eigenvalues.as_slice())?;
    for r in 0..m.b.nrows() {
        for c in 0..m.b.ncols() {
            w.f64(m.b[(r, c)])?;
        }
    }
    let t = &m.lift_table;
    w.u64(t.len() as u64)?;
    w.u64(t.offsets.len() as u64)?;
    for o in &t.offsets {
        w.u64(*o as u64)?;
    }
    for p in &t.points {
        w.f64s(p)?;
    }
    w.f64s(&t.vectors)?;
    w.finish()
}

pub fn read_model<R: Read>(input: R) -> Result<KoopmanModel> {
    let mut r = BinReader::new(input);
    r.expect_magic(MODEL_MAGIC)?;
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let ts = r.f64()?;
    let n_y = r.count(16, "output")?;
    if n_y != N_OUTPUTS {
        return Err(Error::Format(format!("model has {n_y} outputs, expected {N_OUTPUTS}")));
    }
    let n_lambda = r.count(1 << 16, "eigenvalue")?;
    let k_neighbors = r.count(1 << 20, "neighbor")?;
    let eigenvalues = EigenvalueSet::new(r.f64s(n_lambda)?).map_err(|e| Error::Format(e.to_string()))?;
    let n_z = n_y * n_lambda;
    let b = DMatrix::from_row_slice(n_z, 4, &r.f64s(n_z * 4)?);
    let n_points = r.count(1 << 32, "lift sample")?;
    let n_offsets = r.count(1 << 32, "trajectory offset")?;
    let offsets = (0..n_offsets).map(|_| r.u64().map(|o| o as usize)).collect::<Result<Vec<_>>>()?;
    if offsets.first() != Some(&0) || offsets.last() != Some(&n_points) || offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Format("lift table offsets are inconsistent".into()));
    }
    let points = (0..n_points).map(|_| r.f64s(3).map(|v| [v[0], v[1], v[2]])).collect::<Result<Vec<_>>>()?;
    let vectors = r.f64s(n_points * n_z)?;
    r.expect_eof()?;
    let table = LiftTable { points, vectors, dim: n_z, offsets };
    KoopmanModel::new(eigenvalues, b, table, ts, k_neighbors).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_model(m: &KoopmanModel, path: &Path) -> Result<()> {
    write_model(m, std::io::BufWriter::new(std::fs::File::create(path)?))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<KoopmanModel> {
    read_model(std::io::BufReader::new(std::fs::File::open(path)?))
}

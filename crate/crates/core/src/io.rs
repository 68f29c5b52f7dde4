//! Little-endian binary dumps: matrices (`DIVM`), embedding sets (`DIVS`)
//! and parameter checkpoints (`DIVP`). Payloads are stored as f32.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::similarity::EmbeddingSet;
use crate::tensor::Matrix;

pub const MATRIX_MAGIC: &[u8; 4] = b"DIVM";
pub const SET_MAGIC: &[u8; 4] = b"DIVS";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DIVP";
const CHECKPOINT_VERSION: u32 = 1;
/// Guards against absurd allocations from corrupted headers.
const MAX_ELEMENTS: usize = 1 << 31;

fn write_u32<W: Write>(w: &mut W, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::format(what, format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4], what: &'static str) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::format(what, format!("truncated: {e}")))?;
    if &b != magic {
        return Err(Error::format(
            what,
            format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&b), String::from_utf8_lossy(magic)),
        ));
    }
    Ok(())
}

fn write_payload<W: Write>(w: &mut W, m: &Matrix) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(m.len() * 4);
    for &x in m.as_slice() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_payload<R: Read>(r: &mut R, rows: usize, cols: usize, what: &'static str) -> Result<Matrix> {
    let n = rows
        .checked_mul(cols)
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| Error::format(what, format!("implausible shape {rows}x{cols}")))?;
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::format(what, format!("truncated payload: {e}")))?;
    let data: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::format(what, "non-finite payload"));
    }
    Matrix::from_vec(rows, cols, data)
}

/// `DIVM`, u32 rows, u32 cols, row-major f32 payload.
pub fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> std::io::Result<()> {
    w.write_all(MATRIX_MAGIC)?;
    write_u32(w, m.rows())?;
    write_u32(w, m.cols())?;
    write_payload(w, m)
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<Matrix> {
    expect_magic(r, MATRIX_MAGIC, "matrix")?;
    let rows = read_u32(r, "matrix")?;
    let cols = read_u32(r, "matrix")?;
    read_payload(r, rows, cols, "matrix")
}

/// `DIVS`, u32 K, u32 D, f32 payload.
pub fn write_set<W: Write>(w: &mut W, s: &EmbeddingSet) -> std::io::Result<()> {
    w.write_all(SET_MAGIC)?;
    write_u32(w, s.len())?;
    write_u32(w, s.dim())?;
    write_payload(w, s.elems())
}

pub fn read_set<R: Read>(r: &mut R) -> Result<EmbeddingSet> {
    expect_magic(r, SET_MAGIC, "embedding set")?;
    let k = read_u32(r, "embedding set")?;
    let d = read_u32(r, "embedding set")?;
    let m = read_payload(r, k, d, "embedding set")?;
    EmbeddingSet::new(m).map_err(|e| Error::format("embedding set", e.to_string()))
}

/// u32 count, the sets, then a parallel table of u32 ids.
pub fn write_set_corpus<W: Write>(w: &mut W, sets: &[EmbeddingSet], ids: &[u32]) -> Result<()> {
    if sets.len() != ids.len() {
        return Err(Error::shape(
            "write_set_corpus",
            format!("{} sets but {} ids", sets.len(), ids.len()),
        ));
    }
    let io = |e| Error::format("set corpus", format!("write failed: {e}"));
    write_u32(w, sets.len()).map_err(io)?;
    for s in sets {
        write_set(w, s).map_err(io)?;
    }
    for &id in ids {
        w.write_all(&id.to_le_bytes()).map_err(io)?;
    }
    Ok(())
}

pub fn read_set_corpus<R: Read>(r: &mut R) -> Result<(Vec<EmbeddingSet>, Vec<u32>)> {
    let n = read_u32(r, "set corpus")?;
    let sets = (0..n).map(|_| read_set(r)).collect::<Result<Vec<_>>>()?;
    let ids = (0..n)
        .map(|_| read_u32(r, "set corpus").map(|v| v as u32))
        .collect::<Result<Vec<_>>>()?;
    Ok((sets, ids))
}

/// A named tensor table with a JSON configuration block.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: ParamStore,
}

impl Checkpoint {
    /// `DIVP`, u32 version, u32 config length, config JSON, u32 tensor
    /// count, then per tensor: u32 name length, UTF-8 name, u32 rows,
    /// u32 cols, f32 payload.
    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let json = serde_json::to_vec(&self.config).map_err(std::io::Error::other)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(w, CHECKPOINT_VERSION as usize)?;
        write_u32(w, json.len())?;
        w.write_all(&json)?;
        write_u32(w, self.tensors.len())?;
        for (name, m) in self.tensors.iter() {
            write_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_u32(w, m.rows())?;
            write_u32(w, m.cols())?;
            write_payload(w, m)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Checkpoint> {
        const WHAT: &str = "checkpoint";
        expect_magic(r, CHECKPOINT_MAGIC, WHAT)?;
        let version = read_u32(r, WHAT)?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::format(WHAT, format!("unsupported version {version}")));
        }
        let len = read_u32(r, WHAT)?;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)
            .map_err(|e| Error::format(WHAT, format!("truncated config: {e}")))?;
        let config = serde_json::from_slice(&json).map_err(|e| Error::format(WHAT, e.to_string()))?;
        let count = read_u32(r, WHAT)?;
        let mut tensors = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(r, WHAT)?;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|e| Error::format(WHAT, format!("truncated name: {e}")))?;
            let name = String::from_utf8(name).map_err(|e| Error::format(WHAT, e.to_string()))?;
            let rows = read_u32(r, WHAT)?;
            let cols = read_u32(r, WHAT)?;
            tensors.insert(name, read_payload(r, rows, cols, WHAT)?);
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write(&mut bytes).map_err(|e| Error::io(path, e))?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::read(&mut bytes.as_slice())
    }
}

/// Writes through a sibling temp file so a crash never leaves a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

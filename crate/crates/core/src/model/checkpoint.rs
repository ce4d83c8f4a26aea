//! Binary checkpoint container.
//!
//! Layout (little endian): `b"VLRD"`, `u32` version, `u64` length + UTF-8
//! config text, `u64` length + UTF-8 metadata text (`key=value` lines),
//! `u64` tensor count, then per tensor `u32` name length, name, `u64` rows,
//! `u64` cols and `rows * cols` `f64` values. A `<file>.txt` sidecar lists
//! the same names and shapes in plain text.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{ModelConfig, ModelError};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VLRD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Matrix)>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_str(&mut w, &ckpt.config.to_text())?;
    let meta: String = ckpt.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    write_str(&mut w, &meta)?;
    w.write_all(&(ckpt.tensors.len() as u64).to_le_bytes())?;
    for (name, m) in &ckpt.tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.rows() as u64).to_le_bytes())?;
        w.write_all(&(m.cols() as u64).to_le_bytes())?;
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;

    let mut side = BufWriter::new(File::create(sidecar_path(path))?);
    writeln!(side, "format VLRD v{CHECKPOINT_VERSION}")?;
    writeln!(side, "[config]")?;
    side.write_all(ckpt.config.to_text().as_bytes())?;
    writeln!(side, "[meta]")?;
    side.write_all(meta.as_bytes())?;
    writeln!(side, "[tensors]")?;
    for (name, m) in &ckpt.tensors {
        writeln!(side, "{name} {}x{}", m.rows(), m.cols())?;
    }
    side.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| ModelError::BadMagic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let config = ModelConfig::from_text(&read_str(&mut r)?)?;
    let mut meta = BTreeMap::new();
    for line in read_str(&mut r)?.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| corrupt("malformed metadata line"))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let name = String::from_utf8(read_bytes(&mut r, len)?).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let rows = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let cols = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let n = rows.checked_mul(cols).filter(|&n| n <= 1 << 32).ok_or_else(|| corrupt("tensor too large"))?;
        let raw = read_bytes(&mut r, n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push((name, Matrix::from_vec(rows, cols, data)));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(corrupt("trailing bytes"));
    }
    Ok(Checkpoint { config, tensors, meta })
}

fn corrupt(why: &str) -> ModelError {
    ModelError::CorruptCheckpoint(why.to_string())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], ModelError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| corrupt("truncated file"))?;
    Ok(b)
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>, ModelError> {
    let mut b = Vec::new();
    r.take(n as u64).read_to_end(&mut b)?;
    if b.len() != n {
        return Err(corrupt("truncated file"));
    }
    Ok(b)
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u64).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> Result<String, ModelError> {
    let len = u64::from_le_bytes(read_array(r)?) as usize;
    if len > 1 << 24 {
        return Err(corrupt("text section too large"));
    }
    String::from_utf8(read_bytes(r, len)?).map_err(|_| corrupt("text section is not UTF-8"))
}

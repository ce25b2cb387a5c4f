//! Binary tensor container.
//!
//! ```text
//! magic "KDQC" | version u32 | count u32
//! per tensor: name_len u32 | name UTF-8 | rank u32 | extents u64 × rank | values f32 × Π extents
//! ```
//!
//! All integers and floats are little-endian; values are row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use kdqat_core::{EncoderConfig, EncoderModel, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{io_err, HarnessError, Result};

pub const MAGIC: [u8; 4] = *b"KDQC";
pub const VERSION: u32 = 1;

pub type Named = Vec<(String, Tensor)>;

pub fn write_to<W: Write>(w: &mut W, tensors: &[(String, Tensor)]) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, t) in tensors {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &e in t.shape() {
            w.write_u64::<LittleEndian>(e as u64)?;
        }
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn corrupt(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Checkpoint(e.to_string())
}

pub fn read_from<R: Read>(r: &mut R) -> Result<Named> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(corrupt)?;
    if magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(corrupt)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let count = r.read_u32::<LittleEndian>().map_err(corrupt)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(corrupt)?;
        let name = String::from_utf8(name).map_err(corrupt)?;
        let rank = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>().map_err(corrupt)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| corrupt(format!("{name}: extents overflow")))?;
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data)
            .map_err(|e| corrupt(format!("{name}: {e}")))?;
        out.push((name, Tensor::new(shape, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(corrupt)? != 0 {
        return Err(corrupt("trailing bytes after the last tensor"));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    // Write to a sibling and rename, so a crash never leaves half a file.
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, tensors).map_err(io_err(&tmp))?;
    w.into_inner().map_err(|e| io_err(&tmp)(e.into_error()))?.sync_all().map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<Named> {
    let file = File::open(path).map_err(io_err(path))?;
    read_from(&mut BufReader::new(file)).map_err(|e| match e {
        HarnessError::Checkpoint(m) => HarnessError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn model_tensors(model: &EncoderModel) -> Named {
    model.param_names().into_iter().zip(model.params().into_iter().cloned()).collect()
}

/// Rebuilds a model, requiring names and shapes to match `config`.
pub fn model_from_tensors(config: EncoderConfig, tensors: Named) -> Result<EncoderModel> {
    let names = EncoderModel::init(config, 0.0, &mut ChaCha8Rng::seed_from_u64(0))?.param_names();
    let got: Vec<&str> = tensors.iter().map(|(n, _)| n.as_str()).collect();
    if got != names {
        return Err(HarnessError::Config(format!(
            "checkpoint holds {} tensors that do not match the configured architecture ({} expected)",
            got.len(),
            names.len()
        )));
    }
    EncoderModel::from_params(config, tensors.into_iter().map(|(_, t)| t).collect())
        .map_err(|e| HarnessError::Config(format!("checkpoint does not match the configured architecture: {e}")))
}

pub fn save_model(path: &Path, model: &EncoderModel) -> Result<()> {
    save(path, &model_tensors(model))
}

pub fn load_model(path: &Path, config: EncoderConfig) -> Result<EncoderModel> {
    model_from_tensors(config, load(path)?)
}

//! Binary parameter files: magic, version, JSON header, then raw
//! little-endian `f64` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MlpSpec, ParamSet};
use crate::{Error, Result};

pub const PARAMS_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TSNN";

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: MlpSpec,
    init: String,
}

pub fn write_params_to<W: Write>(spec: &MlpSpec, params: &ParamSet, mut w: W) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        format_version: PARAMS_FORMAT_VERSION,
        spec: spec.clone(),
        init: params.init.clone(),
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&PARAMS_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(params.values.len() as u64).to_le_bytes())?;
    for v in &params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_corrupt<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corrupt(format!("truncated parameter file ({what})")),
        _ => Error::Io(e),
    })
}

pub fn read_params_from<R: Read>(mut r: R) -> Result<(MlpSpec, ParamSet)> {
    let mut magic = [0u8; 4];
    read_exact_or_corrupt(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Corrupt("not a parameter file".into()));
    }
    let mut word = [0u8; 4];
    read_exact_or_corrupt(&mut r, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != PARAMS_FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: PARAMS_FORMAT_VERSION,
        });
    }
    read_exact_or_corrupt(&mut r, &mut word, "header length")?;
    let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
    read_exact_or_corrupt(&mut r, &mut header, "header")?;
    let header: Header =
        serde_json::from_slice(&header).map_err(|e| Error::Corrupt(format!("bad header: {e}")))?;
    header.spec.validate()?;
    let mut count = [0u8; 8];
    read_exact_or_corrupt(&mut r, &mut count, "count")?;
    let count = u64::from_le_bytes(count) as usize;
    if count != header.spec.num_params() {
        return Err(Error::Corrupt(format!(
            "file holds {count} values, spec needs {}",
            header.spec.num_params()
        )));
    }
    let mut raw = vec![0u8; count * 8];
    read_exact_or_corrupt(&mut r, &mut raw, "values")?;
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Corrupt("trailing bytes after parameters".into()));
    }
    Ok((
        header.spec,
        ParamSet {
            values,
            init: header.init,
        },
    ))
}

pub fn save_params(path: impl AsRef<Path>, spec: &MlpSpec, params: &ParamSet) -> Result<()> {
    write_params_to(spec, params, BufWriter::new(File::create(path)?))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<(MlpSpec, ParamSet)> {
    read_params_from(BufReader::new(File::open(path)?))
}

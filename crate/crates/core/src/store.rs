//! Container format shared by checkpoints, banks and plans.
//!
//! ```text
//! {"format":"stv-checkpoint","version":1,"payload_len":N, ...}\n
//! <N little-endian f64 values>
//! ```
//!
//! The first line is a JSON header; everything after the newline is the raw
//! payload. Values round-trip bit-exactly.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    format: String,
    version: u32,
    payload_len: usize,
    #[serde(flatten)]
    header: H,
}

pub fn write_container<H: Serialize>(
    path: &Path,
    format: &str,
    version: u32,
    header: &H,
    payload: &[f64],
) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let env = Envelope {
        format: format.to_string(),
        version,
        payload_len: payload.len(),
        header,
    };
    let mut buf = serde_json::to_vec(&env)?;
    buf.push(b'\n');
    buf.reserve(payload.len() * 8);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_container<H: DeserializeOwned>(
    path: &Path,
    format: &str,
    version: u32,
) -> Result<(H, Vec<f64>)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format(format!(
            "{}: missing header line",
            path.display()
        )));
    }
    let env: Envelope<H> = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;
    if env.format != format {
        return Err(Error::Format(format!(
            "{}: expected format {format}, found {}",
            path.display(),
            env.format
        )));
    }
    if env.version != version {
        return Err(Error::Format(format!(
            "{}: unsupported {format} version {} (expected {version})",
            path.display(),
            env.version
        )));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != env.payload_len * 8 {
        return Err(Error::Format(format!(
            "{}: payload has {} bytes, header promises {} values",
            path.display(),
            bytes.len(),
            env.payload_len
        )));
    }
    let payload = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((env.header, payload))
}

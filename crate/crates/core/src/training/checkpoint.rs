//! Parameter checkpoints: a text header naming each segment and its shape,
//! then every segment's values as little-endian `f64`.
//!
//! ```text
//! tila-checkpoint v1
//! segment img.patch.w 64 64
//! ...
//! end
//! <payload>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

const MAGIC: &str = "tila-checkpoint v1";

pub fn checkpoint_bytes(params: &ParamStore) -> Vec<u8> {
    let mut out = format!("{MAGIC}\n").into_bytes();
    for s in params.segments() {
        out.extend_from_slice(format!("segment {} {} {}\n", s.name, s.rows, s.cols).as_bytes());
    }
    out.extend_from_slice(b"end\n");
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<ParamStore> {
    let bad = |m: String| Error::format(path, m);
    let mut pos = 0;
    let mut next_line = || -> Result<String> {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "truncated header"))?;
        pos += nl + 1;
        String::from_utf8(rest[..nl].to_vec()).map_err(|_| Error::format(path, "header is not UTF-8"))
    };
    if next_line()? != MAGIC {
        return Err(bad("not a tila checkpoint".into()));
    }
    let mut shapes = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let f: Vec<&str> = line.split(' ').collect();
        match f.as_slice() {
            ["segment", name, r, c] => {
                let r: usize = r.parse().map_err(|_| bad(format!("bad rows in {line:?}")))?;
                let c: usize = c.parse().map_err(|_| bad(format!("bad cols in {line:?}")))?;
                shapes.push((name.to_string(), r, c));
            }
            _ => return Err(bad(format!("unexpected header line {line:?}"))),
        }
    }
    let payload = &bytes[pos..];
    let total: usize = shapes.iter().map(|(_, r, c)| r * c).sum();
    if payload.len() != total * 8 {
        return Err(bad(format!(
            "payload has {} bytes, header describes {}",
            payload.len(),
            total * 8
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")));
    let mut store = ParamStore::new();
    for (name, r, c) in shapes {
        let data: Vec<f64> = values.by_ref().take(r * c).collect();
        store
            .insert(&name, r, c, data)
            .map_err(|e| bad(e.to_string()))?;
    }
    Ok(store)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(path: &Path, params: &ParamStore) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(params))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::domain(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{init_params, EncoderConfig};

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let params = init_params(&EncoderConfig::default()).unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&a, &params).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded.values(), params.values());
        save_checkpoint(&b, &loaded).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert!(!dir.path().join(".a.ckpt.tmp").exists());
    }

    #[test]
    fn rejects_corruption() {
        let params = init_params(&EncoderConfig::default()).unwrap();
        let mut bytes = checkpoint_bytes(&params);
        bytes.pop();
        assert!(parse_checkpoint(&bytes, Path::new("x")).is_err());
        assert!(parse_checkpoint(b"hello\n", Path::new("x")).is_err());
    }
}

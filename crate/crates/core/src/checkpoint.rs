//! Binary checkpoints: a kind tag, a JSON config echo, and every parameter
//! tensor by name, sealed with a SHA-256 digest. Writes are atomic.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"MVCKPT01";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config_json: String,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new<C: Serialize>(kind: &str, config: &C, ps: &ParamStore) -> Result<Self> {
        let config_json = serde_json::to_string_pretty(config)
            .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
        Ok(Checkpoint {
            kind: kind.to_string(),
            config_json,
            params: ps.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        })
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_str(&self.config_json)
            .map_err(|e| Error::Checkpoint(format!("config echo: {e}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Copies every stored tensor into `ps`, which must have exactly the same
    /// names and shapes.
    pub fn restore(&self, ps: &mut ParamStore) -> Result<()> {
        if self.params.len() != ps.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                ps.len()
            )));
        }
        for (name, value) in &self.params {
            let id = ps
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            if ps.value(id).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} vs model {:?}",
                    value.shape(),
                    ps.value(id).shape()
                )));
            }
            *ps.value_mut(id) = value.clone();
        }
        Ok(())
    }

    fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_bytes(&mut buf, self.kind.as_bytes());
        put_bytes(&mut buf, self.config_json.as_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_bytes(&mut buf, name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode(&buf).map_err(|m| Error::Checkpoint(format!("{}: {m}", path.display())))
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    buf.extend_from_slice(&(b.len() as u32).to_le_bytes());
    buf.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err("truncated".into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid utf-8".to_string())
    }
}

fn decode(buf: &[u8]) -> std::result::Result<Checkpoint, String> {
    if buf.len() < MAGIC.len() + 32 || &buf[..MAGIC.len()] != MAGIC {
        return Err("not a checkpoint file".into());
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err("digest mismatch (corrupt file)".into());
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let kind = r.string()?;
    let config_json = r.string()?;
    let n = r.u32()?;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.string()?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        let len: usize = shape.iter().product();
        let data = r
            .take(8 * len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name, Tensor::new(&shape, data)));
    }
    if r.pos != body.len() {
        return Err("trailing bytes".into());
    }
    Ok(Checkpoint {
        kind,
        config_json,
        params,
    })
}

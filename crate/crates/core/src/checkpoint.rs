//! Binary parameter archive.
//!
//! Layout (little endian): magic, format version, model config as JSON,
//! then every parameter in visitation order as `(name, length, f32 values)`,
//! then a SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::models::{ModelBundle, ModelConfig};
use crate::nn::Module;

const MAGIC: &[u8; 8] = b"AASSLCKP";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_bytes(&mut buf, &serde_json::to_vec(&bundle.config)?);
    let mut params = Vec::new();
    bundle.visit("", &mut |name, p| params.push((name.to_string(), p.value.clone())));
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, values) in params {
        put_bytes(&mut buf, name.as_bytes());
        buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(path, buf).at(path)
}

/// Loads a bundle whose architecture comes from the archive itself.
pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let (config, params) = read_archive(path)?;
    let mut bundle = ModelBundle::new(config, 0)?;
    assign(&mut bundle, params)?;
    Ok(bundle)
}

/// Loads parameters into an existing bundle, refusing archives written for
/// a different architecture.
pub fn load_into(bundle: &mut ModelBundle, path: &Path) -> Result<()> {
    let (config, params) = read_archive(path)?;
    let (expected, found) = (bundle.config.fingerprint(), config.fingerprint());
    if expected != found {
        return Err(Error::FingerprintMismatch { expected, found });
    }
    assign(bundle, params)
}

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(bytes);
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| Error::CorruptArchive("unexpected end of archive".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::CorruptArchive("length overflow".into()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()?;
        self.take(n)
    }
}

type Params = Vec<(String, Vec<f32>)>;

fn read_archive(path: &Path) -> Result<(ModelConfig, Params)> {
    let data = fs::read(path).at(path)?;
    if data.len() < MAGIC.len() + DIGEST_LEN || &data[..MAGIC.len()] != MAGIC {
        return Err(Error::CorruptArchive(format!("{}: not a checkpoint", path.display())));
    }
    let (body, digest) = data.split_at(data.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptArchive(format!("{}: checksum mismatch", path.display())));
    }
    let mut r = Reader {
        data: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CorruptArchive(format!("unsupported checkpoint version {version}")));
    }
    let config: ModelConfig = serde_json::from_slice(r.bytes()?)
        .map_err(|e| Error::CorruptArchive(format!("model config: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::CorruptArchive("parameter name is not UTF-8".into()))?;
        let len = r.u64()?;
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::CorruptArchive("length overflow".into()))?)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.push((name, values));
    }
    if r.pos != body.len() {
        return Err(Error::CorruptArchive("trailing bytes".into()));
    }
    Ok((config, params))
}

fn assign(bundle: &mut ModelBundle, params: Params) -> Result<()> {
    let mut it = params.into_iter();
    let mut err = None;
    bundle.visit_mut("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        match it.next() {
            Some((n, v)) if n == name && v.len() == p.value.len() => p.value = v,
            Some((n, _)) => err = Some(format!("parameter {n} does not match {name}")),
            None => err = Some(format!("archive ends before {name}")),
        }
    });
    if err.is_none() && it.next().is_some() {
        err = Some("archive has extra parameters".into());
    }
    err.map_or(Ok(()), |e| Err(Error::CorruptArchive(e)))
}

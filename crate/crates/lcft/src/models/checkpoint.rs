//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"LCKP"                          4 bytes
//! version  u32 = 1
//! kind     u8: 0 = lr, 1 = wide-deep-lite, 2 = din-lite
//! user_vocab, item_vocab, cat_vocab, embed_dim   u64 each
//! hidden_len u32, then hidden widths u64 each
//! array_count u32, then per array:
//!   name_len u32, name (UTF-8)
//!   array_kind u8: 0 = dense, 1 = embedding
//!   ndims u32, dims u64 each
//!   payload  f64 little-endian, product(dims) values
//! ```
//!
//! Arrays are written in sorted-name order, so identical parameters always
//! produce identical bytes.

use std::fs;
use std::path::Path;

use crate::kernel::{ParamArrayKind, ParamSet, Tensor};

use super::{ModelError, ModelKind, ModelParams, ModelSpec};

const MAGIC: &[u8; 4] = b"LCKP";
const VERSION: u32 = 1;

fn kind_tag(kind: ModelKind) -> u8 {
    match kind {
        ModelKind::Lr => 0,
        ModelKind::WideDeepLite => 1,
        ModelKind::DinLite => 2,
    }
}

fn kind_from_tag(tag: u8) -> Result<ModelKind, ModelError> {
    match tag {
        0 => Ok(ModelKind::Lr),
        1 => Ok(ModelKind::WideDeepLite),
        2 => Ok(ModelKind::DinLite),
        other => Err(ModelError::Checkpoint(format!("unknown model tag {other}"))),
    }
}

/// Serializes parameters to the checkpoint layout.
pub fn checkpoint_bytes(params: &ModelParams) -> Vec<u8> {
    let spec = params.spec();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind_tag(spec.kind));
    for v in [
        spec.user_vocab,
        spec.item_vocab,
        spec.cat_vocab,
        spec.embed_dim,
    ] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&(spec.hidden.len() as u32).to_le_bytes());
    for &h in &spec.hidden {
        out.extend_from_slice(&(h as u64).to_le_bytes());
    }
    out.extend_from_slice(&(params.param_set().len() as u32).to_le_bytes());
    for (name, tensor, kind) in params.param_set().iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(match kind {
            ParamArrayKind::Dense => 0,
            ParamArrayKind::Embedding => 1,
        });
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<(), ModelError> {
    fs::write(path, checkpoint_bytes(params)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.at + n > self.bytes.len() {
            return Err(ModelError::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let kind = kind_from_tag(r.u8()?)?;
    let user_vocab = r.u64()? as usize;
    let item_vocab = r.u64()? as usize;
    let cat_vocab = r.u64()? as usize;
    let embed_dim = r.u64()? as usize;
    let hidden_len = r.u32()? as usize;
    let mut hidden = Vec::with_capacity(hidden_len);
    for _ in 0..hidden_len {
        hidden.push(r.u64()? as usize);
    }
    let spec = ModelSpec {
        kind,
        user_vocab,
        item_vocab,
        cat_vocab,
        embed_dim,
        hidden,
    };
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ModelError::Checkpoint("non-UTF-8 array name".into()))?
            .to_string();
        let array_kind = match r.u8()? {
            0 => ParamArrayKind::Dense,
            1 => ParamArrayKind::Embedding,
            other => {
                return Err(ModelError::Checkpoint(format!(
                    "unknown array kind {other}"
                )))
            }
        };
        let ndims = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(r.u64()? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f64()?);
        }
        let tensor = Tensor::from_vec(&dims, data)
            .map_err(|e| ModelError::Checkpoint(format!("array '{name}': {e}")))?;
        params.insert(&name, tensor, array_kind);
    }
    if r.at != bytes.len() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    Ok(ModelParams::from_parts(spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_every_bit() {
        let spec = ModelSpec {
            kind: ModelKind::DinLite,
            user_vocab: 3,
            item_vocab: 5,
            cat_vocab: 2,
            embed_dim: 4,
            hidden: vec![6, 3],
        };
        let params = ModelParams::init(&spec, 123);
        let dir = std::env::temp_dir().join("lcft-ckpt-tests");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.bin");
        save_checkpoint(&path, &params).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, params);
        // Same params, same bytes.
        assert_eq!(checkpoint_bytes(&back), checkpoint_bytes(&params));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = std::env::temp_dir().join("lcft-ckpt-tests");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.bin");
        fs::write(&path, b"nope").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::Checkpoint(_))
        ));

        let spec = ModelSpec::new(ModelKind::Lr, 2, 2, 2);
        let params = ModelParams::init(&spec, 1);
        let mut bytes = checkpoint_bytes(&params);
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::Checkpoint(_))
        ));
    }
}

//! Named-tensor checkpoint container.
//!
//! Layout: `MCKPT1`, u32-prefixed config JSON, u32 tensor count, then per
//! tensor a u32-prefixed name, u32 rank, u32 dims and little-endian f32
//! values, then the optional metadata trailer. Tensors appear in the order
//! of [`EstimatorParams::tensors`].

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::binfmt::{write_meta, Reader};
use crate::error::{Error, Result};

use super::{EstimatorConfig, EstimatorParams};

const MAGIC: &[u8; 6] = b"MCKPT1";

/// Serialises to the checkpoint byte layout.
pub fn to_bytes(params: &EstimatorParams, meta: Option<&str>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let cfg = serde_json::to_string(&params.config).expect("config serialises");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &s in &t.shape {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for &v in t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_meta(&mut out, meta).expect("writing to a Vec cannot fail");
    out
}

pub fn save_checkpoint(params: &EstimatorParams, path: &Path, meta: Option<&str>) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(&to_bytes(params, meta)).map_err(io)?;
    w.flush().map_err(io)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(EstimatorParams, Option<String>)> {
    let mut r = Reader::new(bytes);
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("not an MCKPT1 checkpoint".into()));
    }
    let len = r.u32()? as usize;
    let config: EstimatorConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let count = r.u32()? as usize;

    // The node table comes first; its row count fixes the parameter layout.
    let mut raw = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        raw.push((name, shape, data));
    }
    let meta = r.meta()?;
    let n_nodes = match raw.first() {
        Some((name, shape, _)) if name == "node_emb" && shape.len() == 2 => shape[0],
        _ => return Err(Error::Format("checkpoint does not start with node_emb".into())),
    };
    let mut params = EstimatorParams::init(&config, n_nodes, 0)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    if expected.len() != raw.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, config implies {}",
            raw.len(),
            expected.len()
        )));
    }
    for ((dst, (name, shape)), (got_name, got_shape, data)) in
        params.tensors_mut().into_iter().zip(&expected).zip(raw)
    {
        if *name != got_name || *shape != got_shape {
            return Err(Error::Format(format!(
                "tensor {got_name} {got_shape:?} does not match expected {name} {shape:?}"
            )));
        }
        dst.copy_from_slice(&data);
    }
    Ok((params, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(EstimatorParams, Option<String>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_f32_exact() {
        let cfg = EstimatorConfig {
            d_id: 4,
            n_experts: 2,
            ..Default::default()
        };
        let p = EstimatorParams::init(&cfg, 7, 5).unwrap();
        let bytes = to_bytes(&p, Some("{\"seed\":5}"));
        let (q, meta) = from_bytes(&bytes).unwrap();
        assert_eq!(meta.as_deref(), Some("{\"seed\":5}"));
        assert_eq!(q.config, p.config);
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.data.iter().zip(b.data) {
                assert_eq!((*x as f32) as f64, *y);
            }
        }
        // a second round trip is lossless
        assert_eq!(to_bytes(&q, Some("{\"seed\":5}")), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let p = EstimatorParams::init(&EstimatorConfig::default(), 3, 0).unwrap();
        let bytes = to_bytes(&p, None);
        assert!(from_bytes(&bytes[..bytes.len() - 9]).is_err());
        assert!(from_bytes(b"NOPE").is_err());
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(from_bytes(&bad).is_err());
    }
}

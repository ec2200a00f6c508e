//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MTPL" | u32 version | u32 len | canonical JSON header (len bytes)
//! u32 count | count x { u32 name_len | name | u32 ndim | ndim x u32 | f32 payload }
//! ```
//!
//! Tensors are written in sorted name order. The header lists the trainable
//! tensor names under `"trainable"`.

use std::io::{Read, Write};

use serde_json::Value;

use crate::numerics::{ParamStore, Tensor};
use crate::{MtpError, Result};

pub const MAGIC: &[u8; 4] = b"MTPL";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| MtpError::Format(format!("{what} too large: {n}")))
}

pub fn write_container(mut w: impl Write, header: &Value, params: &ParamStore) -> Result<()> {
    let mut header = header.clone();
    let obj = header
        .as_object_mut()
        .ok_or_else(|| MtpError::Format("header must be a JSON object".into()))?;
    obj.insert(
        "trainable".into(),
        Value::from(params.trainable_names()),
    );
    // serde_json maps are sorted, so this is canonical
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    put_u32(&mut w, FORMAT_VERSION)?;
    put_u32(&mut w, len_u32(json.len(), "header")?)?;
    w.write_all(&json)?;
    put_u32(&mut w, len_u32(params.len(), "tensor count")?)?;
    for (name, t) in params.iter() {
        put_u32(&mut w, len_u32(name.len(), "name")?)?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, len_u32(t.shape().len(), "rank")?)?;
        for &d in t.shape() {
            put_u32(&mut w, len_u32(d, "extent")?)?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_container(mut r: impl Read) -> Result<(Value, ParamStore)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(MtpError::Format(format!("bad magic {magic:?}")));
    }
    let version = get_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(MtpError::Format(format!("unsupported version {version}")));
    }
    let hlen = get_u32(&mut r)? as usize;
    let mut json = vec![0u8; hlen];
    r.read_exact(&mut json)?;
    let header: Value = serde_json::from_slice(&json)?;
    let trainable: Vec<String> = header
        .get("trainable")
        .cloned()
        .map(serde_json::from_value)
        .transpose()?
        .unwrap_or_default();
    let count = get_u32(&mut r)? as usize;
    let mut params = ParamStore::new();
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let nlen = get_u32(&mut r)? as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| MtpError::Format(e.to_string()))?;
        if prev.as_ref().is_some_and(|p| *p >= name) {
            return Err(MtpError::Format(format!("tensor table not sorted at `{name}`")));
        }
        let ndim = get_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| get_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data)?.with_grad(trainable.contains(&name));
        params.insert(name.clone(), t);
        prev = Some(name);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(MtpError::Format("trailing bytes after tensor table".into()));
    }
    Ok((header, params))
}

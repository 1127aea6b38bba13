//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `SCKP`, u32 version, u32 entry count, then
//! per entry a u16 name length, the UTF-8 name, u8 rank, rank x u32 dims,
//! u8 dtype and the payload. Dtypes: 0 = f32, 1 = u8, 2 = f64.
//!
//! Model tensors are stored rank 4. The entry `meta.json` (u8) holds the
//! model config, epoch and step counter; Adam moments are f64 entries named
//! `adam.m/<param>` and `adam.v/<param>`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScanetError};
use crate::model::ScanetConfig;
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::{Shape, Tensor};

use super::adam::{AdamState, Moments};

pub const MAGIC: &[u8; 4] = b"SCKP";
pub const VERSION: u32 = 1;

const META: &str = "meta.json";
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: Option<ScanetConfig>,
    pub epoch: usize,
    /// Adam step counter when optimiser state is included.
    pub adam_t: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
    pub optimizer: Option<AdamState>,
}

fn is_buffer_name(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: Option<&ScanetConfig>, epoch: usize, optimizer: Option<&AdamState>) -> Self {
        let tensors = store
            .iter()
            .map(|(name, t, kind)| {
                let mut tensor = t.clone();
                tensor.clear_grad();
                NamedTensor { name: name.to_string(), tensor, kind }
            })
            .collect();
        Checkpoint {
            meta: CheckpointMeta { config: config.cloned(), epoch, adam_t: optimizer.map(|o| o.t) },
            tensors,
            optimizer: optimizer.cloned(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    /// Tensors as a store; entries named like batch-norm statistics are buffers.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for t in &self.tensors {
            match t.kind {
                ParamKind::Learnable => store.add_param(&t.name, t.tensor.clone())?,
                ParamKind::Buffer => store.add_buffer(&t.name, t.tensor.clone())?,
            }
        }
        Ok(store)
    }

    /// Copies matching tensors into `store`. With `strict`, every entry of
    /// `store` must be present in the checkpoint.
    pub fn load_into(&self, store: &mut ParamStore, strict: bool) -> Result<usize> {
        let src = self.to_store()?;
        if strict {
            if let Some((missing, _, _)) = store.iter().find(|(n, _, _)| !src.contains(n)) {
                return Err(ScanetError::Checkpoint(format!("checkpoint has no tensor `{missing}`")));
            }
        }
        store.load_matching(&src)
    }
}

fn put_entry(out: &mut Vec<u8>, name: &str, dims: &[usize], dtype: u8, payload: &[u8]) -> Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| ScanetError::Checkpoint(format!("name too long: {name}")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| ScanetError::Checkpoint(format!("dimension too large in `{name}`")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(dtype);
    out.extend_from_slice(payload);
    Ok(())
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    let mut count = 0u32;
    let mut meta = ckpt.meta.clone();
    meta.adam_t = ckpt.optimizer.as_ref().map(|o| o.t);
    let meta = serde_json::to_vec(&meta)?;
    put_entry(&mut body, META, &[meta.len()], 1, &meta)?;
    count += 1;
    for t in &ckpt.tensors {
        if t.name.starts_with("adam.") || t.name == META {
            return Err(ScanetError::Checkpoint(format!("reserved tensor name `{}`", t.name)));
        }
        if (t.kind == ParamKind::Buffer) != is_buffer_name(&t.name) {
            return Err(ScanetError::Checkpoint(format!("`{}`: kind does not follow the buffer naming rule", t.name)));
        }
        let payload: Vec<u8> = t.tensor.data().iter().flat_map(|x| x.to_le_bytes()).collect();
        put_entry(&mut body, &t.name, &t.tensor.shape().dims(), 0, &payload)?;
        count += 1;
    }
    if let Some(opt) = &ckpt.optimizer {
        for (name, mom) in &opt.moments {
            put_entry(&mut body, &format!("{MOMENT_M}{name}"), &[mom.m.len()], 2, &f64_bytes(&mom.m))?;
            put_entry(&mut body, &format!("{MOMENT_V}{name}"), &[mom.v.len()], 2, &f64_bytes(&mom.v))?;
            count += 2;
        }
    }
    let mut out = Vec::with_capacity(body.len() + 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ScanetError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).ok() != Some(&MAGIC[..]) {
        return Err(ScanetError::Checkpoint("bad magic (not a checkpoint file)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ScanetError::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
    }
    let count = r.u32()?;
    let mut meta: Option<CheckpointMeta> = None;
    let mut tensors = Vec::new();
    let mut m_parts: Vec<(String, Vec<f64>)> = Vec::new();
    let mut v_parts: Vec<(String, Vec<f64>)> = Vec::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ScanetError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| ScanetError::Checkpoint(format!("`{name}`: size overflow")))?;
        let dtype = r.u8()?;
        let width = match dtype {
            0 => 4,
            1 => 1,
            2 => 8,
            d => return Err(ScanetError::Checkpoint(format!("`{name}`: unknown dtype {d}"))),
        };
        let bytes_len = numel.checked_mul(width).ok_or_else(|| ScanetError::Checkpoint(format!("`{name}`: size overflow")))?;
        let bytes = r.take(bytes_len)?;
        match (dtype, name.as_str()) {
            (1, META) => meta = Some(serde_json::from_slice(bytes)?),
            (2, n) if n.starts_with(MOMENT_M) || n.starts_with(MOMENT_V) => {
                let vals = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                if let Some(p) = n.strip_prefix(MOMENT_M) {
                    m_parts.push((p.to_string(), vals));
                } else {
                    v_parts.push((n[MOMENT_V.len()..].to_string(), vals));
                }
            }
            (0, _) => {
                if rank != 4 {
                    return Err(ScanetError::Checkpoint(format!("`{name}`: expected rank 4, found {rank}")));
                }
                let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                let tensor = Tensor::from_vec(Shape::new(dims[0], dims[1], dims[2], dims[3]), data)?;
                let kind = if is_buffer_name(&name) { ParamKind::Buffer } else { ParamKind::Learnable };
                tensors.push(NamedTensor { name, tensor, kind });
            }
            _ => return Err(ScanetError::Checkpoint(format!("`{name}`: unexpected dtype {dtype}"))),
        }
    }
    if r.pos != buf.len() {
        return Err(ScanetError::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let meta = meta.ok_or_else(|| ScanetError::Checkpoint("missing metadata entry".into()))?;
    let optimizer = match meta.adam_t {
        None => None,
        Some(t) => {
            if m_parts.len() != v_parts.len() {
                return Err(ScanetError::Checkpoint("unpaired optimiser moments".into()));
            }
            let mut st = AdamState { t, ..Default::default() };
            for ((mn, m), (vn, v)) in m_parts.into_iter().zip(v_parts) {
                if mn != vn || m.len() != v.len() {
                    return Err(ScanetError::Checkpoint(format!("optimiser moments for `{mn}` and `{vn}` disagree")));
                }
                st.moments.insert(mn, Moments { m, v });
            }
            Some(st)
        }
    };
    Ok(Checkpoint { meta, tensors, optimizer })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| ScanetError::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    decode(&buf).map_err(|e| match e {
        ScanetError::Checkpoint(m) => ScanetError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

//! The AFNR binary container.
//!
//! ```text
//! "AFNR" | version: u16 | fingerprint: [u8; 32] | name: u32 len + UTF-8 | count: u32
//! per entry: id: u32 len + UTF-8 | role: u8 | dtype: u8 | rank: u32 | dims: u32 × rank | data (LE)
//! ```
//!
//! Adapter files put the task name in the name field; backbone checkpoints
//! put the architecture description there and tag every entry with [`ROLE_BACKBONE`].

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::affiner::{Adapter, AffinerParams, AffinerParts, BiasParams, LoraParams};
use crate::backbone::{ArchConfig, Backbone, Fingerprint};
use crate::error::{Error, Result};
use crate::registry::{AdapterSet, CondInjection, Origin};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"AFNR";
pub const FORMAT_VERSION: u16 = 1;

const ROLE_A: u8 = 1;
const ROLE_B: u8 = 2;
const ROLE_S: u8 = 3;
const ROLE_W_DOWN: u8 = 4;
const ROLE_W_UP: u8 = 5;
const ROLE_LORA_A: u8 = 6;
const ROLE_LORA_B: u8 = 7;
const ROLE_DELTA_B: u8 = 8;
const ROLE_CLASS_ROWS: u8 = 16;
const ROLE_COND_GATE: u8 = 17;
const ROLE_COND_PROJ: u8 = 18;
const ROLE_BACKBONE: u8 = 0x80;

struct Entry<'a, S: Scalar> {
    id: &'a str,
    role: u8,
    tensor: &'a Tensor<S>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn encode<S: Scalar>(fingerprint: &Fingerprint, name: &str, entries: &[Entry<'_, S>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&fingerprint.0);
    put_str(&mut out, name);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        put_str(&mut out, e.id);
        out.push(e.role);
        out.push(S::DTYPE.tag());
        out.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&e.tensor.le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Malformed(format!("{what} is not UTF-8")))
    }
}

struct Decoded<S: Scalar> {
    fingerprint: Fingerprint,
    name: String,
    entries: Vec<(String, u8, Tensor<S>)>,
}

fn decode<S: Scalar>(buf: &[u8]) -> Result<Decoded<S>> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let fingerprint = Fingerprint(r.take(32, "fingerprint")?.try_into().unwrap());
    let name = r.string("name")?;
    let count = r.u32("entry count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let id = r.string("entry id")?;
        let role = r.u8("entry role")?;
        let tag = r.u8("entry dtype")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Malformed(format!("unknown dtype tag {tag}")))?;
        let rank = r.u32("entry rank")? as usize;
        if rank > 8 {
            return Err(Error::Malformed(format!("entry `{id}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u32("entry shape").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel * dtype.size(), "entry data")?;
        let data: Vec<S> = match dtype {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| S::from_f64(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => bytes.chunks_exact(8).map(|c| S::from_f64(f64::read_le(c))).collect(),
        };
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Malformed(format!("entry `{id}`: {e}")))?;
        entries.push((id, role, tensor));
    }
    if r.pos != buf.len() {
        return Err(Error::Malformed(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Decoded {
        fingerprint,
        name,
        entries,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Serializes an adapter set.
pub fn write_adapter<S: Scalar>(set: &AdapterSet<S>) -> Vec<u8> {
    let mut entries = Vec::new();
    for (id, adapter) in &set.entries {
        match adapter {
            Adapter::Affiner(p) => {
                for (role, t) in [
                    (ROLE_A, &p.a),
                    (ROLE_B, &p.b),
                    (ROLE_S, &p.s),
                    (ROLE_W_DOWN, &p.w_down),
                    (ROLE_W_UP, &p.w_up),
                ] {
                    entries.push(Entry { id, role, tensor: t });
                }
            }
            Adapter::Lora(p) => {
                entries.push(Entry { id, role: ROLE_LORA_A, tensor: &p.a });
                entries.push(Entry { id, role: ROLE_LORA_B, tensor: &p.b });
            }
            Adapter::BiasOnly(p) => entries.push(Entry {
                id,
                role: ROLE_DELTA_B,
                tensor: &p.delta,
            }),
        }
    }
    if let Some(rows) = &set.new_class_rows {
        entries.push(Entry {
            id: "",
            role: ROLE_CLASS_ROWS,
            tensor: rows,
        });
    }
    if let Some(c) = &set.cond {
        entries.push(Entry {
            id: "",
            role: ROLE_COND_GATE,
            tensor: &c.gate,
        });
        entries.push(Entry {
            id: "",
            role: ROLE_COND_PROJ,
            tensor: &c.proj,
        });
    }
    encode(&set.backbone_fingerprint, &set.task_name, &entries)
}

/// Parses an adapter set; binding to a backbone is checked separately.
pub fn read_adapter<S: Scalar>(buf: &[u8]) -> Result<AdapterSet<S>> {
    let d = decode::<S>(buf)?;
    let mut parts: BTreeMap<String, BTreeMap<u8, Tensor<S>>> = BTreeMap::new();
    let mut new_class_rows = None;
    let (mut gate, mut proj) = (None, None);
    for (id, role, t) in d.entries {
        match role {
            ROLE_CLASS_ROWS => new_class_rows = Some(t),
            ROLE_COND_GATE => gate = Some(t),
            ROLE_COND_PROJ => proj = Some(t),
            ROLE_A..=ROLE_DELTA_B => {
                if parts.entry(id.clone()).or_default().insert(role, t).is_some() {
                    return Err(Error::Malformed(format!("duplicate role {role} for `{id}`")));
                }
            }
            other => return Err(Error::Malformed(format!("unexpected role tag {other:#x}"))),
        }
    }
    let cond = match (gate, proj) {
        (Some(gate), Some(proj)) => Some(CondInjection { gate, proj }),
        (None, None) => None,
        _ => return Err(Error::Malformed("condition gate and projection must appear together".into())),
    };
    let mut entries = BTreeMap::new();
    for (id, mut roles) in parts {
        let keys: Vec<u8> = roles.keys().copied().collect();
        let mut take = |r: u8| roles.remove(&r).unwrap();
        let adapter = match keys[..] {
            [ROLE_A, ROLE_B, ROLE_S, ROLE_W_DOWN, ROLE_W_UP] => Adapter::Affiner(AffinerParams {
                a: take(ROLE_A),
                b: take(ROLE_B),
                s: take(ROLE_S),
                w_down: take(ROLE_W_DOWN),
                w_up: take(ROLE_W_UP),
            }),
            [ROLE_LORA_A, ROLE_LORA_B] => Adapter::Lora(LoraParams {
                a: take(ROLE_LORA_A),
                b: take(ROLE_LORA_B),
            }),
            [ROLE_DELTA_B] => Adapter::BiasOnly(BiasParams { delta: take(ROLE_DELTA_B) }),
            _ => return Err(Error::Malformed(format!("incomplete adapter for `{id}`: roles {keys:?}"))),
        };
        entries.insert(id, adapter);
    }
    Ok(AdapterSet {
        task_name: d.name,
        backbone_fingerprint: d.fingerprint,
        entries,
        new_class_rows,
        cond,
        origin: Origin::File,
        parts: AffinerParts::FULL,
    })
}

pub fn save_adapter<S: Scalar>(set: &AdapterSet<S>, path: &Path) -> Result<()> {
    write_atomic(path, &write_adapter(set))
}

/// Reads an adapter file and, when `backbone` is given, checks that it binds to it.
pub fn load_adapter<S: Scalar>(path: &Path, backbone: Option<&Backbone<S>>) -> Result<AdapterSet<S>> {
    let set = read_adapter(&std::fs::read(path)?)?;
    if let Some(b) = backbone {
        set.check_binding(b)?;
    }
    Ok(set)
}

/// Writes every backbone array plus its architecture description.
pub fn save_backbone<S: Scalar>(backbone: &Backbone<S>, path: &Path) -> Result<()> {
    let arrays = backbone.named_arrays();
    let entries: Vec<Entry<'_, S>> = arrays
        .iter()
        .map(|(name, t)| Entry {
            id: name,
            role: ROLE_BACKBONE,
            tensor: t,
        })
        .collect();
    let bytes = encode(&backbone.fingerprint(), &backbone.config().to_text(), &entries);
    write_atomic(path, &bytes)
}

/// Rebuilds a backbone from a checkpoint and verifies its fingerprint.
pub fn load_backbone<S: Scalar>(path: &Path) -> Result<Backbone<S>> {
    let d = decode::<S>(&std::fs::read(path)?)?;
    let config = ArchConfig::parse(&d.name, path)?;
    let mut backbone = Backbone::new(&config, 0)?;
    let mut arrays: BTreeMap<String, Tensor<S>> = BTreeMap::new();
    for (id, role, t) in d.entries {
        if role != ROLE_BACKBONE {
            return Err(Error::Malformed(format!("role {role:#x} in a backbone checkpoint")));
        }
        arrays.insert(id, t);
    }
    let mut problem = None;
    backbone.visit_mut(&mut |name, t| match arrays.remove(name) {
        Some(v) if v.shape() == t.shape() => *t = v,
        Some(v) => {
            problem.get_or_insert_with(|| format!("`{name}` has shape {:?}, expected {:?}", v.shape(), t.shape()));
        }
        None => {
            problem.get_or_insert_with(|| format!("missing array `{name}`"));
        }
    });
    if let Some(p) = problem {
        return Err(Error::Malformed(p));
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::Malformed(format!("unexpected array `{extra}`")));
    }
    let found = backbone.fingerprint();
    if found != d.fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: d.fingerprint.to_hex(),
            found: found.to_hex(),
        });
    }
    Ok(backbone)
}

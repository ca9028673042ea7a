//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "RACACKPT"
//! version    u32
//! env_steps  u64
//! episodes   u64
//! opt_steps  u64      optimizer step count (0 when no optimizer state)
//! config     u32 length + UTF-8 JSON of the run config
//! tensors    u32 count, then per tensor:
//!            u32 name length + UTF-8 name, u32 rank, u64 per extent,
//!            f64 per entry
//! checksum   u32      CRC-32 of every preceding byte
//! ```
//!
//! Optimizer accumulators are stored as tensors named `opt.<param>`.

use std::io::Write;
use std::path::Path;

use super::RunConfig;
use crate::agentnet;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, RmsProp, Tensor};

pub const MAGIC: &[u8; 8] = b"RACACKPT";
pub const FORMAT_VERSION: u32 = 1;
const OPT_PREFIX: &str = "opt.";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub env_steps: u64,
    pub episodes: u64,
    pub params: ParamStore,
    /// Optimizer step count and accumulators, keyed by parameter name.
    pub optimizer: Option<(u64, Vec<(String, Tensor)>)>,
}

/// Which tensors to keep when loading.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadScope {
    Full,
    /// Agent-network tensors only; mixer, relation encoder and optimizer
    /// state are skipped.
    AgentOnly,
}

impl Checkpoint {
    pub fn new(config: RunConfig, env_steps: u64, episodes: u64, params: ParamStore) -> Self {
        Checkpoint {
            config,
            env_steps,
            episodes,
            params,
            optimizer: None,
        }
    }

    pub fn with_optimizer(mut self, opt: &RmsProp) -> Self {
        self.optimizer = Some((opt.steps(), opt.state_tensors(&self.params)));
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.env_steps.to_le_bytes());
        out.extend_from_slice(&self.episodes.to_le_bytes());
        let opt_steps = self.optimizer.as_ref().map_or(0, |(s, _)| *s);
        out.extend_from_slice(&opt_steps.to_le_bytes());
        let config = serde_json::to_vec(&self.config)?;
        put_len(&mut out, config.len())?;
        out.extend_from_slice(&config);

        let opt = self.optimizer.iter().flat_map(|(_, ts)| ts.iter());
        let tensors: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t))
            .chain(opt.map(|(n, t)| (format!("{OPT_PREFIX}{n}"), t)))
            .collect();
        put_len(&mut out, tensors.len())?;
        for (name, t) in tensors {
            put_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_len(&mut out, t.shape().len())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], scope: LoadScope) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Corrupt("missing RACACKPT magic bytes".into()));
        }
        if bytes.len() >= 12 {
            let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
            if version != FORMAT_VERSION {
                return Err(Error::Version {
                    found: version,
                    expected: FORMAT_VERSION,
                });
            }
        }
        let body_len = bytes.len().saturating_sub(4);
        let computed = crc32fast::hash(&bytes[..body_len]);
        let stored = if bytes.len() >= 16 {
            u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"))
        } else {
            !computed
        };
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut r = Reader {
            buf: &bytes[12..body_len],
        };
        let env_steps = r.u64()?;
        let episodes = r.u64()?;
        let opt_steps = r.u64()?;
        let config_len = r.u32()? as usize;
        let config: RunConfig = serde_json::from_slice(r.take(config_len)?)?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut opt = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)?;
            let keep = scope == LoadScope::Full || name.starts_with(agentnet::PREFIX);
            if !keep {
                continue;
            }
            match name.strip_prefix(OPT_PREFIX) {
                Some(param) => opt.push((param.to_string(), t)),
                None => params.insert(name, t),
            }
        }
        if !r.buf.is_empty() {
            return Err(Error::Corrupt(format!("{} trailing bytes", r.buf.len())));
        }
        let optimizer = (scope == LoadScope::Full && (opt_steps > 0 || !opt.is_empty()))
            .then_some((opt_steps, opt));
        Ok(Checkpoint {
            config,
            env_steps,
            episodes,
            params,
            optimizer,
        })
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Corrupt(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Corrupt("unexpected end of data".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ck.to_bytes()?;
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config("checkpoint", "path has no file name"))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, scope: LoadScope) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    Checkpoint::from_bytes(&bytes, scope)
}

//! Binary checkpoint: `CLERWKV1`, a u32-length-prefixed `key=value` config
//! block, then one record per parameter until end of file:
//! u32 name length, UTF-8 name, u32 rank, rank x u32 dims, f32 values.
//! All integers and floats are little-endian.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{CheckpointMeta, CleRwkvConfig, CleRwkvModel, ColorSpace, Variant};
use crate::blocks::FilmDims;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CLERWKV1";

/// Lower-case hex SHA-256 of `bytes`.
pub fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn config_text(c: &CleRwkvConfig, m: &CheckpointMeta) -> String {
    let variant = match c.variant {
        Variant::Conditional => "conditional",
        Variant::Base => "base",
    };
    let space = match c.space {
        ColorSpace::Hvi => "hvi",
        ColorSpace::Srgb => "srgb",
    };
    let w = &m.weights;
    format!(
        "r={}\nc_in={}\nc_model={}\nnum_blocks={}\nfilm_anchors={}\nfilm_embed={}\nfilm_hidden={}\n\
         variant={variant}\nspace={space}\nseed={}\nw_l1={}\nw_ssim={}\nw_edge={}\nw_lpips={}\nlambda={}\n\
         beta_min={}\nbeta_max={}\n",
        c.r,
        c.c_in,
        c.c_model,
        c.num_blocks,
        c.film.anchors,
        c.film.embed,
        c.film.hidden,
        m.seed,
        w.l1,
        w.ssim,
        w.edge,
        w.lpips,
        w.lambda,
        m.beta_range.0,
        m.beta_range.1
    )
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            what: "checkpoint",
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn parse_config(text: &str, rd: &Reader) -> Result<(CleRwkvConfig, CheckpointMeta)> {
    let mut kv = HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| rd.fail(format!("config line without '=': {line}")))?;
        kv.insert(k.trim(), v.trim());
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| rd.fail(format!("config is missing {k}")));
    fn num<T: std::str::FromStr>(rd: &Reader, k: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| rd.fail(format!("config field {k} has bad value {v:?}")))
    }
    let n = |k: &str| -> Result<usize> { num(rd, k, get(k)?) };
    let f = |k: &str| -> Result<f64> { num(rd, k, get(k)?) };
    let variant = match get("variant")? {
        "conditional" => Variant::Conditional,
        "base" => Variant::Base,
        other => return Err(rd.fail(format!("unknown variant {other}"))),
    };
    let space = match get("space")? {
        "hvi" => ColorSpace::Hvi,
        "srgb" => ColorSpace::Srgb,
        other => return Err(rd.fail(format!("unknown space {other}"))),
    };
    let config = CleRwkvConfig {
        r: n("r")?,
        c_in: n("c_in")?,
        c_model: n("c_model")?,
        num_blocks: n("num_blocks")?,
        film: FilmDims {
            anchors: n("film_anchors")?,
            embed: n("film_embed")?,
            hidden: n("film_hidden")?,
        },
        variant,
        space,
    };
    let meta = CheckpointMeta {
        seed: num(rd, "seed", get("seed")?)?,
        weights: LossWeights {
            l1: f("w_l1")?,
            ssim: f("w_ssim")?,
            edge: f("w_edge")?,
            lpips: f("w_lpips")?,
            lambda: f("lambda")?,
        },
        beta_range: (f("beta_min")?, f("beta_max")?),
    };
    Ok((config, meta))
}

impl CleRwkvModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let text = config_text(&self.config, &self.meta);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for (_, p) in self.store.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0, path };
        if rd.take(8)? != CHECKPOINT_MAGIC {
            return Err(rd.fail("bad magic bytes"));
        }
        let len = rd.u32()?;
        let text = std::str::from_utf8(rd.take(len)?).map_err(|_| rd.fail("config block is not UTF-8"))?;
        let (config, meta) = parse_config(text, &rd)?;
        let mut model = CleRwkvModel::new(config, meta.seed).map_err(|e| rd.fail(e.to_string()))?;
        model.meta = meta;
        let mut seen = vec![false; model.store.len()];
        while !rd.done() {
            let n = rd.u32()?;
            let name = std::str::from_utf8(rd.take(n)?).map_err(|_| rd.fail("parameter name is not UTF-8"))?.to_string();
            let rank = rd.u32()?;
            let dims = (0..rank).map(|_| rd.u32()).collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            let raw = rd.take(count * 4)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            let id = model.store.find(&name).ok_or_else(|| rd.fail(format!("unexpected parameter {name}")))?;
            let slot = model.store.get_mut(id);
            if slot.value.shape() != dims.as_slice() {
                return Err(rd.fail(format!("{name} has shape {dims:?}, expected {:?}", slot.value.shape())));
            }
            slot.value = Tensor::new(&dims, data)?;
            seen[id.index()] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let (_, p) = model.store.iter().nth(i).expect("index in range");
            return Err(rd.fail(format!("parameter {} is missing", p.name)));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Content digest of the serialized checkpoint.
    pub fn digest(&self) -> String {
        digest_hex(&self.to_bytes())
    }
}

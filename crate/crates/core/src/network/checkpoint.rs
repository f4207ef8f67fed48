//! Versioned binary checkpoint container: a key-value config block, the
//! training step counter, and little-endian f32 parameter blobs keyed by
//! canonical layer names (the names listed by `ParamStore`).

use super::model::{init_model, AggOperator, DenoiserConfig, DenoiserModel};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const CKPT_MAGIC: &[u8; 4] = b"VDCK";
const CKPT_VERSION: u32 = 1;

/// Training provenance carried alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    /// Whether the fusion refiners were finetuned on multi-scan data.
    pub psi_finetuned: bool,
    pub diffusion_t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl CheckpointMeta {
    pub fn fresh(diffusion_t: usize, beta_start: f64, beta_end: f64) -> Self {
        Self {
            step: 0,
            psi_finetuned: false,
            diffusion_t,
            beta_start,
            beta_end,
        }
    }
}

fn config_entries(cfg: &DenoiserConfig, meta: &CheckpointMeta) -> Vec<(String, String)> {
    let join = |v: &[usize]| {
        v.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    vec![
        ("resolution".into(), cfg.resolution.to_string()),
        ("base_channels".into(), cfg.base_channels.to_string()),
        ("num_levels".into(), cfg.num_levels.to_string()),
        ("channel_mults".into(), join(&cfg.channel_mults)),
        ("time_embed_dim".into(), cfg.time_embed_dim.to_string()),
        ("aggregation_levels".into(), join(&cfg.aggregation_levels)),
        ("agg_operator".into(), cfg.agg_operator.as_str().into()),
        ("step".into(), meta.step.to_string()),
        ("psi_finetuned".into(), (meta.psi_finetuned as u8).to_string()),
        ("diffusion_t".into(), meta.diffusion_t.to_string()),
        ("beta_start".into(), format!("{:e}", meta.beta_start)),
        ("beta_end".into(), format!("{:e}", meta.beta_end)),
    ]
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| Error::Incompatible(format!("bad integer list entry '{p}': {e}")))
        })
        .collect()
}

fn parse_config(map: &HashMap<String, String>) -> Result<(DenoiserConfig, CheckpointMeta)> {
    let get = |k: &str| -> Result<&String> {
        map.get(k)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint missing config key '{k}'")))
    };
    let parse = |k: &str| -> Result<usize> {
        get(k)?
            .parse::<usize>()
            .map_err(|e| Error::Incompatible(format!("bad '{k}': {e}")))
    };
    let parse_f = |k: &str| -> Result<f64> {
        get(k)?
            .parse::<f64>()
            .map_err(|e| Error::Incompatible(format!("bad '{k}': {e}")))
    };
    let cfg = DenoiserConfig {
        resolution: parse("resolution")?,
        base_channels: parse("base_channels")?,
        num_levels: parse("num_levels")?,
        channel_mults: parse_usize_list(get("channel_mults")?)?,
        time_embed_dim: parse("time_embed_dim")?,
        aggregation_levels: parse_usize_list(get("aggregation_levels")?)?,
        agg_operator: AggOperator::parse(get("agg_operator")?)?,
    };
    let meta = CheckpointMeta {
        step: get("step")?
            .parse::<u64>()
            .map_err(|e| Error::Incompatible(format!("bad 'step': {e}")))?,
        psi_finetuned: get("psi_finetuned")? == "1",
        diffusion_t: parse("diffusion_t")?,
        beta_start: parse_f("beta_start")?,
        beta_end: parse_f("beta_end")?,
    };
    Ok((cfg, meta))
}

pub fn save_checkpoint(
    model: &DenoiserModel<f32>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let entries = config_entries(&model.cfg, meta);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (k, v) in &entries {
        buf.extend_from_slice(&(k.len() as u32).to_le_bytes());
        buf.extend_from_slice(k.as_bytes());
        buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
        buf.extend_from_slice(v.as_bytes());
    }
    buf.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (name, _, data) in model.store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::TruncatedPayload {
                expected: (self.pos + n) as u64,
                got: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let s = self.take(n)?;
        String::from_utf8(s.to_vec())
            .map_err(|e| Error::Incompatible(format!("invalid UTF-8 in checkpoint: {e}")))
    }
}

/// Reads a checkpoint, reconstructing the model from its stored config.
/// Forward outputs of the restored model match the saved one bit-for-bit.
pub fn load_checkpoint(path: &Path) -> Result<(DenoiserModel<f32>, CheckpointMeta)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != CKPT_MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n_entries = r.u32()? as usize;
    let mut map = HashMap::new();
    for _ in 0..n_entries {
        let k = r.string()?;
        let v = r.string()?;
        map.insert(k, v);
    }
    let (cfg, meta) = parse_config(&map)?;
    let mut model = init_model::<f32>(&cfg, 0)?;

    let n_params = r.u32()? as usize;
    if n_params != model.store.len() {
        return Err(Error::Incompatible(format!(
            "checkpoint has {n_params} tensors, model expects {}",
            model.store.len()
        )));
    }
    let mut by_name: HashMap<String, usize> = HashMap::new();
    for i in 0..model.store.len() {
        by_name.insert(
            model.store.name(crate::nn::ParamId(i)).to_string(),
            i,
        );
    }
    for _ in 0..n_params {
        let name = r.string()?;
        let numel = r.u64()? as usize;
        let idx = *by_name
            .get(&name)
            .ok_or_else(|| Error::Incompatible(format!("unknown tensor '{name}'")))?;
        let id = crate::nn::ParamId(idx);
        if model.store.get(id).len() != numel {
            return Err(Error::Incompatible(format!(
                "tensor '{name}' has {numel} elements, model expects {}",
                model.store.get(id).len()
            )));
        }
        let raw = r.take(numel * 4)?;
        let dst = model.store.get_mut(id);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            dst[i] = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok((model, meta))
}

/// Loads a checkpoint and rejects it if its architecture differs from the
/// expected config.
pub fn load_checkpoint_compatible(
    path: &Path,
    expected: &DenoiserConfig,
) -> Result<(DenoiserModel<f32>, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(path)?;
    if &model.cfg != expected {
        return Err(Error::Incompatible(format!(
            "checkpoint config {:?} does not match expected {:?}",
            model.cfg, expected
        )));
    }
    Ok((model, meta))
}

//! Binary parameter files.
//!
//! Layout: `b"SUGR"`, version `u32`, block count `u32`, manifest length
//! `u32`, a JSON manifest of shapes and settings, then for every block its
//! four scalars `[a, b, eta, threshold]` followed by its network weights
//! (per-block transforms), and finally the shared network weights if the
//! transform is shared. All numbers are little-endian; arrays are `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdjointMode, DmTransform, EncoderDecoder, NetConfig, SugarBlock, SugarParams, TransformSpec};
use crate::error::{Error, Result};
use crate::projector::FilterKind;

pub const SUGR_MAGIC: &[u8; 4] = b"SUGR";
pub const SUGR_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    adjoint_mode: AdjointMode,
    filter: FilterKind,
    transform: TransformSpec,
    shared_transform: bool,
    learn_threshold: bool,
    scalars_per_block: usize,
    weights_per_net: usize,
}

pub fn save_params(path: impl AsRef<Path>, p: &SugarParams) -> Result<()> {
    p.validate()?;
    let shared = p.transforms.len() == 1;
    let weights_per_net = p.transforms[0].weight_count();
    let manifest = Manifest {
        adjoint_mode: p.adjoint_mode,
        filter: p.filter,
        transform: p.transforms[0].spec(),
        shared_transform: shared,
        learn_threshold: p.learn_threshold,
        scalars_per_block: super::SCALARS_PER_BLOCK,
        weights_per_net,
    };
    let text = serde_json::to_vec(&manifest).map_err(|e| Error::format(path.as_ref(), e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(SUGR_MAGIC);
    buf.extend_from_slice(&SUGR_VERSION.to_le_bytes());
    buf.extend_from_slice(&(p.blocks.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(&text);
    let mut put = |v: &[f64]| v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
    for (k, b) in p.blocks.iter().enumerate() {
        put(&[b.a, b.b, b.eta, b.threshold]);
        if !shared {
            if let DmTransform::Learned(net) = &p.transforms[k] {
                put(net.weights());
            }
        }
    }
    if shared {
        if let DmTransform::Learned(net) = &p.transforms[0] {
            put(net.weights());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<SugarParams> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::format(path, m.to_string());
    if bytes.len() < 16 || &bytes[..4] != SUGR_MAGIC {
        return Err(bad("not a SUGR parameter file"));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != SUGR_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let n_blocks = word(8) as usize;
    let mlen = word(12) as usize;
    if n_blocks == 0 || bytes.len() < 16 + mlen {
        return Err(bad("truncated header"));
    }
    let m: Manifest = serde_json::from_slice(&bytes[16..16 + mlen]).map_err(|e| bad(&e.to_string()))?;
    if m.scalars_per_block != super::SCALARS_PER_BLOCK {
        return Err(bad("unexpected scalars_per_block"));
    }
    let net_cfg = match &m.transform {
        TransformSpec::Learned { channels, residual } => {
            let cfg = NetConfig { channels: channels.clone(), residual: *residual };
            cfg.validate()?;
            if EncoderDecoder::weight_count(&cfg) != m.weights_per_net {
                return Err(bad("manifest weight count does not match network shape"));
            }
            Some(cfg)
        }
        _ if m.weights_per_net != 0 => return Err(bad("analytic transform with weights")),
        _ => None,
    };
    let n_nets = if net_cfg.is_none() { 0 } else if m.shared_transform { 1 } else { n_blocks };
    let expected = n_blocks * m.scalars_per_block + n_nets * m.weights_per_net;
    let payload = &bytes[16 + mlen..];
    if payload.len() != expected * 8 {
        return Err(bad(&format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            expected * 8
        )));
    }
    let vals: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut pos = 0;
    let mut take = |k: usize| {
        let s = vals[pos..pos + k].to_vec();
        pos += k;
        s
    };
    let analytic = |spec: &TransformSpec| match spec {
        TransformSpec::Identity => DmTransform::Identity,
        TransformSpec::Haar { levels } => DmTransform::Haar { levels: *levels },
        TransformSpec::Learned { .. } => unreachable!(),
    };
    let mut blocks = Vec::with_capacity(n_blocks);
    let mut transforms = Vec::new();
    for _ in 0..n_blocks {
        let s = take(4);
        blocks.push(SugarBlock { a: s[0], b: s[1], eta: s[2], threshold: s[3] });
        if let (Some(cfg), false) = (&net_cfg, m.shared_transform) {
            transforms.push(DmTransform::Learned(EncoderDecoder::from_weights(cfg.clone(), take(m.weights_per_net))?));
        }
    }
    match (&net_cfg, m.shared_transform) {
        (Some(cfg), true) => transforms.push(DmTransform::Learned(EncoderDecoder::from_weights(cfg.clone(), take(m.weights_per_net))?)),
        (None, true) => transforms.push(analytic(&m.transform)),
        (None, false) => transforms.extend((0..n_blocks).map(|_| analytic(&m.transform))),
        (Some(_), false) => {}
    }
    let p = SugarParams {
        adjoint_mode: m.adjoint_mode,
        filter: m.filter,
        blocks,
        transforms,
        learn_threshold: m.learn_threshold,
    };
    p.validate().map_err(|e| bad(&e.to_string()))?;
    Ok(p)
}

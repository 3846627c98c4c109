//! Versioned, checksummed container for a full training state.
//!
//! ```text
//! "BNCK" | version u16 | config hash [32] | config text (u32 length + UTF-8)
//! step u64 | lr f64
//! tensor count u32 | per tensor: role u8 | rank u8 | extents u32... | values f64...
//! moment count u32 | per slice: length u32 | first f64... | second f64...
//! sha256 of everything above [32]
//! ```
//!
//! Tensors follow the layer order of the network, then the holistic groups.
//! Decomposed layers store their factors only.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::latent::WeightParam;
use crate::train::{NodeParams, ParamSet, TrainState, WeightSource};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BNCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Role {
    DirectWeight = 0,
    SvdU = 1,
    SvdV = 2,
    TuckerCore = 3,
    TuckerFactor = 4,
    GroupCore = 5,
    GroupFactor = 6,
    Alpha = 7,
    BnGamma = 8,
    BnBeta = 9,
    BnRunningMean = 10,
    BnRunningVar = 11,
    ConvWeight = 12,
    LinearWeight = 13,
    LinearBias = 14,
}

struct Slot<'a> {
    role: Role,
    shape: Vec<usize>,
    data: &'a mut [f64],
}

fn weight_slots<'a>(p: &'a mut WeightParam, group: bool, out: &mut Vec<Slot<'a>>) {
    match p {
        WeightParam::Direct { w } => out.push(Slot {
            role: Role::DirectWeight,
            shape: w.shape().to_vec(),
            data: w.data_mut(),
        }),
        WeightParam::Svd { u, v, .. } => {
            out.push(Slot {
                role: Role::SvdU,
                shape: vec![u.rows(), u.cols()],
                data: u.data_mut(),
            });
            out.push(Slot {
                role: Role::SvdV,
                shape: vec![v.rows(), v.cols()],
                data: v.data_mut(),
            });
        }
        WeightParam::Tucker { core, factors } | WeightParam::HolisticGroup { core, factors } => {
            let (cr, fr) = if group {
                (Role::GroupCore, Role::GroupFactor)
            } else {
                (Role::TuckerCore, Role::TuckerFactor)
            };
            out.push(Slot {
                role: cr,
                shape: core.shape().to_vec(),
                data: core.data_mut(),
            });
            for f in factors {
                out.push(Slot {
                    role: fr,
                    shape: vec![f.rows(), f.cols()],
                    data: f.data_mut(),
                });
            }
        }
    }
}

fn vec_slot(role: Role, v: &mut Vec<f64>) -> Slot<'_> {
    Slot {
        role,
        shape: vec![v.len()],
        data: v.as_mut_slice(),
    }
}

fn slots(params: &mut ParamSet) -> Vec<Slot<'_>> {
    let mut out = Vec::new();
    for node in &mut params.nodes {
        match node {
            NodeParams::None => {}
            NodeParams::RealConv { weight } => out.push(Slot {
                role: Role::ConvWeight,
                shape: weight.shape().to_vec(),
                data: weight.data_mut(),
            }),
            NodeParams::Binary { source, alpha } => {
                if let WeightSource::Own(p) = source {
                    weight_slots(p, false, &mut out);
                }
                if let Some(a) = alpha {
                    out.push(vec_slot(Role::Alpha, a));
                }
            }
            NodeParams::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                out.push(vec_slot(Role::BnGamma, gamma));
                out.push(vec_slot(Role::BnBeta, beta));
                out.push(vec_slot(Role::BnRunningMean, running_mean));
                out.push(vec_slot(Role::BnRunningVar, running_var));
            }
            NodeParams::Linear { weight, bias } => {
                let shape = vec![weight.rows(), weight.cols()];
                out.push(Slot {
                    role: Role::LinearWeight,
                    shape,
                    data: weight.data_mut(),
                });
                out.push(vec_slot(Role::LinearBias, bias));
            }
        }
    }
    for g in &mut params.groups {
        weight_slots(g, true, &mut out);
    }
    out
}

/// A loaded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub state: TrainState,
}

pub fn encode_checkpoint(config: &ExperimentConfig, state: &TrainState) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    w.bytes(&config.hash());
    let text = config.canonical_text();
    w.len(text.len());
    w.bytes(text.as_bytes());
    w.u64(state.step);
    w.f64(state.lr);
    let mut params = state.params.clone();
    let slots = slots(&mut params);
    w.len(slots.len());
    for s in &slots {
        w.u8(s.role as u8);
        w.u8(u8::try_from(s.shape.len()).expect("tensor rank below 256"));
        s.shape.iter().for_each(|&d| w.len(d));
        s.data.iter().for_each(|&v| w.f64(v));
    }
    w.len(state.moments.len());
    for m in &state.moments {
        w.len(m.first.len());
        m.first.iter().chain(&m.second).for_each(|&v| w.f64(v));
    }
    let digest = Sha256::digest(&w.buf);
    w.bytes(&digest);
    w.buf
}

/// Verifies magic, checksum and version, in that order, then rebuilds the
/// state into a freshly initialized structure for the embedded config.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let r = Reader::new(bytes, "checkpoint");
    if bytes.len() < 4 + 2 + 32 + 32 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(r.error_at(0, "not a checkpoint (bad magic or truncated)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }
    let mut r = Reader::new(body, "checkpoint");
    r.take(4)?;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let text_at = r.pos();
    let text_len = r.count(1)?;
    let text = std::str::from_utf8(r.take(text_len)?).map_err(|_| r.error_at(text_at, "config text is not UTF-8"))?;
    let config = ExperimentConfig::parse(text, None)?;
    if config.hash() != hash {
        return Err(r.error_at(6, "config hash does not match the embedded config"));
    }
    let step = r.u64()?;
    let lr = r.f64()?;
    let net = config.network()?;
    let mut params = ParamSet::init(&net, config.seed)?;
    {
        let mut slots = slots(&mut params);
        let count_at = r.pos();
        let count = r.u32()? as usize;
        if count != slots.len() {
            return Err(r.error_at(count_at, format!("{count} tensors, the config implies {}", slots.len())));
        }
        for s in &mut slots {
            let at = r.pos();
            let role = r.u8()?;
            let rank = r.u8()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            if role != s.role as u8 || shape != s.shape {
                return Err(r.error_at(
                    at,
                    format!("tensor {role}/{shape:?} where {:?}/{:?} was expected", s.role, s.shape),
                ));
            }
            for v in s.data.iter_mut() {
                *v = r.f64()?;
            }
        }
    }
    let mut state = TrainState::new(params, lr);
    state.step = step;
    let at = r.pos();
    let count = r.u32()? as usize;
    if count != state.moments.len() {
        return Err(r.error_at(at, format!("{count} moment slices, expected {}", state.moments.len())));
    }
    for m in &mut state.moments {
        let at = r.pos();
        let len = r.u32()? as usize;
        if len != m.first.len() {
            return Err(r.error_at(at, format!("moment slice of {len}, expected {}", m.first.len())));
        }
        let mut read = |v: &mut Vec<f64>| -> Result<()> {
            for x in v.iter_mut() {
                *x = r.f64()?;
            }
            Ok(())
        };
        read(&mut m.first)?;
        read(&mut m.second)?;
    }
    r.finish()?;
    Ok(Checkpoint { config, state })
}

pub fn save_checkpoint(path: &Path, config: &ExperimentConfig, state: &TrainState) -> Result<()> {
    std::fs::write(path, encode_checkpoint(config, state)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; `epochs` and the output directory come from the caller's
/// config when resuming, as they are not part of the stored trajectory.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

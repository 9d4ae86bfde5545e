//! Model file: the flow and the pose critic in one versioned binary.
//!
//! Layout (little-endian): magic `AMBIMODL`, version, the flow header
//! (joints, blocks, layer widths, α, seed, last-layer scale), every
//! permutation as `u32`, the flow tensors in [`FlowModel::tensors`] order,
//! the critic header (width, slope, bones) and its tensors, then a CRC32 of
//! everything before it.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::ndcore::Tensor;
use crate::posedisc::{DiscConfig, Discriminator};

const MAGIC: &str = "AMBIMODL";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub flow: FlowModel,
    pub disc: Discriminator,
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        self.disc.validate(self.flow.config.joints)
    }
}

fn write_tensors(w: &mut Writer, ts: &[&Tensor]) {
    for t in ts {
        w.f64s(t.data());
    }
}

fn read_tensors(r: &mut Reader, ts: Vec<&mut Tensor>) -> Result<()> {
    for t in ts {
        let vals = r.f64s(t.len())?;
        t.data_mut().copy_from_slice(&vals);
    }
    Ok(())
}

pub(crate) fn write_model(w: &mut Writer, m: &Model) {
    let c = &m.flow.config;
    for v in [c.joints, c.blocks, c.hidden, c.cond_in, c.cond_hidden, c.cond_out] {
        w.u32(v as u32);
    }
    w.f64(c.alpha);
    w.u64(c.seed);
    w.f64(c.last_layer_scale);
    for p in &m.flow.permutations {
        for &i in p {
            w.u32(i as u32);
        }
    }
    write_tensors(w, &m.flow.tensors());
    let d = &m.disc;
    w.u32(d.merge.layers[0].output_dim() as u32);
    w.f64(d.slope);
    w.u32(d.bones.len() as u32);
    for &(p, c) in &d.bones {
        w.u32(p as u32);
        w.u32(c as u32);
    }
    write_tensors(w, &d.tensors());
}

pub(crate) fn read_model(r: &mut Reader) -> Result<Model> {
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [joints, blocks, hidden, cond_in, cond_hidden, cond_out] = dims;
    let alpha = r.f64()?;
    let seed = r.u64()?;
    let last_layer_scale = r.f64()?;
    let config = FlowConfig { joints, blocks, hidden, cond_in, cond_hidden, cond_out, alpha, seed, last_layer_scale };
    config.validate().map_err(|e| FormatError::Malformed(format!("flow header: {e}")))?;
    // Guard allocation against garbage headers before building the model.
    let flow_params = cond_in * cond_hidden + cond_hidden + cond_hidden * cond_out + cond_out
        + blocks * 2 * ((3 * joints / 2 + cond_out) * hidden + hidden + hidden * 3 * joints + 3 * joints);
    if flow_params.saturating_mul(8) > r.remaining() {
        return Err(FormatError::Truncated.into());
    }
    let mut flow = FlowModel::new(config)?;
    let dim = flow.dim();
    for p in &mut flow.permutations {
        for i in p.iter_mut() {
            *i = r.u32()? as usize;
        }
    }
    read_tensors(r, flow.tensors_mut())?;
    let hidden = r.u32()? as usize;
    let slope = r.f64()?;
    let nb = r.u32()? as usize;
    if nb > dim {
        return Err(FormatError::Malformed(format!("{nb} bones for {joints} joints")).into());
    }
    let mut bones = Vec::with_capacity(nb);
    for _ in 0..nb {
        bones.push((r.u32()? as usize, r.u32()? as usize));
    }
    if hidden.saturating_mul(hidden).saturating_mul(8) > r.remaining() || bones.iter().any(|&(p, c)| p >= joints || c >= joints) {
        return Err(FormatError::Malformed("critic header".into()).into());
    }
    let mut disc = Discriminator::from_bones(bones, joints, &DiscConfig { hidden, slope, seed: 0 });
    read_tensors(r, disc.tensors_mut())?;
    let m = Model { flow, disc };
    m.validate().map_err(|e| FormatError::Malformed(e.to_string()))?;
    Ok(m)
}

pub fn encode_model(m: &Model) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC.as_bytes());
    w.u32(MODEL_VERSION);
    write_model(&mut w, m);
    w.finish_crc()
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut head = Reader::new(bytes);
    head.magic(MAGIC)?;
    head.version(MODEL_VERSION)?;
    let mut r = Reader::with_crc(bytes)?;
    r.take(MAGIC.len() + 4)?;
    let m = read_model(&mut r)?;
    r.expect_end()?;
    Ok(m)
}

pub fn save_model(m: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(m)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    decode_model(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::Skeleton;

    fn model() -> Model {
        let cfg = FlowConfig { hidden: 16, cond_hidden: 8, cond_out: 4, seed: 3, last_layer_scale: 0.5, ..FlowConfig::new(16) };
        Model {
            flow: FlowModel::new(cfg).unwrap(),
            disc: Discriminator::new(&Skeleton::human16(), &DiscConfig { hidden: 10, seed: 4, ..DiscConfig::default() }),
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let mut m = model();
        m.flow.blocks[2].subnet1.layers[0].weight.data_mut()[5] = 0.1 + 0.2;
        let bytes = encode_model(&m);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.flow.permutations, m.flow.permutations);
        assert_eq!(encode_model(&back), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_model(&model());
        let mut bad = bytes.clone();
        bad[100] ^= 1;
        assert!(matches!(decode_model(&bad), Err(Error::Format(FormatError::Checksum { .. }))));
        assert!(decode_model(&bytes[..bytes.len() / 2]).is_err());
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(decode_model(&v), Err(Error::Format(FormatError::VersionMismatch { .. }))));
    }
}

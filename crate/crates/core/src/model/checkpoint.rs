//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "RESTTCKP"
//! version      u32      CHECKPOINT_VERSION
//! n_nodes      u32
//! bond_dim     u32
//! output_dim   u32
//! mode_len     u32, then mode name (utf-8)
//! final_linear u8
//! input_dims   n_nodes x u32
//! chain        n_nodes x u8
//! skip         n_nodes x u8
//! linear       n_nodes x u8
//! n_tensors    u32
//! per tensor:  name_len u32, name (utf-8), rank u32, dims rank x u32,
//!              payload (prod dims) x f64
//! ```

use std::fs;
use std::path::Path;

use super::{ResTTParams, Topology, TopologyMode};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RESTTCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(topology: &Topology, params: &ResTTParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, topology.n_nodes() as u32);
    put_u32(&mut out, topology.bond_dim as u32);
    put_u32(&mut out, topology.output_dim as u32);
    put_str(&mut out, topology.mode.as_str());
    out.push(topology.final_linear as u8);
    for &d in &topology.input_dims {
        put_u32(&mut out, d as u32);
    }
    for flags in [&topology.chain, &topology.identity_skip, &topology.linear_branch] {
        out.extend(flags.iter().map(|&f| f as u8));
    }
    let tensors = params.tensors();
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in tensors {
        put_str(&mut out, &name);
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Topology, ResTTParams)> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = rd.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let n = rd.u32()? as usize;
    let bond_dim = rd.u32()? as usize;
    let output_dim = rd.u32()? as usize;
    let mode = TopologyMode::parse(&rd.string()?)?;
    let final_linear = rd.u8()? != 0;
    let input_dims = (0..n).map(|_| rd.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let mut flags = || (0..n).map(|_| rd.u8().map(|v| v != 0)).collect::<Result<Vec<_>>>();
    let chain = flags()?;
    let identity_skip = flags()?;
    let linear_branch = flags()?;
    let topology = Topology {
        input_dims,
        bond_dim,
        output_dim,
        chain,
        identity_skip,
        linear_branch,
        final_linear,
        mode,
    };
    topology.validate()?;

    let mut params = ResTTParams::zeros(&topology);
    let count = rd.u32()? as usize;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    if count != names.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, topology needs {}",
            names.len()
        )));
    }
    for (expected_name, slot) in names.iter().zip(params.tensors_mut()) {
        let name = rd.string()?;
        if &name != expected_name {
            return Err(Error::Checkpoint(format!("found tensor {name}, expected {expected_name}")));
        }
        let rank = rd.u32()? as usize;
        let shape = (0..rank).map(|_| rd.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if shape != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {shape:?}, expected {:?}",
                slot.shape()
            )));
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let b = rd.take(8)?;
            data.push(f64::from_le_bytes(b.try_into().expect("8 bytes")));
        }
        *slot = DenseTensor::new(shape, data)?;
    }
    if rd.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - rd.pos)));
    }
    Ok((topology, params))
}

pub fn save_checkpoint(path: impl AsRef<Path>, topology: &Topology, params: &ResTTParams) -> Result<()> {
    fs::write(path, encode_checkpoint(topology, params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Topology, ResTTParams)> {
    decode_checkpoint(&fs::read(path)?)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Preset};

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut topo = Topology::uniform(Preset::GeneralRestt, 4, 3, 2, 2).unwrap();
        topo.set_identity_skip(2, false).unwrap();
        let params = init_params(&topo, 0.7, 11).unwrap();
        let bytes = encode_checkpoint(&topo, &params);
        let (t2, p2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(t2, topo);
        let a: Vec<u64> = params.flat().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = p2.flat().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(encode_checkpoint(&t2, &p2), bytes);
    }

    #[test]
    fn rejects_damage() {
        let topo = Topology::uniform(Preset::PlainTt, 3, 2, 2, 1).unwrap();
        let params = init_params(&topo, 1.0, 1).unwrap();
        let bytes = encode_checkpoint(&topo, &params);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}

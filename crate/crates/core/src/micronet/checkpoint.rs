//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "HODCNNCK"
//! version   u32      1
//! spec      10 x u32 input_channels, input_height, input_width, kernel_size,
//!                    feature_maps, pooling (0 max, 1 average), conv_blocks,
//!                    dense_units, num_classes, padding (0 valid, 1 same)
//! count     u32      number of tensors
//! tensors   count x { ndim u32, dims ndim x u32, values f64 LE }
//! ```
//!
//! Tensors follow [`LayerParams::all_tensors`] order.

use std::fs;
use std::path::Path;

use super::layers::{Padding, PoolKind};
use super::network::{LayerParams, Network, NetworkSpec};
use super::NetError;

pub const MAGIC: &[u8; 8] = b"HODCNNCK";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(network: &Network) -> Vec<u8> {
    let s = &network.spec;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        s.input_channels,
        s.input_height,
        s.input_width,
        s.kernel_size,
        s.feature_maps,
        match s.pooling {
            PoolKind::Max => 0,
            PoolKind::Average => 1,
        },
        s.conv_blocks,
        s.dense_units,
        s.num_classes,
        match s.padding {
            Padding::Valid => 0,
            Padding::Same => 1,
        },
    ] {
        put_u32(&mut out, v);
    }
    let tensors = network.params.all_tensors();
    put_u32(&mut out, tensors.len());
    for t in tensors {
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], NetError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(NetError::Checkpoint(format!(
                "truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64, NetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Network, NetError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(NetError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(NetError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut f = [0usize; 10];
    for v in &mut f {
        *v = r.u32()?;
    }
    let spec = NetworkSpec {
        input_channels: f[0],
        input_height: f[1],
        input_width: f[2],
        kernel_size: f[3],
        feature_maps: f[4],
        pooling: match f[5] {
            0 => PoolKind::Max,
            1 => PoolKind::Average,
            other => return Err(NetError::Checkpoint(format!("unknown pooling code {other}"))),
        },
        conv_blocks: f[6],
        dense_units: f[7],
        num_classes: f[8],
        padding: match f[9] {
            0 => Padding::Valid,
            1 => Padding::Same,
            other => return Err(NetError::Checkpoint(format!("unknown padding code {other}"))),
        },
    };
    // Shapes come from a fresh initialization; stored shapes must agree.
    let mut network = Network::init(spec, 0, 1.0)?;
    let count = r.u32()?;
    let expected = network.params.all_tensors().len();
    if count != expected {
        return Err(NetError::Checkpoint(format!(
            "expected {expected} tensors, found {count}"
        )));
    }
    for (i, t) in network.params.all_tensors_mut().into_iter().enumerate() {
        let ndim = r.u32()?;
        let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        if dims != t.shape() {
            return Err(NetError::Checkpoint(format!(
                "tensor {i} has shape {dims:?}, expected {:?}",
                t.shape()
            )));
        }
        for v in t.data_mut() {
            *v = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(NetError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if network
        .params
        .all_tensors()
        .iter()
        .any(|t| t.data().iter().any(|v| !v.is_finite()))
    {
        return Err(NetError::NonFinite);
    }
    Ok(network)
}

pub fn save(network: &Network, path: impl AsRef<Path>) -> Result<(), NetError> {
    let path = path.as_ref();
    fs::write(path, encode(network)).map_err(|e| NetError::Io(format!("{}: {e}", path.display())))
}

pub fn load(path: impl AsRef<Path>) -> Result<Network, NetError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| NetError::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

impl LayerParams {
    /// Bitwise equality of every stored value.
    pub fn bitwise_eq(&self, other: &LayerParams) -> bool {
        let (a, b) = (self.all_tensors(), other.all_tensors());
        a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| {
                x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }
}

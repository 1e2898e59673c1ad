//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "LIDCAMNT"
//! version  u32
//! length   u64      payload length in bytes
//! payload           mode, spec, parameter tensors (all little-endian)
//! sha256   32 bytes digest of the payload
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::fusion::{FusionMode, FusionNetwork};
use super::spec::{LayerKind, LayerSpec, NetworkSpec};
use super::NetworkError;
use crate::numerics::RngState;

const MAGIC: &[u8; 8] = b"LIDCAMNT";
pub const FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetworkError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            NetworkError::Format(format!("payload truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, NetworkError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, NetworkError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<usize, NetworkError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self) -> Result<f64, NetworkError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn serialize(net: &FusionNetwork) -> Vec<u8> {
    let mut w = Writer(vec![]);
    let spec = net.spec();
    w.u8(net.mode().code());
    w.u32(spec.num_classes);
    w.u32(spec.first_layer_feature_maps);
    w.u32(spec.layers.len());
    for l in &spec.layers {
        w.u32(l.index);
        w.u8(l.kind.code());
        for v in [
            l.kernel_h,
            l.kernel_w,
            l.stride,
            l.dilation_h,
            l.dilation_w,
            l.pad_h,
            l.pad_w,
            l.in_channels,
            l.out_channels,
        ] {
            w.u32(v);
        }
        w.f64(l.dropout_p);
        w.u8(l.has_elu as u8);
    }
    let params = net.parameters();
    w.u32(params.len());
    for p in params {
        w.u64(p.len());
        for &v in p {
            w.f64(v);
        }
    }
    let payload = w.0;
    let mut out = Vec::with_capacity(payload.len() + 52);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    out
}

pub fn deserialize(bytes: &[u8]) -> Result<FusionNetwork, NetworkError> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(NetworkError::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(NetworkError::Version(version));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() != 20 + len + 32 {
        return Err(NetworkError::Format(format!(
            "expected {} bytes, found {}",
            20 + len + 32,
            bytes.len()
        )));
    }
    let payload = &bytes[20..20 + len];
    if Sha256::digest(payload).as_slice() != &bytes[20 + len..] {
        return Err(NetworkError::Checksum);
    }
    let mut r = Reader {
        bytes: payload,
        pos: 0,
    };
    let mode_code = r.u8()?;
    let mode = FusionMode::from_code(mode_code)
        .ok_or_else(|| NetworkError::Format(format!("unknown mode code {mode_code}")))?;
    let num_classes = r.u32()?;
    let first_layer_feature_maps = r.u32()?;
    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        let index = r.u32()?;
        let code = r.u8()?;
        let kind = LayerKind::from_code(code)
            .ok_or_else(|| NetworkError::Format(format!("unknown layer kind {code}")))?;
        let mut v = [0usize; 9];
        for slot in &mut v {
            *slot = r.u32()?;
        }
        let dropout_p = r.f64()?;
        let has_elu = r.u8()? != 0;
        layers.push(LayerSpec {
            index,
            kind,
            kernel_h: v[0],
            kernel_w: v[1],
            stride: v[2],
            dilation_h: v[3],
            dilation_w: v[4],
            pad_h: v[5],
            pad_w: v[6],
            in_channels: v[7],
            out_channels: v[8],
            dropout_p,
            has_elu,
        });
    }
    let spec = NetworkSpec {
        layers,
        first_layer_feature_maps,
        num_classes,
    };
    let n_tensors = r.u32()?;
    let mut tensors = Vec::with_capacity(n_tensors.min(1024));
    for _ in 0..n_tensors {
        let n = r.u64()?;
        if n > (payload.len() - r.pos) / 8 {
            return Err(NetworkError::Format("tensor length exceeds payload".into()));
        }
        tensors.push((0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?);
    }
    if r.pos != payload.len() {
        return Err(NetworkError::Format(
            "trailing bytes after parameters".into(),
        ));
    }
    let mut net = FusionNetwork::build(mode, &spec, &mut RngState::new(0))?;
    net.load_parameters(&tensors)?;
    Ok(net)
}

pub fn save(net: &FusionNetwork, path: &Path) -> Result<(), NetworkError> {
    std::fs::write(path, serialize(net))
        .map_err(|e| NetworkError::Io(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<FusionNetwork, NetworkError> {
    let bytes =
        std::fs::read(path).map_err(|e| NetworkError::Io(format!("{}: {e}", path.display())))?;
    deserialize(&bytes)
}

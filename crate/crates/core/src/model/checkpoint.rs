//! Model checkpoints: `b"FMM1"`, seven `u32` architecture fields, parameter
//! count as `u64`, then the parameters as little-endian `f64`.

use std::fs;
use std::path::Path;

use super::{Architecture, ToyVelocityModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMM1";
const HEADER_LEN: usize = 4 + 7 * 4 + 8;

pub fn encode_checkpoint(model: &ToyVelocityModel) -> Vec<u8> {
    let params = model.params();
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * params.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for field in model.architecture().as_descriptor() {
        buf.extend_from_slice(&field.to_le_bytes());
    }
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ToyVelocityModel> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Length {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let mut descriptor = [0u32; 7];
    for (i, d) in descriptor.iter_mut().enumerate() {
        *d = u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    }
    let arch = Architecture::from_descriptor(descriptor)?;
    let count = u64::from_le_bytes(bytes[32..40].try_into().unwrap()) as usize;
    if count != arch.param_count() {
        return Err(Error::Format(format!(
            "checkpoint declares {count} parameters, architecture needs {}",
            arch.param_count()
        )));
    }
    let expected = HEADER_LEN + 8 * count;
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            found: bytes.len(),
        });
    }
    let params = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    ToyVelocityModel::new(arch, params)
}

pub fn save_checkpoint(model: &ToyVelocityModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ToyVelocityModel> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let model = ToyVelocityModel::init(Architecture::default(), 5).unwrap();
        let bytes = encode_checkpoint(&model);
        assert_eq!(&bytes[..4], b"FMM1");
        assert_eq!(bytes.len(), HEADER_LEN + 8 * model.params().len());
        assert_eq!(decode_checkpoint(&bytes).unwrap(), model);
    }

    #[test]
    fn rejects_corruption() {
        let model = ToyVelocityModel::init(Architecture::default(), 5).unwrap();
        let mut bytes = encode_checkpoint(&model);
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Length { .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format(_))));
    }
}

//! Model files: a small header describing the architecture followed by
//! every parameter as a little-endian f64.
//!
//! ```text
//! magic      8 bytes  "ADVWCNN\0"
//! version    u32      1
//! input_dim  u32
//! kernel     u32
//! pool       u32
//! n_conv     u32
//! filters    u32 x n_conv
//! seed       u64
//! epochs     u64
//! n_params   u64
//! params     f64 x n_params
//! ```

use std::path::Path;

use super::model::{Architecture, CnnModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MODEL_MAGIC: &[u8; 8] = b"ADVWCNN\0";
pub const MODEL_VERSION: u32 = 1;

pub fn encode_model<S: Scalar>(model: &CnnModel<S>) -> Vec<u8> {
    let arch = model.architecture();
    let mut out = Vec::with_capacity(64 + 8 * model.param_count());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    for v in [arch.input_dim, arch.kernel, arch.pool, arch.filters.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &f in &arch.filters {
        out.extend_from_slice(&(f as u32).to_le_bytes());
    }
    out.extend_from_slice(&model.seed.to_le_bytes());
    out.extend_from_slice(&(model.epochs_trained as u64).to_le_bytes());
    out.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for &p in model.params() {
        out.extend_from_slice(&p.as_f64().to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::IncompatibleModel("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_model<S: Scalar>(bytes: &[u8]) -> Result<CnnModel<S>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MODEL_MAGIC {
        return Err(Error::IncompatibleModel("not a model file".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::IncompatibleModel(format!("unsupported version {version}")));
    }
    let input_dim = r.u32()? as usize;
    let kernel = r.u32()? as usize;
    let pool = r.u32()? as usize;
    let n_conv = r.u32()? as usize;
    if n_conv > 64 {
        return Err(Error::IncompatibleModel(format!("{n_conv} conv stages")));
    }
    let filters = (0..n_conv)
        .map(|_| r.u32().map(|f| f as usize))
        .collect::<Result<Vec<_>>>()?;
    let arch = Architecture {
        input_dim,
        kernel,
        pool,
        filters,
    };
    let expected = arch
        .param_count()
        .map_err(|e| Error::IncompatibleModel(e.to_string()))?;
    let seed = r.u64()?;
    let epochs = r.u64()? as usize;
    let declared = r.u64()?;
    if declared != expected as u64 {
        return Err(Error::IncompatibleModel(format!(
            "header declares {declared} parameters, architecture needs {expected}"
        )));
    }
    let remaining = bytes.len() - r.pos;
    if remaining != expected * 8 {
        return Err(Error::IncompatibleModel(format!(
            "payload holds {remaining} bytes, expected {}",
            expected * 8
        )));
    }
    let params = r
        .take(expected * 8)?
        .chunks_exact(8)
        .map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    let mut model = CnnModel::from_params(arch, params)?;
    model.seed = seed;
    model.epochs_trained = epochs;
    Ok(model)
}

pub fn save_model<S: Scalar>(model: &CnnModel<S>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model<S: Scalar>(path: &Path) -> Result<CnnModel<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::GreyImage;

    #[test]
    fn roundtrip_is_bit_identical() {
        let mut m = CnnModel::reference(42);
        m.epochs_trained = 3;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&m, &path).unwrap();
        let back: CnnModel<f64> = load_model(&path).unwrap();
        assert_eq!(back, m);
        let x = GreyImage::new(100, 100, (0..10_000).map(|i| (i % 255) as f64 / 255.0).collect()).unwrap();
        assert_eq!(m.forward(&x).unwrap().to_bits(), back.forward(&x).unwrap().to_bits());
    }

    #[test]
    fn truncated_and_mismatched_files() {
        let m = CnnModel::reference(1);
        let bytes = encode_model(&m);
        assert!(matches!(
            decode_model::<f64>(&bytes[..bytes.len() - 3]),
            Err(Error::IncompatibleModel(_))
        ));
        assert!(matches!(decode_model::<f64>(&bytes[..10]), Err(Error::IncompatibleModel(_))));

        let mut wrong_count = bytes.clone();
        // n_params follows magic, version, 4 dims, 3 filters, seed, epochs
        let at = 8 + 4 + 16 + 12 + 16;
        wrong_count[at..at + 8].copy_from_slice(&7u64.to_le_bytes());
        assert!(matches!(decode_model::<f64>(&wrong_count), Err(Error::IncompatibleModel(_))));

        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(matches!(decode_model::<f64>(&wrong_version), Err(Error::IncompatibleModel(_))));

        let mut extra = bytes;
        extra.push(0);
        assert!(decode_model::<f64>(&extra).is_err());
    }
}

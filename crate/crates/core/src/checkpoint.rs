//! Versioned binary checkpoint archive for model instances.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"FSKD"
//! u16     format version (currently 1)
//! u8      head_frozen flag
//! u32     spec JSON length, followed by the spec as JSON
//! u32     parameter entry count, then per entry:
//!           u16 name length + UTF-8 name
//!           u8 kind code, u8 part code, u8 rank
//!           u32 per-axis dims
//!           f64 data, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::model::{ModelError, ModelInstance, ModelSpec, ParamSet};

const MAGIC: &[u8; 4] = b"FSKD";
const VERSION: u16 = 1;

fn io_err(e: std::io::Error) -> ModelError {
    ModelError::Checkpoint(e.to_string())
}

pub fn save_model(m: &ModelInstance, path: &Path) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&[m.head_frozen() as u8]).map_err(io_err)?;
    let spec_json =
        serde_json::to_vec(m.spec()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    w.write_all(&(spec_json.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&spec_json).map_err(io_err)?;
    w.write_all(&(m.params().len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for e in m.params().iter() {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes()).map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        w.write_all(&[e.kind.code(), e.part.code(), e.value.ndim() as u8])
            .map_err(io_err)?;
        for &d in e.value.shape() {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
        }
        for &v in e.value.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N], ModelError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(io_err)?;
    Ok(buf)
}

pub fn load_model(path: &Path) -> Result<ModelInstance, ModelError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err)?);
    let magic = read_exact::<4>(&mut r)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(read_exact::<2>(&mut r)?);
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let head_frozen = read_exact::<1>(&mut r)?[0] != 0;
    let spec_len = u32::from_le_bytes(read_exact::<4>(&mut r)?) as usize;
    let mut spec_json = vec![0u8; spec_len];
    r.read_exact(&mut spec_json).map_err(io_err)?;
    let spec: ModelSpec =
        serde_json::from_slice(&spec_json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let n = u32::from_le_bytes(read_exact::<4>(&mut r)?) as usize;
    let mut params = ParamSet::default();
    for _ in 0..n {
        let name_len = u16::from_le_bytes(read_exact::<2>(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name =
            String::from_utf8(name).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let [kind_code, part_code, rank] = read_exact::<3>(&mut r)?;
        let kind = crate::model::ParamKind::from_code(kind_code)
            .ok_or_else(|| ModelError::Checkpoint(format!("bad kind code {kind_code}")))?;
        let part = crate::model::ModelPart::from_code(part_code)
            .ok_or_else(|| ModelError::Checkpoint(format!("bad part code {part_code}")))?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_exact::<4>(&mut r)?) as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_le_bytes(read_exact::<8>(&mut r)?));
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        params.push(name, value, kind, part);
    }
    ModelInstance::from_parts(spec, params, head_frozen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelFamily};

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let spec = ModelSpec {
            family: ModelFamily::TinyCnn,
            base_width: 8,
            num_classes: 3,
            input_shape: vec![2, 16, 16],
            tap_layers: vec![2, 3],
        };
        let mut m = build_model(&spec, 42).unwrap();
        m.set_head_frozen(true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fskd");
        save_model(&m, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.spec(), m.spec());
        assert!(loaded.head_frozen());
        for (a, b) in m.params().iter().zip(loaded.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.part, b.part);
            assert_eq!(a.value, b.value, "param {} must round-trip exactly", a.name);
        }
    }

    #[test]
    fn missing_file_is_a_clear_error() {
        let err = load_model(Path::new("/nonexistent/nope.fskd")).unwrap_err();
        assert!(matches!(err, ModelError::Checkpoint(_)));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fskd");
        std::fs::write(&path, b"FSKD\x01").unwrap();
        assert!(load_model(&path).is_err());
    }
}

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// JSON sidecar describing a raw tensor dump.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub order: String,
}

/// Writes `tensor` as raw little-endian f32 to `path` and its header to the
/// same path with a `.json` extension.
pub fn dump_tensor(tensor: &Tensor, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(tensor.len() * 4);
    for v in tensor.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    let header = TensorHeader {
        shape: tensor.shape().to_vec(),
        dtype: "f32".into(),
        order: "row-major".into(),
    };
    fs::write(path.with_extension("json"), serde_json::to_string(&header)?)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let header: TensorHeader = serde_json::from_str(&fs::read_to_string(path.with_extension("json"))?)?;
    if header.dtype != "f32" || header.order != "row-major" {
        return Err(Error::InvalidArgument(format!(
            "unsupported tensor dump {}/{}",
            header.dtype, header.order
        )));
    }
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::InvalidArgument("truncated tensor dump".into()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(header.shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.bin");
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, 3.25, 1e-3, -0.0]).unwrap();
        dump_tensor(&t, &path).unwrap();
        assert_eq!(
            fs::read_to_string(dir.path().join("z.json")).unwrap(),
            r#"{"shape":[2,3],"dtype":"f32","order":"row-major"}"#
        );
        let raw = fs::read(&path).unwrap();
        assert_eq!(raw.len(), 24);
        assert_eq!(&raw[4..8], &(-2.5f32).to_le_bytes());
        assert!(load_tensor(&path).unwrap().bit_eq(&t));
    }
}

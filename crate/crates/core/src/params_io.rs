//! Flat binary parameter files.
//!
//! Layout: the 8-byte magic `SATPARAM`, a little-endian `u32` format
//! version, a `u32` layer count, the layer dims as `u32`s, then every
//! parameter as a little-endian `f64` in [`ParamVector`] layout. The format
//! is self-describing enough to rebuild the network shape on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::network::{NetworkSpec, ParamVector};
use crate::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 8] = b"SATPARAM";
pub const PARAMS_VERSION: u32 = 1;

/// Writes layer dims and parameter values; the count must match the layout
/// implied by the dims.
pub fn write_params<W: Write>(mut out: W, layer_sizes: &[usize], params: &ParamVector) -> Result<()> {
    let spec = NetworkSpec::new(layer_sizes.to_vec(), 0);
    spec.validate()?;
    if params.len() != spec.param_count() {
        return Err(Error::ShapeMismatch(format!(
            "layers {layer_sizes:?} need {} parameters, got {}",
            spec.param_count(),
            params.len()
        )));
    }
    out.write_all(PARAMS_MAGIC)?;
    out.write_all(&PARAMS_VERSION.to_le_bytes())?;
    out.write_all(&(layer_sizes.len() as u32).to_le_bytes())?;
    for &d in layer_sizes {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in &params.values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a parameter file back as `(layer_sizes, params)`.
pub fn read_params<R: Read>(mut input: R) -> Result<(Vec<usize>, ParamVector)> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    if buf.len() < 8 || &buf[..8] != PARAMS_MAGIC {
        return Err(Error::DataFormat("bad magic in parameter file".into()));
    }
    let mut off = 8;
    let mut u32_at = |what: &str| -> Result<u32> {
        if buf.len() < off + 4 {
            return Err(Error::DataFormat(format!("truncated parameter file reading {what}")));
        }
        let v = u32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]]);
        off += 4;
        Ok(v)
    };
    let version = u32_at("version")?;
    if version != PARAMS_VERSION {
        return Err(Error::DataFormat(format!(
            "unsupported parameter file version {version} (expected {PARAMS_VERSION})"
        )));
    }
    let n_layers = u32_at("layer count")? as usize;
    if n_layers < 2 || n_layers > 64 {
        return Err(Error::DataFormat(format!("implausible layer count {n_layers}")));
    }
    let mut layer_sizes = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        layer_sizes.push(u32_at(&format!("layer dim {i}"))? as usize);
    }
    let spec = NetworkSpec::new(layer_sizes.clone(), 0);
    spec.validate()
        .map_err(|e| Error::DataFormat(format!("invalid layer dims in parameter file: {e}")))?;
    let want = spec.param_count();
    let body = &buf[off..];
    if body.len() != want * 8 {
        return Err(Error::DataFormat(format!(
            "parameter payload holds {} bytes, layout needs {}",
            body.len(),
            want * 8
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect();
    Ok((layer_sizes, ParamVector::from_values(values)))
}

pub fn save_params(path: &Path, layer_sizes: &[usize], params: &ParamVector) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, layer_sizes, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<(Vec<usize>, ParamVector)> {
    read_params(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_network;

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = NetworkSpec::new(vec![3, 5, 2], 42);
        let params = init_network(&spec).unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, &spec.layer_sizes, &params).unwrap();
        let (layers, back) = read_params(buf.as_slice()).unwrap();
        assert_eq!(layers, spec.layer_sizes);
        assert_eq!(back.len(), params.len());
        for (a, b) in back.values.iter().zip(&params.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.satparam");
        let spec = NetworkSpec::new(vec![2, 4, 3], 7);
        let params = init_network(&spec).unwrap();
        save_params(&path, &spec.layer_sizes, &params).unwrap();
        let (layers, back) = read_params(BufReader::new(File::open(&path).unwrap())).unwrap();
        assert_eq!(layers, vec![2, 4, 3]);
        assert_eq!(back.values, params.values);
        let (layers2, back2) = load_params(&path).unwrap();
        assert_eq!(layers2, layers);
        assert_eq!(back2.values, back.values);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let spec = NetworkSpec::new(vec![2, 2], 0);
        let params = ParamVector::zeros(spec.param_count());
        let mut good = Vec::new();
        write_params(&mut good, &spec.layer_sizes, &params).unwrap();

        // Wrong magic.
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(read_params(bad.as_slice()), Err(Error::DataFormat(m)) if m.contains("magic")));

        // Wrong version.
        let mut bad = good.clone();
        bad[8] = 99;
        assert!(matches!(read_params(bad.as_slice()), Err(Error::DataFormat(m)) if m.contains("version")));

        // Truncated header and truncated payload.
        assert!(read_params(&good[..10]).is_err());
        assert!(read_params(&good[..good.len() - 3]).is_err());

        // Trailing garbage.
        let mut bad = good.clone();
        bad.extend_from_slice(&[0, 1, 2]);
        assert!(read_params(bad.as_slice()).is_err());

        // Count mismatch: claim an extra layer dim without payload.
        let mut bad = good.clone();
        bad[12] = 3; // layer count 3 instead of 2
        assert!(read_params(bad.as_slice()).is_err());

        // Zero-width layer.
        let mut bad = good;
        bad[16] = 0;
        assert!(read_params(bad.as_slice()).is_err());
    }
}

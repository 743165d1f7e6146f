//! Model serialization: a self-describing binary container with named
//! tensors, shape headers, little-endian f64 payloads and a version field.

use super::model::FnoParams;
use super::{FnoConfig, FnoModel, Standardizer};
use crate::{Error, Result};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FNO1";
const FORMAT_VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated model file while reading {what}: {e}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

/// Write the model (config, standardizer, all parameter tensors).
pub fn save_model(model: &FnoModel, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    let c = &model.config;
    write_u32(&mut w, c.n_modes as u32)?;
    write_u32(&mut w, c.width as u32)?;
    write_u32(&mut w, c.n_layers as u32)?;
    write_u32(&mut w, c.hidden_width as u32)?;
    write_f64(&mut w, c.lr)?;
    write_u32(&mut w, c.batch_size as u32)?;
    write_u32(&mut w, c.n_epochs as u32)?;
    write_u32(&mut w, c.patience as u32)?;
    write_f64(&mut w, c.val_fraction)?;
    write_u64(&mut w, c.seed)?;
    write_f64(&mut w, model.standardizer.mean)?;
    write_f64(&mut w, model.standardizer.std)?;

    let tensors = model.params.named_tensors();
    write_u32(&mut w, tensors.len() as u32)?;
    for (name, shape, data) in tensors {
        let bytes = name.as_bytes();
        write_u32(&mut w, bytes.len() as u32)?;
        w.write_all(bytes)?;
        write_u32(&mut w, shape.len() as u32)?;
        for d in &shape {
            write_u64(&mut w, *d as u64)?;
        }
        write_u64(&mut w, data.len() as u64)?;
        for v in data {
            write_f64(&mut w, *v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a model back; fails loudly on a bad magic/version, a shape that
/// disagrees with the stored config, or a truncated payload.
pub fn load_model(path: impl AsRef<Path>) -> Result<FnoModel> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, not an fnocg model file")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported model format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let config = FnoConfig {
        n_modes: read_u32(&mut r, "n_modes")? as usize,
        width: read_u32(&mut r, "width")? as usize,
        n_layers: read_u32(&mut r, "n_layers")? as usize,
        hidden_width: read_u32(&mut r, "hidden_width")? as usize,
        lr: read_f64(&mut r, "lr")?,
        batch_size: read_u32(&mut r, "batch_size")? as usize,
        n_epochs: read_u32(&mut r, "n_epochs")? as usize,
        patience: read_u32(&mut r, "patience")? as usize,
        val_fraction: read_f64(&mut r, "val_fraction")?,
        seed: read_u64(&mut r, "seed")?,
    };
    config.validate()?;
    let standardizer = Standardizer { mean: read_f64(&mut r, "mean")?, std: read_f64(&mut r, "std")? };

    let mut params = FnoParams::zeros(&config);
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    let n_tensors = read_u32(&mut r, "tensor count")? as usize;
    if n_tensors != expected.len() {
        return Err(Error::Format(format!(
            "tensor count {n_tensors} does not match the architecture ({} expected)",
            expected.len()
        )));
    }
    for (slot, (want_name, want_shape)) in params.flat_mut().into_iter().zip(&expected) {
        let name_len = read_u32(&mut r, "tensor name length")? as usize;
        if name_len > 1024 {
            return Err(Error::Format(format!("implausible tensor name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, "tensor name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if &name != want_name {
            return Err(Error::Format(format!(
                "tensor order mismatch: found '{name}', expected '{want_name}'"
            )));
        }
        let ndim = read_u32(&mut r, "tensor rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r, "tensor dim")? as usize);
        }
        if &shape != want_shape {
            return Err(Error::Format(format!(
                "tensor '{name}' shape {shape:?} does not match expected {want_shape:?}"
            )));
        }
        let len = read_u64(&mut r, "tensor length")? as usize;
        if len != slot.len() {
            return Err(Error::Format(format!(
                "tensor '{name}' length {len} does not match expected {}",
                slot.len()
            )));
        }
        for v in slot.iter_mut() {
            *v = read_f64(&mut r, "tensor data")?;
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    Ok(FnoModel { config, params, standardizer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fno::fno_forward;
    use crate::grid::StateVector;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn small_model(seed: u64) -> FnoModel {
        let cfg = FnoConfig {
            n_modes: 4,
            width: 6,
            n_layers: 2,
            hidden_width: 8,
            lr: 1e-4,
            batch_size: 8,
            n_epochs: 10,
            patience: 0,
            val_fraction: 0.0,
            seed,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FnoModel {
            params: FnoParams::init(&cfg, &mut rng),
            config: cfg,
            standardizer: Standardizer { mean: 1.5, std: 2.25 },
        }
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let model = small_model(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fno");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model.params, loaded.params);
        assert_eq!(model.config, loaded.config);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = StateVector::from_fn(32, |_| rng.gen_range(-2.0..2.0));
        let a = fno_forward(&model, &f, 100.0).unwrap();
        let b = fno_forward(&loaded, &f, 100.0).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn loads_at_a_different_resolution() {
        let model = small_model(6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fno");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        let f = StateVector::from_fn(200, |i| (0.05 * i as f64).sin());
        assert!(fno_forward(&loaded, &f, 100.0).is_ok());
        // below 2 * n_modes the forward pass refuses
        let tiny = StateVector::from_fn(7, |i| i as f64);
        assert!(fno_forward(&loaded, &tiny, 100.0).is_err());
    }

    #[test]
    fn corrupt_header_is_an_explicit_error() {
        let model = small_model(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fno");
        save_model(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.fno");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_model(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_is_an_explicit_error() {
        let model = small_model(8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fno");
        save_model(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.fno");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model(&cut), Err(Error::Format(_))));
    }
}

//! Checkpoint container: a text header (format version, step, config hash,
//! rng state, tensor directory) followed by a little-endian float32
//! payload. Round-trips bit-exactly for f32 models.

use crate::real::Real;
use crate::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

const MAGIC: &str = "haap-ckpt v1";

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("tensor mismatch at {name}: file has {file:?}, model has {model:?}")]
    TensorMismatch { name: String, file: (usize, usize), model: (usize, usize) },
}

/// FNV-1a, 64 bit. Used for config hashes embedded in checkpoints and for
/// dataset manifest digests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Everything needed to resume a ChaCha stream exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

pub struct Checkpoint {
    pub step: u64,
    pub config_hash: u64,
    pub rng: RngState,
    pub tensors: Vec<(String, usize, usize, Vec<f32>)>,
}

impl Checkpoint {
    /// Copy stored values into matching model tensors. Every model tensor
    /// must appear in the file with the same shape, in any order.
    pub fn apply<R: Real>(&self, named: &[(String, Tensor<R>)]) -> Result<(), CkptError> {
        for (name, tensor) in named {
            let (rows, cols) = tensor.shape();
            let entry = self
                .tensors
                .iter()
                .find(|(n, _, _, _)| n == name)
                .ok_or_else(|| CkptError::Malformed(format!("missing tensor {name}")))?;
            if (entry.1, entry.2) != (rows, cols) {
                return Err(CkptError::TensorMismatch {
                    name: name.clone(),
                    file: (entry.1, entry.2),
                    model: (rows, cols),
                });
            }
            let mut value = tensor.to_owned_value();
            for (dst, src) in value.iter_mut().zip(entry.3.iter()) {
                *dst = R::from_f64(f64::from(*src));
            }
            tensor.set_value(value);
        }
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex32(s: &str) -> Result<[u8; 32], CkptError> {
    if s.len() != 64 {
        return Err(CkptError::Malformed(format!("seed hex length {}", s.len())));
    }
    let mut out = [0u8; 32];
    for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
        let txt = std::str::from_utf8(chunk).map_err(|_| CkptError::Malformed("seed hex".into()))?;
        out[i] = u8::from_str_radix(txt, 16)
            .map_err(|_| CkptError::Malformed(format!("seed hex byte {txt}")))?;
    }
    Ok(out)
}

pub fn save<R: Real>(
    path: &Path,
    named: &[(String, Tensor<R>)],
    step: u64,
    config_hash: u64,
    rng: &RngState,
) -> Result<(), CkptError> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("step {step}\n"));
    header.push_str(&format!("config {config_hash:016x}\n"));
    header.push_str(&format!(
        "rng {} {} {}\n",
        hex(&rng.seed),
        rng.stream,
        rng.word_pos
    ));
    header.push_str(&format!("tensors {}\n", named.len()));
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in named {
        let (rows, cols) = tensor.shape();
        header.push_str(&format!("{name} {rows} {cols} {}\n", payload.len()));
        for &v in tensor.value().iter() {
            payload.extend_from_slice(&(Real::to_f64(v) as f32).to_le_bytes());
        }
    }
    header.push_str("---\n");
    let mut file = std::fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    file.write_all(&payload)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CkptError> {
    let bytes = std::fs::read(path)?;
    let sep = b"\n---\n";
    let sep_at = bytes
        .windows(sep.len())
        .position(|w| w == sep)
        .ok_or_else(|| CkptError::Malformed("missing header separator".into()))?;
    let header = std::str::from_utf8(&bytes[..sep_at])
        .map_err(|_| CkptError::Malformed("header is not utf-8".into()))?;
    let payload = &bytes[sep_at + sep.len()..];
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(CkptError::Malformed("bad magic".into()));
    }
    let field = |line: Option<&str>, key: &str| -> Result<String, CkptError> {
        let line = line.ok_or_else(|| CkptError::Malformed(format!("missing {key}")))?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| CkptError::Malformed(format!("expected `{key} ...`, got `{line}`")))
    };
    let step: u64 = field(lines.next(), "step")?
        .parse()
        .map_err(|_| CkptError::Malformed("step".into()))?;
    let config_hash = u64::from_str_radix(&field(lines.next(), "config")?, 16)
        .map_err(|_| CkptError::Malformed("config hash".into()))?;
    let rng_line = field(lines.next(), "rng")?;
    let mut rng_parts = rng_line.split(' ');
    let seed = unhex32(rng_parts.next().unwrap_or(""))?;
    let stream: u64 = rng_parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CkptError::Malformed("rng stream".into()))?;
    let word_pos: u128 = rng_parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CkptError::Malformed("rng word_pos".into()))?;
    let count: usize = field(lines.next(), "tensors")?
        .parse()
        .map_err(|_| CkptError::Malformed("tensor count".into()))?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines
            .next()
            .ok_or_else(|| CkptError::Malformed("truncated directory".into()))?;
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 4 {
            return Err(CkptError::Malformed(format!("directory line `{line}`")));
        }
        let name = parts[0].to_string();
        let rows: usize = parts[1].parse().map_err(|_| CkptError::Malformed("rows".into()))?;
        let cols: usize = parts[2].parse().map_err(|_| CkptError::Malformed("cols".into()))?;
        let offset: usize =
            parts[3].parse().map_err(|_| CkptError::Malformed("offset".into()))?;
        let len = rows * cols * 4;
        let chunk = payload
            .get(offset..offset + len)
            .ok_or_else(|| CkptError::Malformed(format!("payload overrun for {name}")))?;
        let values = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push((name, rows, cols, values));
    }
    Ok(Checkpoint { step, config_hash, rng: RngState { seed, stream, word_pos }, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::normal_init;
    use rand::RngCore;

    #[test]
    fn f32_model_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let named: Vec<(String, Tensor<f32>)> = vec![
            ("a.w".into(), Tensor::param(normal_init(3, 4, 2.0, &mut rng))),
            ("a.b".into(), Tensor::param(normal_init(1, 4, 1e-20, &mut rng))),
            ("b.w".into(), Tensor::param(normal_init(5, 2, 1e6, &mut rng))),
        ];
        let state = RngState::capture(&rng);
        save(&path, &named, 42, 0xdeadbeef, &state).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.step, 42);
        assert_eq!(ck.config_hash, 0xdeadbeef);
        assert_eq!(ck.rng, state);
        let fresh: Vec<(String, Tensor<f32>)> = named
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::param(ndarray::Array2::zeros(t.shape()))))
            .collect();
        ck.apply(&fresh).unwrap();
        for ((_, a), (_, b)) in named.iter().zip(fresh.iter()) {
            let (av, bv) = (a.to_owned_value(), b.to_owned_value());
            assert!(av.iter().zip(bv.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        rng.set_stream(3);
        for _ in 0..17 {
            rng.next_u64();
        }
        let state = RngState::capture(&rng);
        let tail: Vec<u64> = (0..10).map(|_| rng.next_u64()).collect();
        let mut resumed = state.restore();
        let resumed_tail: Vec<u64> = (0..10).map(|_| resumed.next_u64()).collect();
        assert_eq!(tail, resumed_tail);
    }

    #[test]
    fn apply_rejects_shape_and_name_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let named: Vec<(String, Tensor<f32>)> =
            vec![("w".into(), Tensor::param(ndarray::Array2::zeros((2, 2))))];
        let state = RngState::capture(&ChaCha8Rng::seed_from_u64(0));
        save(&path, &named, 0, 0, &state).unwrap();
        let ck = load(&path).unwrap();
        let wrong_shape: Vec<(String, Tensor<f32>)> =
            vec![("w".into(), Tensor::param(ndarray::Array2::zeros((2, 3))))];
        assert!(matches!(
            ck.apply(&wrong_shape),
            Err(CkptError::TensorMismatch { .. })
        ));
        let wrong_name: Vec<(String, Tensor<f32>)> =
            vec![("nope".into(), Tensor::param(ndarray::Array2::zeros((2, 2))))];
        assert!(matches!(ck.apply(&wrong_name), Err(CkptError::Malformed(_))));
    }

    #[test]
    fn malformed_headers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint\n---\n").unwrap();
        assert!(matches!(load(&path), Err(CkptError::Malformed(_))));
        std::fs::write(&path, b"no separator at all").unwrap();
        assert!(matches!(load(&path), Err(CkptError::Malformed(_))));
    }

    #[test]
    fn fnv1a64_known_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }
}

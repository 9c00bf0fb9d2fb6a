//! Binary checkpoint format.
//!
//! ```text
//! magic "GSPTCKPT" | version u32 | config hash u64 | epoch u32
//! config_len u64 | config JSON
//! block_count u64 | per block: len u64, len * f64
//! ```
//!
//! All integers and floats are little-endian. Blocks follow
//! [`Network::state_blocks`] order. Values are stored as f64 whatever the
//! training precision, so a checkpoint written from an f32 network reloads
//! bit-identically into f32.

use std::fs;
use std::path::Path;

use super::{Network, NetworkConfig, NetworkError, Scalar};

pub const MAGIC: &[u8; 8] = b"GSPTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub network: Network<T>,
    pub epoch: u32,
}

pub fn to_bytes<T: Scalar>(net: &Network<T>, epoch: u32) -> Vec<u8> {
    let config = net.config();
    let json = config.to_json();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config.hash().to_le_bytes());
    out.extend_from_slice(&epoch.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    let blocks = net.state_blocks();
    out.extend_from_slice(&(blocks.len() as u64).to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
        for v in b {
            out.extend_from_slice(&v.to_f64().unwrap().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetworkError> {
        if self.buf.len() - self.pos < n {
            return Err(NetworkError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetworkError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NetworkError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, NetworkError> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.buf.len())
            .ok_or_else(|| NetworkError::Checkpoint(format!("implausible length {v}")))
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>, NetworkError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(NetworkError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NetworkError::Checkpoint(format!("unsupported version {version}")));
    }
    let hash = r.u64()?;
    let epoch = r.u32()?;
    let json_len = r.len()?;
    let json = std::str::from_utf8(r.take(json_len)?)
        .map_err(|_| NetworkError::Checkpoint("config is not UTF-8".into()))?;
    let config = NetworkConfig::from_json(json)?;
    if config.hash() != hash {
        return Err(NetworkError::Checkpoint("config hash mismatch".into()));
    }
    let mut network = Network::<T>::new(config, 0)?;
    let count = r.len()?;
    let mut blocks = network.state_blocks_mut();
    if count != blocks.len() {
        return Err(NetworkError::Checkpoint(format!("{count} blocks, architecture has {}", blocks.len())));
    }
    for (idx, dst) in blocks.iter_mut().enumerate() {
        let n = r.len()?;
        if n != dst.len() {
            return Err(NetworkError::Checkpoint(format!("block {idx} has {n} values, expected {}", dst.len())));
        }
        let raw = r.take(n * 8)?;
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(NetworkError::Checkpoint(format!("non-finite value in block {idx}")));
            }
            *d = T::from_f64_lossy(v);
        }
    }
    if r.pos != bytes.len() {
        return Err(NetworkError::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { network, epoch })
}

pub fn save<T: Scalar>(net: &Network<T>, epoch: u32, path: &Path) -> Result<(), NetworkError> {
    fs::write(path, to_bytes(net, epoch)).map_err(|source| NetworkError::Io { path: path.to_path_buf(), source })
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, NetworkError> {
    let bytes = fs::read(path).map_err(|source| NetworkError::Io { path: path.to_path_buf(), source })?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Tensor;

    fn net() -> Network<f32> {
        let cfg = NetworkConfig::tiny16_with_widths(
            32,
            vec![(0.1, 0.2), (0.3, 0.3)],
            vec!["a".into(), "b".into()],
            [2, 3, 2, 2, 2, 2, 4],
        );
        let mut n = Network::new(cfg, 11).unwrap();
        // make running stats non-trivial
        let x = Tensor::from_vec(2, 3, 32, 32, (0..6144).map(|v| ((v * 7) % 17) as f32 / 17.0).collect());
        n.forward_train(x).unwrap();
        n.clear_cache();
        n
    }

    #[test]
    fn roundtrip_is_exact() {
        let n = net();
        let bytes = to_bytes(&n, 42);
        let back = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(back.epoch, 42);
        assert_eq!(back.network.config(), n.config());
        assert_eq!(back.network.state_blocks(), n.state_blocks());
        assert_eq!(to_bytes(&back.network, 42), bytes);
    }

    #[test]
    fn arbitrary_anchor_values_survive_the_config_hash() {
        // k-means medians are arbitrary doubles; the JSON must round-trip them bit-exactly
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
        for _ in 0..50 {
            let anchors = (0..5).map(|_| (rand::Rng::gen_range(&mut rng, 0.001..1.0), rand::Rng::gen_range(&mut rng, 0.001..1.0))).collect();
            let cfg = NetworkConfig::tiny16_with_widths(32, anchors, vec!["a".into()], [2, 2, 2, 2, 2, 2, 2]);
            let n = Network::<f32>::new(cfg, 0).unwrap();
            assert!(from_bytes::<f32>(&to_bytes(&n, 0)).is_ok());
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = to_bytes(&net(), 1);
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes::<f32>(&bad).is_err());
        let mut bad = bytes.clone();
        bad[12] ^= 1; // hash
        assert!(from_bytes::<f32>(&bad).is_err());
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(from_bytes::<f32>(&bad).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let n = net();
        save(&n, 3, &p).unwrap();
        assert_eq!(load::<f32>(&p).unwrap().network.state_blocks(), n.state_blocks());
        assert!(load::<f32>(&dir.path().join("missing")).is_err());
    }
}

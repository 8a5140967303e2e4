//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `CMNN`, u16 version, u32 metadata length,
//! metadata JSON, then a list of named networks (shape table followed by the
//! flat parameter block), named optimizer states, an optional RNG state and
//! the step counter. A SHA-256 digest of everything before it closes the file.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::mlp::Mlp;
use super::optim::AdamW;
use super::NnetError;

const MAGIC: &[u8; 4] = b"CMNN";
const VERSION: u16 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub nets: Vec<(String, Mlp)>,
    pub optimizers: Vec<(String, AdamW)>,
    pub rng: Option<RngState>,
    pub step: u64,
}

fn bad(msg: impl Into<String>) -> NnetError {
    NnetError::BadCheckpoint(msg.into())
}

fn write_str(w: &mut Vec<u8>, s: &str) {
    w.write_u32::<LittleEndian>(s.len() as u32).unwrap();
    w.extend_from_slice(s.as_bytes());
}

fn write_f64s(w: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        w.write_f64::<LittleEndian>(*x).unwrap();
    }
}

fn read_str(r: &mut &[u8]) -> Result<String, NnetError> {
    let n = read_len(r)?;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| bad("truncated string"))?;
    String::from_utf8(buf).map_err(|_| bad("invalid utf-8"))
}

fn read_len(r: &mut &[u8]) -> Result<usize, NnetError> {
    let n = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated length"))? as usize;
    if n > r.len() * 8 + 8 {
        return Err(bad("length exceeds file size"));
    }
    Ok(n)
}

fn read_f64s(r: &mut &[u8], n: usize) -> Result<Vec<f64>, NnetError> {
    if r.len() < n * 8 {
        return Err(bad("truncated parameter block"));
    }
    (0..n)
        .map(|_| r.read_f64::<LittleEndian>().map_err(|_| bad("truncated parameter block")))
        .collect()
}

impl Checkpoint {
    pub fn net(&self, name: &str) -> Option<&Mlp> {
        self.nets.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn optimizer(&self, name: &str) -> Option<&AdamW> {
        self.optimizers.iter().find(|(n, _)| n == name).map(|(_, o)| o)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.write_u16::<LittleEndian>(VERSION).unwrap();
        write_str(&mut w, &self.metadata.to_string());
        w.write_u32::<LittleEndian>(self.nets.len() as u32).unwrap();
        for (name, net) in &self.nets {
            write_str(&mut w, name);
            w.write_u32::<LittleEndian>(net.widths.len() as u32).unwrap();
            for &width in &net.widths {
                w.write_u32::<LittleEndian>(width as u32).unwrap();
            }
            write_f64s(&mut w, &net.params());
        }
        w.write_u32::<LittleEndian>(self.optimizers.len() as u32).unwrap();
        for (name, opt) in &self.optimizers {
            write_str(&mut w, name);
            write_f64s(&mut w, &[opt.beta1, opt.beta2, opt.eps, opt.weight_decay]);
            w.write_u64::<LittleEndian>(opt.t).unwrap();
            w.write_u64::<LittleEndian>(opt.m.len() as u64).unwrap();
            write_f64s(&mut w, &opt.m);
            write_f64s(&mut w, &opt.v);
        }
        match &self.rng {
            Some(s) => {
                w.push(1);
                w.extend_from_slice(&s.seed);
                w.write_u64::<LittleEndian>(s.stream).unwrap();
                w.write_u128::<LittleEndian>(s.word_pos).unwrap();
            }
            None => w.push(0),
        }
        w.write_u64::<LittleEndian>(self.step).unwrap();
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnetError> {
        if bytes.len() < 4 + 2 + 32 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(NnetError::ChecksumMismatch);
        }
        let mut r = &body[4..];
        let version = r.read_u16::<LittleEndian>().map_err(|_| bad("truncated"))?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let metadata: serde_json::Value =
            serde_json::from_str(&read_str(&mut r)?).map_err(|e| bad(format!("metadata: {e}")))?;
        let n_nets = read_len(&mut r)?;
        let mut nets = Vec::with_capacity(n_nets);
        for _ in 0..n_nets {
            let name = read_str(&mut r)?;
            let depth = read_len(&mut r)?;
            if depth < 2 {
                return Err(bad("network needs at least two widths"));
            }
            let widths = (0..depth).map(|_| read_len(&mut r)).collect::<Result<Vec<_>, _>>()?;
            let mut net = Mlp::zeros(&widths);
            let params = read_f64s(&mut r, net.param_count())?;
            net.set_params(&params)?;
            nets.push((name, net));
        }
        let n_opt = read_len(&mut r)?;
        let mut optimizers = Vec::with_capacity(n_opt);
        for _ in 0..n_opt {
            let name = read_str(&mut r)?;
            let h = read_f64s(&mut r, 4)?;
            let t = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated"))?;
            let n = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
            let m = read_f64s(&mut r, n)?;
            let v = read_f64s(&mut r, n)?;
            optimizers.push((
                name,
                AdamW {
                    beta1: h[0],
                    beta2: h[1],
                    eps: h[2],
                    weight_decay: h[3],
                    t,
                    m,
                    v,
                },
            ));
        }
        let rng = match r.read_u8().map_err(|_| bad("truncated"))? {
            0 => None,
            1 => {
                let mut seed = [0u8; 32];
                r.read_exact(&mut seed).map_err(|_| bad("truncated"))?;
                let stream = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated"))?;
                let word_pos = r.read_u128::<LittleEndian>().map_err(|_| bad("truncated"))?;
                Some(RngState { seed, stream, word_pos })
            }
            _ => return Err(bad("bad rng flag")),
        };
        let step = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated"))?;
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            metadata,
            nets,
            optimizers,
            rng,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnetError> {
        let mut f = std::fs::File::create(path).map_err(|e| NnetError::Io(e.to_string()))?;
        f.write_all(&self.to_bytes()).map_err(|e| NnetError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, NnetError> {
        let bytes = std::fs::read(path).map_err(|e| NnetError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample() -> Checkpoint {
        let net = Mlp::new(&[3, 5, 2], 4, 0.3);
        let mut opt = AdamW::new(net.param_count(), 1e-4);
        let mut p = net.params();
        let g = vec![0.5; p.len()];
        opt.step(&mut p, &g, 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let _: u64 = rng.gen();
        Checkpoint {
            metadata: serde_json::json!({"kind": "test", "epochs": 3}),
            nets: vec![("flow".into(), net)],
            optimizers: vec![("flow".into(), opt)],
            rng: Some(RngState::capture(&rng)),
            step: 42,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rng_resumes_in_place() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..13 {
            let _: u32 = rng.gen();
        }
        let mut resumed = RngState::capture(&rng).restore();
        for _ in 0..50 {
            assert_eq!(rng.gen::<u64>(), resumed.gen::<u64>());
        }
    }

    #[test]
    fn corruption_and_truncation_detected() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert_eq!(Checkpoint::from_bytes(&flipped), Err(NnetError::ChecksumMismatch));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).is_err());
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }
}

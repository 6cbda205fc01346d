//! Checkpoint persistence.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic "XFUS" | u32 version | u64 step
//! [u8; 32] rng seed | u128 rng word position
//! u32 config length | config text (sorted `key = value` lines)
//! u32 tensor count
//!   per tensor: u32 name length | name utf8 | u8 trainable | u32 ndim | u32 dims...
//! per tensor, in manifest order: f64 little-endian payload
//! ```
//!
//! The manifest order is the store's sorted name order and the config
//! text is canonical, so save -> load -> save reproduces identical bytes.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::config::FuseConfig;
use crate::error::{CheckpointError, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"XFUS";
pub const VERSION: u32 = 1;

/// ChaCha20 generator state, enough to resume the stream exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha20Rng) -> Self {
        Self { seed: rng.get_seed(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> rand_chacha::ChaCha20Rng {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: FuseConfig,
    pub step: u64,
    pub rng: RngState,
    pub params: ParamStore,
}

fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        write_u32(w, VERSION)?;
        write_u64(w, self.step)?;
        w.write_all(&self.rng.seed)?;
        w.write_all(&self.rng.word_pos.to_le_bytes())?;
        let config = self.config.to_text();
        write_u32(w, config.len() as u32)?;
        w.write_all(config.as_bytes())?;
        write_u32(w, self.params.len() as u32)?;
        for (name, entry) in self.params.iter() {
            write_u32(w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[entry.trainable as u8])?;
            write_u32(w, entry.value.shape().len() as u32)?;
            for &d in entry.value.shape() {
                write_u32(w, d as u32)?;
            }
        }
        for (_, entry) in self.params.iter() {
            for v in entry.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version).into());
        }
        let step = read_u64(r)?;
        let mut seed = [0u8; 32];
        read_exact(r, &mut seed)?;
        let mut pos_bytes = [0u8; 16];
        read_exact(r, &mut pos_bytes)?;
        let rng = RngState { seed, word_pos: u128::from_le_bytes(pos_bytes) };

        let config_len = read_u32(r)? as usize;
        if config_len > 1 << 20 {
            return Err(CheckpointError::Corrupt("config block too large".into()).into());
        }
        let mut config_bytes = vec![0u8; config_len];
        read_exact(r, &mut config_bytes)?;
        let config_text = String::from_utf8(config_bytes)
            .map_err(|_| CheckpointError::Corrupt("config text is not utf-8".into()))?;
        let config = FuseConfig::from_text(&config_text)
            .map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;

        let n_tensors = read_u32(r)? as usize;
        if n_tensors > 1 << 20 {
            return Err(CheckpointError::Corrupt("absurd tensor count".into()).into());
        }
        let mut manifest = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name_len = read_u32(r)? as usize;
            if name_len > 4096 {
                return Err(CheckpointError::Corrupt("tensor name too long".into()).into());
            }
            let mut name_bytes = vec![0u8; name_len];
            read_exact(r, &mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| CheckpointError::Corrupt("tensor name is not utf-8".into()))?;
            let mut flag = [0u8; 1];
            read_exact(r, &mut flag)?;
            let trainable = match flag[0] {
                0 => false,
                1 => true,
                other => {
                    return Err(CheckpointError::Corrupt(format!(
                        "bad trainable flag {other} for `{name}`"
                    ))
                    .into())
                }
            };
            let ndim = read_u32(r)? as usize;
            if ndim > 8 {
                return Err(CheckpointError::Corrupt(format!("rank {ndim} tensor `{name}`")).into());
            }
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u32(r)? as usize);
            }
            let numel: usize = dims.iter().product();
            if numel > 1 << 28 {
                return Err(CheckpointError::Corrupt(format!("oversized tensor `{name}`")).into());
            }
            manifest.push((name, trainable, dims));
        }

        let mut params = ParamStore::new();
        for (name, trainable, dims) in manifest {
            let numel: usize = dims.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                read_exact(r, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            let tensor = Tensor::new(dims, data)
                .map_err(|e| CheckpointError::Corrupt(format!("tensor `{name}`: {e}")))?;
            params
                .insert(name.clone(), tensor, trainable)
                .map_err(|_| CheckpointError::Corrupt(format!("duplicate tensor `{name}`")))?;
        }
        Ok(Checkpoint { config, step, rng, params })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut cursor = bytes.as_slice();
        let ckpt = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                cursor.len()
            ))
            .into());
        }
        Ok(ckpt)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Checkpoint(CheckpointError::Truncated)
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

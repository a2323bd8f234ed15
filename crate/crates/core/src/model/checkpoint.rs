//! The `RETO` checkpoint format (little-endian, version 1):
//!
//! ```text
//! "RETO" | u32 version | config | u64 epoch | u32 P | P x (str name, u32 ndim, ndim x u64 dim, f64 data)
//! | normalizer (3 x f64 center, f64 scale) | u32 C | C x (str channel, f64 mean, f64 std) | u32 crc32
//! ```

use std::path::Path;

use super::{Model, ModelConfig, ParameterStore, Variant};
use crate::binio::{write_atomic, Reader, Writer};
use crate::data::ZScoreStats;
use crate::encoding::CoordinateNormalizer;
use crate::error::{Result, RetoError};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"RETO";

/// A trained model together with everything needed to map raw inputs and outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub normalizer: CoordinateNormalizer,
    pub zscore: ZScoreStats,
    /// Number of completed training epochs.
    pub epoch: u64,
}

fn write_config(w: &mut Writer, c: &ModelConfig) {
    for v in [c.num_blocks, c.num_heads, c.latent_dim, c.per_axis_dim] {
        w.u32(v as u32);
    }
    w.f64(c.ffn_hidden_ratio);
    w.u32(c.out_channels as u32);
    w.u32(c.encoder_hidden as u32);
    w.u8(c.variant.code());
    w.f64(c.wavelength_base);
    w.f64(c.rope_base);
}

fn read_config(r: &mut Reader) -> Result<ModelConfig> {
    let num_blocks = r.u32()? as usize;
    let num_heads = r.u32()? as usize;
    let latent_dim = r.u32()? as usize;
    let per_axis_dim = r.u32()? as usize;
    let ffn_hidden_ratio = r.f64()?;
    let out_channels = r.u32()? as usize;
    let encoder_hidden = r.u32()? as usize;
    let at = r.offset();
    let code = r.u8()?;
    let variant = Variant::from_code(code).ok_or(RetoError::Format {
        offset: at,
        reason: format!("unknown variant code {code}"),
    })?;
    let wavelength_base = r.f64()?;
    let rope_base = r.f64()?;
    Ok(ModelConfig {
        num_blocks,
        num_heads,
        latent_dim,
        per_axis_dim,
        ffn_hidden_ratio,
        out_channels,
        encoder_hidden,
        variant,
        wavelength_base,
        rope_base,
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        write_config(&mut w, self.model.config());
        w.u64(self.epoch);
        let tensors = self.model.params().tensors();
        w.u32(tensors.len() as u32);
        for (name, shape, data) in tensors {
            w.str(&name);
            w.u32(shape.len() as u32);
            for d in shape {
                w.u64(d as u64);
            }
            for v in data {
                w.f64(*v);
            }
        }
        for c in self.normalizer.center {
            w.f64(c);
        }
        w.f64(self.normalizer.scale);
        w.u32(self.zscore.channels.len() as u32);
        for ((name, m), s) in self.zscore.channels.iter().zip(&self.zscore.mean).zip(&self.zscore.std) {
            w.str(name);
            w.f64(*m);
            w.f64(*s);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::checked(bytes)?;
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(RetoError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let config = read_config(&mut r)?;
        config.validate()?;
        let epoch = r.u64()?;
        let mut params = ParameterStore::zeros(&config);
        let count = r.u32()? as usize;
        {
            let expected = ParameterStore::zeros(&config);
            let layout = expected.tensors();
            if count != layout.len() {
                return Err(RetoError::Shape(format!(
                    "checkpoint holds {count} tensors, configuration implies {}",
                    layout.len()
                )));
            }
            let mut slots = params.tensors_mut();
            for ((want_name, want_shape, _), (_, slot)) in layout.iter().zip(slots.iter_mut()) {
                let name = r.str()?;
                let ndim = r.u32()? as usize;
                let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                if &name != want_name || &shape != want_shape {
                    return Err(RetoError::Shape(format!(
                        "checkpoint tensor `{name}` {shape:?} does not match `{want_name}` {want_shape:?}"
                    )));
                }
                for v in slot.iter_mut() {
                    *v = r.f64()?;
                }
            }
        }
        let center = [r.f64()?, r.f64()?, r.f64()?];
        let scale = r.f64()?;
        let c = r.u32()? as usize;
        let mut zscore = ZScoreStats {
            channels: Vec::with_capacity(c),
            mean: Vec::with_capacity(c),
            std: Vec::with_capacity(c),
        };
        for _ in 0..c {
            zscore.channels.push(r.str()?);
            zscore.mean.push(r.f64()?);
            zscore.std.push(r.f64()?);
        }
        r.expect_end()?;
        if c != config.out_channels {
            return Err(RetoError::Shape(format!(
                "checkpoint has {c} target statistics for {} outputs",
                config.out_channels
            )));
        }
        Ok(Self {
            model: Model::from_parts(config, params)?,
            normalizer: CoordinateNormalizer { center, scale },
            zscore,
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and insists on a particular topology.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.model.config() != expected {
            return Err(RetoError::Shape(format!(
                "checkpoint topology {:?} differs from requested {:?}",
                ck.model.config(),
                expected
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_blocks: 2,
            num_heads: 2,
            latent_dim: 8,
            per_axis_dim: 4,
            encoder_hidden: 6,
            ..Default::default()
        }
    }

    fn checkpoint() -> Checkpoint {
        Checkpoint {
            model: Model::init(tiny(), 3).unwrap(),
            normalizer: CoordinateNormalizer {
                center: [0.1, -0.2, 0.3],
                scale: 0.75,
            },
            zscore: ZScoreStats {
                channels: vec!["u".into(), "v".into(), "w".into()],
                mean: vec![0.9, 0.0, -0.01],
                std: vec![0.2, 0.15, 0.15],
            },
            epoch: 42,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.reto");
        let ck = checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn corruption_and_mismatch() {
        let bytes = checkpoint().to_bytes();
        let mut bad = bytes.clone();
        bad[100] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(RetoError::Format { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]), Err(RetoError::Format { .. })));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.reto");
        checkpoint().save(&path).unwrap();
        let other = ModelConfig { latent_dim: 12, ..tiny() };
        assert!(matches!(Checkpoint::load_expecting(&path, &other), Err(RetoError::Shape(_))));
        assert!(Checkpoint::load_expecting(&path, &tiny()).is_ok());
    }
}

//! The RETO network: spectral encoder MLP, `T` rotary-attention physics blocks, decoder MLP.

pub mod checkpoint;
mod config;
pub mod layers;
mod params;

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ModelConfig, Variant};
pub use params::{BlockParams, Dense, LayerNormParams, ParameterStore};

use crate::attention::attend_rows;
use crate::encoding::{check_coords, CoordinateNormalizer, FrequencyTable};
use crate::error::{Result, RetoError};
use crate::rope::{apply_rotary, compute_phases, PhaseTable, RotaryConfig};
use layers::{dense_forward, gelu, layer_norm_forward};

/// Coordinates beyond this magnitude after normalization are almost certainly unnormalized.
pub const SUSPICIOUS_COORD: f64 = 10.0;

/// Receives softmax rows during inference.
pub trait AttentionObserver {
    fn wants(&self, block: usize, head: usize) -> bool;
    fn observe(&mut self, block: usize, head: usize, row: usize, weights: &[f64]);
}

/// Collects full `N x N` weight matrices for every block and head.
#[derive(Debug, Default)]
struct RetainAll {
    weights: Vec<Vec<Array2<f64>>>,
}

impl AttentionObserver for RetainAll {
    fn wants(&self, _: usize, _: usize) -> bool {
        true
    }

    fn observe(&mut self, block: usize, head: usize, row: usize, weights: &[f64]) {
        let n = weights.len();
        while self.weights.len() <= block {
            self.weights.push(Vec::new());
        }
        let heads = &mut self.weights[block];
        while heads.len() <= head {
            heads.push(Array2::zeros((n, n)));
        }
        heads[head]
            .row_mut(row)
            .assign(&ArrayView2::from_shape((1, n), weights).expect("row").row(0));
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `N x out_channels` prediction in Z-scored units.
    pub prediction: Array2<f64>,
    /// `[block][head]` attention matrices when retention was requested.
    pub attention: Option<Vec<Vec<Array2<f64>>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParameterStore,
    frequencies: FrequencyTable,
    rotary: RotaryConfig,
}

impl Model {
    /// Fresh model with seeded uniform initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParameterStore::init(&config, &mut rng);
        Self::from_parts(config, params)
    }

    /// Wraps existing parameters, checking their layout against `config`.
    pub fn from_parts(config: ModelConfig, params: ParameterStore) -> Result<Self> {
        config.validate()?;
        let expected = ParameterStore::zeros(&config);
        let want = expected.tensors();
        let got = params.tensors();
        if want.len() != got.len() {
            return Err(RetoError::Shape(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                got.len()
            )));
        }
        for ((wn, ws, _), (gn, gs, _)) in want.iter().zip(got.iter()) {
            if wn != gn || ws != gs {
                return Err(RetoError::Shape(format!(
                    "parameter `{gn}` has shape {gs:?}, expected `{wn}` {ws:?}"
                )));
            }
        }
        let frequencies = FrequencyTable::new(config.per_axis_dim, config.wavelength_base)?;
        let rotary = RotaryConfig::new(config.head_dim(), config.rope_base)?;
        Ok(Self {
            config,
            params,
            frequencies,
            rotary,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterStore {
        self.params
    }

    pub fn rotary(&self) -> &RotaryConfig {
        &self.rotary
    }

    pub fn frequencies(&self) -> &FrequencyTable {
        &self.frequencies
    }

    /// Encoder input: spectral features, or raw coordinates for the sin/cos-free variants.
    pub fn input_features(&self, coords: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_coords(coords)?;
        if let Some(c) = coords.iter().find(|c| c.abs() > SUSPICIOUS_COORD) {
            log::warn!("coordinate {c} is far outside [-1, 1]; were the inputs normalized?");
        }
        if self.config.variant.uses_sincos() {
            self.frequencies.encode_points(coords)
        } else {
            Ok(coords.to_owned())
        }
    }

    /// Rotary phases for the batch, or `None` when the variant disables RoPE.
    pub fn phases(&self, coords: ArrayView2<f64>) -> Result<Option<PhaseTable>> {
        if self.config.variant.uses_rope() {
            compute_phases(coords, &self.rotary).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Pointwise `W2 · GELU(W1 · x + b1) + b2` over the encoder input features.
    pub fn encoder_forward(&self, coords: ArrayView2<f64>) -> Result<Array2<f64>> {
        let x = self.input_features(coords)?;
        let p = &self.params;
        let hidden = dense_forward(x.view(), &p.encoder_in).mapv(gelu);
        Ok(dense_forward(hidden.view(), &p.encoder_out))
    }

    /// One pre-norm residual block with rotary phases derived from `coords`.
    pub fn physics_block_forward(&self, block: usize, latent: ArrayView2<f64>, coords: ArrayView2<f64>) -> Result<Array2<f64>> {
        if block >= self.config.num_blocks {
            return Err(RetoError::Bounds(format!(
                "block {block} out of range 0..{}",
                self.config.num_blocks
            )));
        }
        self.check_latent(latent, coords.nrows())?;
        let phases = self.phases(coords)?;
        self.block_infer(block, latent, phases.as_ref(), None)
    }

    pub fn decoder_forward(&self, latent: ArrayView2<f64>) -> Result<Array2<f64>> {
        if latent.ncols() != self.config.latent_dim {
            return Err(RetoError::Shape(format!(
                "latent width {} != {}",
                latent.ncols(),
                self.config.latent_dim
            )));
        }
        let p = &self.params;
        let hidden = dense_forward(latent, &p.decoder_in).mapv(gelu);
        Ok(dense_forward(hidden.view(), &p.decoder_out))
    }

    fn check_latent(&self, latent: ArrayView2<f64>, n: usize) -> Result<()> {
        if latent.dim() != (n, self.config.latent_dim) {
            return Err(RetoError::Shape(format!(
                "latent {:?} does not match {n} points x {}",
                latent.dim(),
                self.config.latent_dim
            )));
        }
        Ok(())
    }

    pub(crate) fn block_infer(
        &self,
        block: usize,
        x: ArrayView2<f64>,
        phases: Option<&PhaseTable>,
        mut observer: Option<&mut (dyn AttentionObserver + '_)>,
    ) -> Result<Array2<f64>> {
        let b = &self.params.blocks[block];
        let dh = self.config.head_dim();
        let (n1, _) = layer_norm_forward(x, &b.ln1);
        let mut concat = Array2::zeros(x.raw_dim());
        for (h, head) in b.heads.iter().enumerate() {
            let mut q = n1.dot(&head.wq);
            let mut k = n1.dot(&head.wk);
            let v = n1.dot(&head.wv);
            if let Some(p) = phases {
                q = apply_rotary(q.view(), p)?;
                k = apply_rotary(k.view(), p)?;
            }
            let out = match observer.as_deref_mut() {
                Some(obs) if obs.wants(block, h) => {
                    attend_rows(q.view(), k.view(), v.view(), |i, row| obs.observe(block, h, i, row))
                }
                _ => attend_rows(q.view(), k.view(), v.view(), |_, _| {}),
            };
            concat.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&out);
        }
        let hres = &x + &concat.dot(&b.wo);
        let (n2, _) = layer_norm_forward(hres.view(), &b.ln2);
        let inner = dense_forward(n2.view(), &b.ffn_in).mapv(gelu);
        Ok(hres + dense_forward(inner.view(), &b.ffn_out))
    }

    /// Encoder, all physics blocks, decoder, on already-normalized coordinates.
    pub fn forward_normalized(&self, coords: ArrayView2<f64>, mut observer: Option<&mut dyn AttentionObserver>) -> Result<Array2<f64>> {
        if coords.nrows() == 0 {
            return Err(RetoError::EmptyInput("forward pass over zero points".into()));
        }
        let mut latent = self.encoder_forward(coords)?;
        let phases = self.phases(coords)?;
        for t in 0..self.config.num_blocks {
            latent = self.block_infer(t, latent.view(), phases.as_ref(), observer.as_deref_mut())?;
        }
        self.decoder_forward(latent.view())
    }

    /// Full forward pass from raw coordinates.
    pub fn forward(&self, coords: ArrayView2<f64>, normalizer: &CoordinateNormalizer, retain_weights: bool) -> Result<ModelOutput> {
        if coords.nrows() == 0 {
            return Err(RetoError::EmptyInput("forward pass over zero points".into()));
        }
        check_coords(coords)?;
        let normalized = normalizer.apply_rows(coords);
        if retain_weights {
            let mut keep = RetainAll::default();
            let prediction = self.forward_normalized(normalized.view(), Some(&mut keep))?;
            Ok(ModelOutput {
                prediction,
                attention: Some(keep.weights),
            })
        } else {
            Ok(ModelOutput {
                prediction: self.forward_normalized(normalized.view(), None)?,
                attention: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            num_blocks: 2,
            num_heads: 2,
            latent_dim: 8,
            per_axis_dim: 4,
            ffn_hidden_ratio: 2.0,
            out_channels: 3,
            encoder_hidden: 6,
            variant,
            ..Default::default()
        }
    }

    fn coords(seed: u64, n: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, 3), || rng.random_range(-1.0..1.0))
    }

    fn latent(seed: u64, n: usize, d: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = Model::init(tiny(Variant::Full), 42).unwrap();
        let b = Model::init(tiny(Variant::Full), 42).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Model::init(tiny(Variant::Full), 43).unwrap();
        assert_ne!(a.params(), c.params());
        for (name, _, data) in a.params().tensors() {
            if name.ends_with(".b1") || name.ends_with(".b2") || name.ends_with(".bias") {
                assert!(data.iter().all(|&v| v == 0.0), "{name}");
            }
            if name.ends_with(".gain") {
                assert!(data.iter().all(|&v| v == 1.0), "{name}");
            }
        }
    }

    #[test]
    fn parameter_names_are_unique() {
        let m = Model::init(ModelConfig::default(), 0).unwrap();
        let names: Vec<_> = m.params().tensors().into_iter().map(|(n, _, _)| n).collect();
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert_eq!(names.len(), 8 + 5 * (9 + 3 * 8));
    }

    #[test]
    fn init_std_matches_uniform_moment() {
        // 256 x 512 draws from U(-b, b), b = sqrt(1/256): std = b / sqrt(3).
        let m = Model::init(ModelConfig::default(), 5).unwrap();
        let w = &m.params().decoder_in.weight;
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let std = (w.mapv(|v| (v - mean).powi(2)).sum() / n).sqrt();
        let want = (1.0f64 / 256.0).sqrt() / 3f64.sqrt();
        assert!((std - want).abs() / want < 0.05, "{std} vs {want}");
    }

    #[test]
    fn wrong_layout_is_rejected() {
        let a = Model::init(tiny(Variant::Full), 1).unwrap();
        let err = Model::from_parts(tiny(Variant::NoSincos), a.params().clone());
        assert!(matches!(err, Err(RetoError::Shape(_))));
    }

    #[test]
    fn zero_weights_give_zero_encoder_and_decoder() {
        let cfg = tiny(Variant::Full);
        let m = Model::from_parts(cfg.clone(), ParameterStore::zeros(&cfg)).unwrap();
        let c = coords(1, 4);
        assert!(m.encoder_forward(c.view()).unwrap().iter().all(|&v| v == 0.0));
        let lat = Array2::from_elem((4, 8), 0.7);
        assert!(m.decoder_forward(lat.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_matches_dense_reference_and_is_pointwise() {
        let m = Model::init(tiny(Variant::Full), 3).unwrap();
        let c = coords(4, 5);
        let out = m.encoder_forward(c.view()).unwrap();
        let p = m.params();
        let table = FrequencyTable::new(4, 10_000.0).unwrap();
        for i in 0..5 {
            let x = table.encode_point([c[[i, 0]], c[[i, 1]], c[[i, 2]]]).unwrap().values;
            let hidden: Vec<f64> = (0..6)
                .map(|j| gelu((0..12).map(|f| x[f] * p.encoder_in.weight[[f, j]]).sum::<f64>() + p.encoder_in.bias[j]))
                .collect();
            for d in 0..8 {
                let want: f64 = (0..6).map(|j| hidden[j] * p.encoder_out.weight[[j, d]]).sum::<f64>() + p.encoder_out.bias[d];
                assert!((out[[i, d]] - want).abs() < 1e-12);
            }
            let single = m.encoder_forward(c.slice(s![i..i + 1, ..])).unwrap();
            assert_eq!(single.row(0), out.row(i));
        }
    }

    #[test]
    fn decoder_matches_dense_reference() {
        let m = Model::init(tiny(Variant::Full), 3).unwrap();
        let lat = latent(9, 3, 8);
        let out = m.decoder_forward(lat.view()).unwrap();
        let p = m.params();
        for i in 0..3 {
            let hidden: Vec<f64> = (0..6)
                .map(|j| gelu((0..8).map(|f| lat[[i, f]] * p.decoder_in.weight[[f, j]]).sum::<f64>()))
                .collect();
            for c in 0..3 {
                let want: f64 = (0..6).map(|j| hidden[j] * p.decoder_out.weight[[j, c]]).sum();
                assert!((out[[i, c]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_block_is_identity() {
        let cfg = tiny(Variant::Full);
        let mut m = Model::init(cfg, 7).unwrap();
        for b in &mut m.params_mut().blocks {
            b.wo.fill(0.0);
            b.ffn_out.weight.fill(0.0);
        }
        let c = coords(5, 6);
        let lat = latent(6, 6, 8);
        let out = m.physics_block_forward(0, lat.view(), c.view()).unwrap();
        assert_eq!(out, lat);
    }

    #[test]
    fn single_token_block_closed_form() {
        let m = Model::init(tiny(Variant::Full), 8).unwrap();
        let c = coords(1, 1);
        let x = latent(2, 1, 8);
        let out = m.physics_block_forward(0, x.view(), c.view()).unwrap();
        // one token attends to itself with weight 1: attention = concat_h(LN1(x) W^V_h) W^O
        let b = &m.params().blocks[0];
        let (n1, _) = layer_norm_forward(x.view(), &b.ln1);
        let mut concat = Array2::zeros((1, 8));
        for (h, head) in b.heads.iter().enumerate() {
            concat.slice_mut(s![.., h * 4..(h + 1) * 4]).assign(&n1.dot(&head.wv));
        }
        let hres = &x + &concat.dot(&b.wo);
        let (n2, _) = layer_norm_forward(hres.view(), &b.ln2);
        let f = dense_forward(dense_forward(n2.view(), &b.ffn_in).mapv(gelu).view(), &b.ffn_out);
        let want = hres + f;
        assert!(out.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn block_is_translation_invariant_with_rope() {
        for variant in [Variant::Full, Variant::NoSincos] {
            let m = Model::init(tiny(variant), 9).unwrap();
            let c = coords(3, 7);
            let shifted = c.mapv(|v| v + 5.0);
            let lat = latent(4, 7, 8);
            let a = m.physics_block_forward(1, lat.view(), c.view()).unwrap();
            let b = m.physics_block_forward(1, lat.view(), shifted.view()).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-5 * x.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn forward_is_permutation_equivariant_and_deterministic() {
        let m = Model::init(tiny(Variant::Full), 10).unwrap();
        let c = coords(11, 9);
        let norm = CoordinateNormalizer { center: [0.0; 3], scale: 1.0 };
        let a = m.forward(c.view(), &norm, false).unwrap().prediction;
        let again = m.forward(c.view(), &norm, false).unwrap().prediction;
        assert_eq!(a, again);
        let perm: Vec<usize> = vec![4, 0, 8, 2, 6, 1, 3, 7, 5];
        let pc = c.select(ndarray::Axis(0), &perm);
        let b = m.forward(pc.view(), &norm, false).unwrap().prediction;
        for (i, &p) in perm.iter().enumerate() {
            for ch in 0..3 {
                assert!((b[[i, ch]] - a[[p, ch]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_points_get_identical_predictions() {
        let m = Model::init(tiny(Variant::Full), 12).unwrap();
        let mut c = coords(13, 5);
        c.push_row(c.row(2).to_owned().view()).unwrap();
        let norm = CoordinateNormalizer { center: [0.0; 3], scale: 1.0 };
        let out = m.forward(c.view(), &norm, false).unwrap().prediction;
        assert_eq!(out.row(2), out.row(5));
    }

    #[test]
    fn retained_weights_cover_every_block_and_head() {
        let m = Model::init(tiny(Variant::Full), 14).unwrap();
        let c = coords(15, 6);
        let norm = CoordinateNormalizer { center: [0.0; 3], scale: 1.0 };
        let out = m.forward(c.view(), &norm, true).unwrap();
        assert_eq!(out.prediction.dim(), (6, 3));
        let att = out.attention.unwrap();
        assert_eq!(att.len(), 2);
        for block in &att {
            assert_eq!(block.len(), 2);
            for w in block {
                for row in w.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                }
            }
        }
        let plain = m.forward(c.view(), &norm, false).unwrap().prediction;
        assert!(plain.iter().zip(out.prediction.iter()).all(|(a, b)| (a - b).abs() < 1e-13));
    }

    #[test]
    fn empty_input_is_rejected() {
        let m = Model::init(tiny(Variant::Full), 1).unwrap();
        let norm = CoordinateNormalizer { center: [0.0; 3], scale: 1.0 };
        let c = Array2::<f64>::zeros((0, 3));
        assert!(matches!(m.forward(c.view(), &norm, false), Err(RetoError::EmptyInput(_))));
    }
}

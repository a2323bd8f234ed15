//! Named model parameters.

use ndarray::{Array1, Array2};
use rand::distr::{Distribution, Uniform};
use rand::Rng;

use super::config::ModelConfig;
use crate::attention::HeadProjections;

/// Affine layer `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Weights uniform in `±sqrt(1/fan_in)`, bias zero.
    pub fn uniform<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: uniform_matrix(inputs, outputs, inputs, rng),
            bias: Array1::zeros(outputs),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    fn zeros(dim: usize) -> Self {
        Self {
            gain: Array1::zeros(dim),
            bias: Array1::zeros(dim),
        }
    }
}

/// One physics block: pre-norm attention sublayer and pre-norm GELU feed-forward sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub heads: Vec<HeadProjections>,
    pub wo: Array2<f64>,
    pub ln2: LayerNormParams,
    pub ffn_in: Dense,
    pub ffn_out: Dense,
}

/// Every weight of the encoder MLP, the physics blocks and the decoder MLP.
///
/// Gradients and optimizer moments use the same type, so each parameter has a
/// same-shaped slot wherever one is needed.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    pub encoder_in: Dense,
    pub encoder_out: Dense,
    pub blocks: Vec<BlockParams>,
    pub decoder_in: Dense,
    pub decoder_out: Dense,
}

fn uniform_matrix<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Array2<f64> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl ParameterStore {
    /// Uniform `±sqrt(1/fan_in)` weights, zero biases, unit layer-norm gains.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let d = config.latent_dim;
        let dh = config.head_dim();
        let hidden = config.encoder_hidden;
        let ffn = config.ffn_hidden();
        let encoder_in = Dense::uniform(config.input_dim(), hidden, rng);
        let encoder_out = Dense::uniform(hidden, d, rng);
        let blocks = (0..config.num_blocks)
            .map(|_| {
                let heads = (0..config.num_heads)
                    .map(|_| HeadProjections {
                        wq: uniform_matrix(d, dh, d, rng),
                        wk: uniform_matrix(d, dh, d, rng),
                        wv: uniform_matrix(d, dh, d, rng),
                    })
                    .collect();
                BlockParams {
                    ln1: LayerNormParams::identity(d),
                    heads,
                    wo: uniform_matrix(d, d, d, rng),
                    ln2: LayerNormParams::identity(d),
                    ffn_in: Dense::uniform(d, ffn, rng),
                    ffn_out: Dense::uniform(ffn, d, rng),
                }
            })
            .collect();
        let decoder_in = Dense::uniform(d, hidden, rng);
        let decoder_out = Dense::uniform(hidden, config.out_channels, rng);
        Self {
            encoder_in,
            encoder_out,
            blocks,
            decoder_in,
            decoder_out,
        }
    }

    /// All-zero store with the layout implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.latent_dim;
        let dh = config.head_dim();
        let hidden = config.encoder_hidden;
        let ffn = config.ffn_hidden();
        Self {
            encoder_in: Dense::zeros(config.input_dim(), hidden),
            encoder_out: Dense::zeros(hidden, d),
            blocks: (0..config.num_blocks)
                .map(|_| BlockParams {
                    ln1: LayerNormParams::zeros(d),
                    heads: vec![
                        HeadProjections {
                            wq: Array2::zeros((d, dh)),
                            wk: Array2::zeros((d, dh)),
                            wv: Array2::zeros((d, dh)),
                        };
                        config.num_heads
                    ],
                    wo: Array2::zeros((d, d)),
                    ln2: LayerNormParams::zeros(d),
                    ffn_in: Dense::zeros(d, ffn),
                    ffn_out: Dense::zeros(ffn, d),
                })
                .collect(),
            decoder_in: Dense::zeros(d, hidden),
            decoder_out: Dense::zeros(hidden, config.out_channels),
        }
    }

    /// Zero store with the same layout as `self`.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// `(name, shape, data)` for every parameter, in a fixed canonical order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        fn push<'a, D: ndarray::Dimension>(
            out: &mut Vec<(String, Vec<usize>, &'a [f64])>,
            name: String,
            a: &'a ndarray::Array<f64, D>,
        ) {
            out.push((name, a.shape().to_vec(), a.as_slice().expect("standard layout")));
        }
        let mut out = Vec::new();
        push(&mut out, "encoder.w1".into(), &self.encoder_in.weight);
        push(&mut out, "encoder.b1".into(), &self.encoder_in.bias);
        push(&mut out, "encoder.w2".into(), &self.encoder_out.weight);
        push(&mut out, "encoder.b2".into(), &self.encoder_out.bias);
        for (t, b) in self.blocks.iter().enumerate() {
            push(&mut out, format!("blocks.{t}.ln1.gain"), &b.ln1.gain);
            push(&mut out, format!("blocks.{t}.ln1.bias"), &b.ln1.bias);
            for (h, p) in b.heads.iter().enumerate() {
                push(&mut out, format!("blocks.{t}.attn.head{h}.wq"), &p.wq);
                push(&mut out, format!("blocks.{t}.attn.head{h}.wk"), &p.wk);
                push(&mut out, format!("blocks.{t}.attn.head{h}.wv"), &p.wv);
            }
            push(&mut out, format!("blocks.{t}.attn.wo"), &b.wo);
            push(&mut out, format!("blocks.{t}.ln2.gain"), &b.ln2.gain);
            push(&mut out, format!("blocks.{t}.ln2.bias"), &b.ln2.bias);
            push(&mut out, format!("blocks.{t}.ffn.w1"), &b.ffn_in.weight);
            push(&mut out, format!("blocks.{t}.ffn.b1"), &b.ffn_in.bias);
            push(&mut out, format!("blocks.{t}.ffn.w2"), &b.ffn_out.weight);
            push(&mut out, format!("blocks.{t}.ffn.b2"), &b.ffn_out.bias);
        }
        push(&mut out, "decoder.w1".into(), &self.decoder_in.weight);
        push(&mut out, "decoder.b1".into(), &self.decoder_in.bias);
        push(&mut out, "decoder.w2".into(), &self.decoder_out.weight);
        push(&mut out, "decoder.b2".into(), &self.decoder_out.bias);
        out
    }

    /// Mutable `(name, data)` views in the same order as [`ParameterStore::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        fn push<'a, D: ndarray::Dimension>(
            out: &mut Vec<(String, &'a mut [f64])>,
            name: String,
            a: &'a mut ndarray::Array<f64, D>,
        ) {
            out.push((name, a.as_slice_mut().expect("standard layout")));
        }
        let mut out = Vec::new();
        push(&mut out, "encoder.w1".into(), &mut self.encoder_in.weight);
        push(&mut out, "encoder.b1".into(), &mut self.encoder_in.bias);
        push(&mut out, "encoder.w2".into(), &mut self.encoder_out.weight);
        push(&mut out, "encoder.b2".into(), &mut self.encoder_out.bias);
        for (t, b) in self.blocks.iter_mut().enumerate() {
            push(&mut out, format!("blocks.{t}.ln1.gain"), &mut b.ln1.gain);
            push(&mut out, format!("blocks.{t}.ln1.bias"), &mut b.ln1.bias);
            for (h, p) in b.heads.iter_mut().enumerate() {
                push(&mut out, format!("blocks.{t}.attn.head{h}.wq"), &mut p.wq);
                push(&mut out, format!("blocks.{t}.attn.head{h}.wk"), &mut p.wk);
                push(&mut out, format!("blocks.{t}.attn.head{h}.wv"), &mut p.wv);
            }
            push(&mut out, format!("blocks.{t}.attn.wo"), &mut b.wo);
            push(&mut out, format!("blocks.{t}.ln2.gain"), &mut b.ln2.gain);
            push(&mut out, format!("blocks.{t}.ln2.bias"), &mut b.ln2.bias);
            push(&mut out, format!("blocks.{t}.ffn.w1"), &mut b.ffn_in.weight);
            push(&mut out, format!("blocks.{t}.ffn.b1"), &mut b.ffn_in.bias);
            push(&mut out, format!("blocks.{t}.ffn.w2"), &mut b.ffn_out.weight);
            push(&mut out, format!("blocks.{t}.ffn.b2"), &mut b.ffn_out.bias);
        }
        push(&mut out, "decoder.w1".into(), &mut self.decoder_in.weight);
        push(&mut out, "decoder.b1".into(), &mut self.decoder_in.bias);
        push(&mut out, "decoder.w2".into(), &mut self.decoder_out.weight);
        push(&mut out, "decoder.b2".into(), &mut self.decoder_out.bias);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }
}

//! Reverse-mode gradients of the MSE loss through the whole network.
//!
//! The forward pass records every intermediate the backward pass needs; the
//! backward pass walks the network in reverse with hand-derived adjoints.

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use super::mse_grad;
use crate::attention::{attention_weights, HeadProjections};
use crate::error::{Result, RetoError};
use crate::model::layers::{
    dense_backward, dense_backward_params, dense_forward, gelu, gelu_grad, layer_norm_backward, layer_norm_forward,
    LayerNormCache,
};
use crate::model::{Model, ParameterStore};
use crate::rope::{apply_rotary, apply_rotary_inverse, PhaseTable};

struct HeadTape {
    /// Rotated queries and keys.
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    p: Array2<f64>,
}

struct BlockTape {
    x: Array2<f64>,
    ln1: LayerNormCache,
    n1: Array2<f64>,
    heads: Vec<HeadTape>,
    concat: Array2<f64>,
    ln2: LayerNormCache,
    n2: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
}

struct Tape {
    features: Array2<f64>,
    enc_pre: Array2<f64>,
    enc_act: Array2<f64>,
    blocks: Vec<BlockTape>,
    latent: Array2<f64>,
    dec_pre: Array2<f64>,
    dec_act: Array2<f64>,
    pred: Array2<f64>,
    target: Array2<f64>,
    phases: Option<PhaseTable>,
}

/// One recorded forward pass and its backward pass.
pub struct GradientSession<'m> {
    model: &'m Model,
    tape: Option<Tape>,
}

fn head_forward(n1: ArrayView2<f64>, head: &HeadProjections, phases: Option<&PhaseTable>) -> Result<HeadTape> {
    let mut q = n1.dot(&head.wq);
    let mut k = n1.dot(&head.wk);
    let v = n1.dot(&head.wv);
    if let Some(p) = phases {
        q = apply_rotary(q.view(), p)?;
        k = apply_rotary(k.view(), p)?;
    }
    let p = attention_weights(q.view(), k.view());
    Ok(HeadTape { q, k, v, p })
}

struct HeadGrad {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    dn1: Array2<f64>,
}

fn head_backward(
    tape: &HeadTape,
    head: &HeadProjections,
    n1: ArrayView2<f64>,
    d_out: ArrayView2<f64>,
    phases: Option<&PhaseTable>,
) -> Result<HeadGrad> {
    let scale = 1.0 / (tape.q.ncols() as f64).sqrt();
    let dv = tape.p.t().dot(&d_out);
    let dp = d_out.dot(&tape.v.t());
    // softmax adjoint, row by row: dS = P ⊙ (dP - Σ_j dP ⊙ P)
    let mut ds = &dp * &tape.p;
    let row_dot = ds.sum_axis(Axis(1));
    for ((mut r, p), c) in ds.rows_mut().into_iter().zip(tape.p.rows()).zip(row_dot.iter()) {
        r.zip_mut_with(&p, |d, &pij| *d = (*d - c * pij) * scale);
    }
    let mut dq = ds.dot(&tape.k);
    let mut dk = ds.t().dot(&tape.q);
    if let Some(ph) = phases {
        dq = apply_rotary_inverse(dq.view(), ph)?;
        dk = apply_rotary_inverse(dk.view(), ph)?;
    }
    let mut dn1 = dq.dot(&head.wq.t());
    dn1 += &dk.dot(&head.wk.t());
    dn1 += &dv.dot(&head.wv.t());
    Ok(HeadGrad {
        wq: n1.t().dot(&dq),
        wk: n1.t().dot(&dk),
        wv: n1.t().dot(&dv),
        dn1,
    })
}

impl<'m> GradientSession<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self { model, tape: None }
    }

    /// Runs the network on normalized coordinates, recording intermediates; returns the MSE.
    pub fn forward(&mut self, coords: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
        let cfg = self.model.config();
        let n = coords.nrows();
        if n == 0 {
            return Err(RetoError::EmptyInput("forward pass over zero points".into()));
        }
        if target.dim() != (n, cfg.out_channels) {
            return Err(RetoError::Shape(format!(
                "target {:?} does not match {n} points x {} channels",
                target.dim(),
                cfg.out_channels
            )));
        }
        let p = self.model.params();
        let dh = cfg.head_dim();
        let features = self.model.input_features(coords)?;
        let phases = self.model.phases(coords)?;
        let enc_pre = dense_forward(features.view(), &p.encoder_in);
        let enc_act = enc_pre.mapv(gelu);
        let mut x = dense_forward(enc_act.view(), &p.encoder_out);
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for b in &p.blocks {
            let (n1, ln1) = layer_norm_forward(x.view(), &b.ln1);
            let heads = b
                .heads
                .par_iter()
                .map(|h| head_forward(n1.view(), h, phases.as_ref()))
                .collect::<Result<Vec<_>>>()?;
            let mut concat = Array2::zeros((n, cfg.latent_dim));
            for (h, t) in heads.iter().enumerate() {
                concat.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&t.p.dot(&t.v));
            }
            let hres = &x + &concat.dot(&b.wo);
            let (n2, ln2) = layer_norm_forward(hres.view(), &b.ln2);
            let ffn_pre = dense_forward(n2.view(), &b.ffn_in);
            let ffn_act = ffn_pre.mapv(gelu);
            let out = &hres + &dense_forward(ffn_act.view(), &b.ffn_out);
            blocks.push(BlockTape {
                x: std::mem::replace(&mut x, out),
                ln1,
                n1,
                heads,
                concat,
                ln2,
                n2,
                ffn_pre,
                ffn_act,
            });
        }
        let dec_pre = dense_forward(x.view(), &p.decoder_in);
        let dec_act = dec_pre.mapv(gelu);
        let pred = dense_forward(dec_act.view(), &p.decoder_out);
        let loss = super::mse_loss(pred.view(), target)?;
        self.tape = Some(Tape {
            features,
            enc_pre,
            enc_act,
            blocks,
            latent: x,
            dec_pre,
            dec_act,
            pred,
            target: target.to_owned(),
            phases,
        });
        Ok(loss)
    }

    /// Prediction from the recorded forward pass.
    pub fn prediction(&self) -> Option<&Array2<f64>> {
        self.tape.as_ref().map(|t| &t.pred)
    }

    /// Gradient of the recorded loss with respect to every parameter. Consumes the recording.
    pub fn backward(&mut self) -> Result<ParameterStore> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| RetoError::Usage("backward called before forward".into()))?;
        let p = self.model.params();
        let dh = self.model.config().head_dim();
        let mut g = p.zeros_like();

        let dpred = mse_grad(tape.pred.view(), tape.target.view())?;
        let d_dec_act = dense_backward(tape.dec_act.view(), &p.decoder_out, dpred.view(), &mut g.decoder_out);
        let d_dec_pre = &d_dec_act * &tape.dec_pre.mapv(gelu_grad);
        let mut dx = dense_backward(tape.latent.view(), &p.decoder_in, d_dec_pre.view(), &mut g.decoder_in);

        for (t, bt) in tape.blocks.iter().enumerate().rev() {
            let bp = &p.blocks[t];
            let gb = &mut g.blocks[t];
            // out = hres + FFN(LN2(hres))
            let d_ffn_act = dense_backward(bt.ffn_act.view(), &bp.ffn_out, dx.view(), &mut gb.ffn_out);
            let d_ffn_pre = &d_ffn_act * &bt.ffn_pre.mapv(gelu_grad);
            let d_n2 = dense_backward(bt.n2.view(), &bp.ffn_in, d_ffn_pre.view(), &mut gb.ffn_in);
            let d_hres = &dx + &layer_norm_backward(&bt.ln2, &bp.ln2, d_n2.view(), &mut gb.ln2);
            // hres = x + concat · Wo
            gb.wo += &bt.concat.t().dot(&d_hres);
            let d_concat = d_hres.dot(&bp.wo.t());
            let grads = bt
                .heads
                .par_iter()
                .zip(bp.heads.par_iter())
                .enumerate()
                .map(|(h, (ht, hp))| {
                    let d_out = d_concat.slice(s![.., h * dh..(h + 1) * dh]);
                    head_backward(ht, hp, bt.n1.view(), d_out, tape.phases.as_ref())
                })
                .collect::<Result<Vec<_>>>()?;
            let mut d_n1 = Array2::zeros(bt.n1.raw_dim());
            for (hg, slot) in grads.into_iter().zip(gb.heads.iter_mut()) {
                slot.wq += &hg.wq;
                slot.wk += &hg.wk;
                slot.wv += &hg.wv;
                d_n1 += &hg.dn1;
            }
            dx = &d_hres + &layer_norm_backward(&bt.ln1, &bp.ln1, d_n1.view(), &mut gb.ln1);
            debug_assert_eq!(bt.x.dim(), dx.dim());
        }

        let d_enc_act = dense_backward(tape.enc_act.view(), &p.encoder_out, dx.view(), &mut g.encoder_out);
        let d_enc_pre = &d_enc_act * &tape.enc_pre.mapv(gelu_grad);
        dense_backward_params(tape.features.view(), d_enc_pre.view(), &mut g.encoder_in);
        Ok(g)
    }
}

/// MSE on normalized coordinates and its gradient.
pub fn loss_and_gradient(model: &Model, coords: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, ParameterStore)> {
    let mut s = GradientSession::new(model);
    let loss = s.forward(coords, target)?;
    Ok((loss, s.backward()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};
    use crate::train::{finite_difference_gradcheck, mse_loss, Parameters};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            num_blocks: 1,
            num_heads: 2,
            latent_dim: 12,
            per_axis_dim: 4,
            encoder_hidden: 10,
            out_channels: 3,
            variant,
            ..Default::default()
        }
    }

    fn batch(seed: u64, n: usize, c: usize) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0)),
            Array2::from_shape_fn((n, c), |_| rng.random_range(-1.0..1.0)),
        )
    }

    #[test]
    fn backward_requires_forward() {
        let m = Model::init(tiny(Variant::Full), 0).unwrap();
        let mut s = GradientSession::new(&m);
        assert!(matches!(s.backward(), Err(RetoError::Usage(_))));
        let (x, y) = batch(1, 5, 3);
        s.forward(x.view(), y.view()).unwrap();
        s.backward().unwrap();
        assert!(matches!(s.backward(), Err(RetoError::Usage(_))));
    }

    #[test]
    fn recorded_forward_matches_inference() {
        let m = Model::init(ModelConfig { num_blocks: 2, ..tiny(Variant::Full) }, 4).unwrap();
        let (x, y) = batch(2, 7, 3);
        let mut s = GradientSession::new(&m);
        let loss = s.forward(x.view(), y.view()).unwrap();
        let pred = m.forward_normalized(x.view(), None).unwrap();
        for (a, b) in pred.iter().zip(s.prediction().unwrap().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((loss - mse_loss(pred.view(), y.view()).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences_in_every_variant() {
        for (i, v) in Variant::ALL.into_iter().enumerate() {
            let m = Model::init(tiny(v), 10 + i as u64).unwrap();
            let (x, y) = batch(20 + i as u64, 5, 3);
            let (_, g) = loss_and_gradient(&m, x.view(), y.view()).unwrap();
            let report = finite_difference_gradcheck(
                m.params(),
                &g,
                |p| {
                    let mm = Model::from_parts(m.config().clone(), p.clone())?;
                    mse_loss(mm.forward_normalized(x.view(), None)?.view(), y.view())
                },
                1e-5,
                200,
                7,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{v}: {report:?}");
        }
    }

    #[test]
    fn dead_parameter_has_zero_gradient() {
        // With the decoder output weights zeroed, the prediction is the output bias alone,
        // so nothing upstream of the decoder output layer receives gradient.
        let mut m = Model::init(tiny(Variant::Full), 3).unwrap();
        m.params_mut().decoder_out.weight.fill(0.0);
        let (x, y) = batch(5, 4, 3);
        let (_, g) = loss_and_gradient(&m, x.view(), y.view()).unwrap();
        for (name, data) in g.named_slices() {
            if name.starts_with("encoder") || name.starts_with("blocks") || name == "decoder.w1" || name == "decoder.b1" {
                assert!(data.iter().all(|v| *v == 0.0), "{name}");
            }
        }
        assert!(g.decoder_out.bias.iter().any(|v| *v != 0.0));
    }
}

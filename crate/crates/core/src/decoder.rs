//! Link decoders and a small feed-forward network.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::config::DecoderKind;
use crate::error::Result;

/// Fully connected network with relu between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// `widths` lists the input width, the hidden widths and the output width.
    pub fn new(store: &mut ParamStore, prefix: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                (
                    store.add_uniform(format!("{prefix}.layer{l}.w"), &[w[0], w[1]], w[0], rng),
                    store.add_uniform(format!("{prefix}.layer{l}.b"), &[w[1]], w[0], rng),
                )
            })
            .collect();
        Mlp { layers }
    }

    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    /// Dropout is applied to each hidden activation.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, dropout: f64) -> Result<Var> {
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            h = tape.matmul(h, wv)?;
            h = tape.add_row(h, bv)?;
            if l + 1 < self.layers.len() {
                h = tape.relu(h)?;
                h = tape.dropout(h, dropout)?;
            }
        }
        Ok(h)
    }
}

/// Scores `(h_u, h_i)` pairs as one logit per row.
#[derive(Clone, Debug)]
pub enum Decoder {
    /// Inner product.
    Dot,
    /// Two layers on `[h_u | h_i]` with hidden width `d`.
    Mlp(Mlp),
}

impl Decoder {
    pub fn new(kind: DecoderKind, store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut impl Rng) -> Self {
        match kind {
            DecoderKind::Dot => Decoder::Dot,
            DecoderKind::Mlp => Decoder::Mlp(Mlp::new(store, prefix, &[2 * dim, dim, 1], rng)),
        }
    }

    pub fn kind(&self) -> DecoderKind {
        match self {
            Decoder::Dot => DecoderKind::Dot,
            Decoder::Mlp(_) => DecoderKind::Mlp,
        }
    }

    /// `[n, d] x [n, d] -> [n, 1]` logits.
    pub fn score(&self, tape: &mut Tape, store: &ParamStore, hu: Var, hi: Var, dropout: f64) -> Result<Var> {
        match self {
            Decoder::Dot => {
                let p = tape.mul(hu, hi)?;
                tape.sum_last(p)
            }
            Decoder::Mlp(mlp) => {
                let x = tape.concat_last(&[hu, hi])?;
                mlp.forward(tape, store, x, dropout)
            }
        }
    }
}

/// Logit for a single pair, evaluated without recording.
pub fn link_score(decoder: &Decoder, store: &ParamStore, hu: &[f64], hi: &[f64]) -> Result<f64> {
    let mut tape = Tape::inference();
    let u = tape.constant(crate::Tensor::matrix(1, hu.len(), hu.to_vec())?);
    let i = tape.constant(crate::Tensor::matrix(1, hi.len(), hi.to_vec())?);
    let s = decoder.score(&mut tape, store, u, i, 0.0)?;
    Ok(tape.value(s).item())
}

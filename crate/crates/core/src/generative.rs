//! Decoder `P(x | v, s)` with a Bernoulli observation model.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{BoundMlp, Mlp};

/// Decoder means are squashed into `[EPS, 1 - EPS]`.
pub const EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderNet {
    pub net: Mlp,
    pub content_dim: usize,
}

impl DecoderNet {
    pub fn new<R: Rng + ?Sized>(
        content_dim: usize,
        style_dim: usize,
        hidden: &[usize],
        data_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(DecoderNet {
            net: Mlp::new(&sizes(content_dim + style_dim, hidden, data_dim), rng)?,
            content_dim,
        })
    }

    pub fn zeros(content_dim: usize, style_dim: usize, hidden: &[usize], data_dim: usize) -> Result<Self> {
        Ok(DecoderNet {
            net: Mlp::zeros(&sizes(content_dim + style_dim, hidden, data_dim))?,
            content_dim,
        })
    }

    pub fn style_dim(&self) -> usize {
        self.net.input_dim() - self.content_dim
    }

    pub fn data_dim(&self) -> usize {
        self.net.output_dim()
    }

    /// Bernoulli means for one `(v, s)` pair.
    pub fn decode(&self, v: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode_batch(&[(v, s)])?.pop().expect("one row"))
    }

    pub fn decode_batch(&self, pairs: &[(&[f64], &[f64])]) -> Result<Vec<Vec<f64>>> {
        let mut z = Vec::with_capacity(pairs.len() * self.net.input_dim());
        for (v, s) in pairs {
            if v.len() != self.content_dim || s.len() != self.style_dim() {
                return Err(Error::shape(
                    "decode",
                    &[self.content_dim, self.style_dim()],
                    &[v.len(), s.len()],
                ));
            }
            z.extend_from_slice(v);
            z.extend_from_slice(s);
        }
        let logits = self
            .net
            .forward(&Tensor::new(vec![pairs.len(), self.net.input_dim()], z)?)?;
        Ok(logits
            .data()
            .chunks_exact(self.data_dim())
            .map(|row| row.iter().map(|&l| squash(l)).collect())
            .collect())
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundDecoder<'t> {
        BoundDecoder {
            net: self.net.bind(tape),
        }
    }
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

fn squash(logit: f64) -> f64 {
    EPS + (1.0 - 2.0 * EPS) * crate::autodiff::sigmoid(logit)
}

pub struct BoundDecoder<'t> {
    pub net: BoundMlp<'t>,
}

impl<'t> BoundDecoder<'t> {
    /// `z` is `[n, d_c + d_s]`; returns Bernoulli means `[n, D]`.
    pub fn forward(&self, z: Var<'t>) -> Result<Var<'t>> {
        Ok(self
            .net
            .forward(z)?
            .sigmoid()
            .scale(1.0 - 2.0 * EPS)
            .offset(EPS))
    }
}

/// `Σ_k x_k log p_k + (1 - x_k) log(1 - p_k)`.
pub fn bernoulli_loglik(x: &[f64], p: &[f64]) -> Result<f64> {
    if x.len() != p.len() {
        return Err(Error::shape("bernoulli_loglik", &[x.len()], &[p.len()]));
    }
    if let Some(bad) = p.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Domain(format!("Bernoulli mean {bad} outside (0, 1)")));
    }
    if let Some(bad) = x.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Domain(format!("observation {bad} outside [0, 1]")));
    }
    Ok(x.iter()
        .zip(p)
        .map(|(&x, &p)| x * p.ln() + (1.0 - x) * (1.0 - p).ln())
        .sum())
}

/// Tape version of [`bernoulli_loglik`]; `x` is a constant of the same shape as `p`.
pub fn bernoulli_loglik_tape<'t>(x: &Tensor, p: Var<'t>) -> Result<Var<'t>> {
    let tape = p.tape();
    let xv = tape.constant(x.clone());
    let one_minus_x = tape.constant(x.map(|v| 1.0 - v));
    let pos = xv.mul(p.ln())?;
    let neg = one_minus_x.mul(p.neg().offset(1.0).ln())?;
    Ok(pos.add(neg)?.sum())
}

//! Evidence lower bound: grouped reconstruction, content KL against the
//! joint prior, and style KL against `N(0, I)`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{Dataset, GroupedBatch};
use crate::error::{Error, Result};
use crate::generative::bernoulli_loglik_tape;
use crate::inference::{poe_fuse_groups, reparam_sample_tape, DiagGaussian};
use crate::linalg::{kl_diag_full, kl_diag_full_batched};
use crate::model::{BoundModel, Model};
use crate::prior::ChainGaussian;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboBreakdown {
    pub reconstruction: f64,
    pub content_kl: f64,
    pub style_kl: f64,
    pub total: f64,
}

impl ElboBreakdown {
    /// First non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("reconstruction", self.reconstruction),
            ("content_kl", self.content_kl),
            ("style_kl", self.style_kl),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// The three terms and their combination, still on the tape.
pub struct ElboTerms<'t> {
    pub reconstruction: Var<'t>,
    pub content_kl: Var<'t>,
    pub style_kl: Var<'t>,
    pub total: Var<'t>,
}

impl ElboTerms<'_> {
    pub fn breakdown(&self) -> ElboBreakdown {
        ElboBreakdown {
            reconstruction: self.reconstruction.item(),
            content_kl: self.content_kl.item(),
            style_kl: self.style_kl.item(),
            total: self.total.item(),
        }
    }
}

/// Standard-normal draws for one evaluation: one content row per level and
/// one style row per batch row.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboNoise {
    /// `[K, d_c]`
    pub content: Tensor,
    /// `[B, d_s]`
    pub style: Tensor,
}

impl ElboNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, k: usize, content_dim: usize, rows: usize, style_dim: usize) -> Result<Self> {
        let mut normals = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        Ok(ElboNoise {
            content: Tensor::new(vec![k, content_dim], normals(k * content_dim))?,
            style: Tensor::new(vec![rows, style_dim], normals(rows * style_dim))?,
        })
    }

    pub fn zeros(k: usize, content_dim: usize, rows: usize, style_dim: usize) -> Self {
        ElboNoise {
            content: Tensor::zeros(&[k, content_dim]),
            style: Tensor::zeros(&[rows, style_dim]),
        }
    }
}

/// Data rows of `batch` in group order plus their zero-based levels.
pub fn batch_rows(dataset: &Dataset, batch: &GroupedBatch) -> Result<(Tensor, Vec<usize>)> {
    let order = batch.order();
    if order.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut x = Vec::with_capacity(order.len() * dataset.data_dim);
    for &n in &order {
        let inst = dataset
            .instances
            .get(n)
            .ok_or_else(|| Error::Contract(format!("batch index {n} out of range")))?;
        x.extend_from_slice(&inst.x);
    }
    Ok((Tensor::new(vec![order.len(), dataset.data_dim], x)?, batch.row_levels()))
}

/// Record the ELBO for rows `x` (`[B, D]`) with zero-based `levels` on the
/// tape. Levels absent from the batch are fused to `N(0, I)`.
pub fn elbo_terms<'t>(
    model: &BoundModel<'t>,
    x: &Tensor,
    levels: &[usize],
    noise: &ElboNoise,
) -> Result<ElboTerms<'t>> {
    let tape: &'t Tape = model.content_encoder.net.layers[0].0.tape();
    let (rows, _) = x.dims2()?;
    if rows == 0 || levels.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if levels.len() != rows {
        return Err(Error::shape("elbo levels", &[rows], &[levels.len()]));
    }
    if let Some(&bad) = levels.iter().find(|&&l| l >= model.k) {
        return Err(Error::Contract(format!("level index {bad} outside 0..{}", model.k)));
    }
    let xv = tape.constant(x.clone());

    let (content_mean, content_logvar) = model.content_encoder.forward(xv)?;
    let (style_mean, style_logvar) = model.style_encoder.forward(xv)?;

    let (group_mean, group_var) = poe_fuse_groups(content_mean, content_logvar, levels, model.k)?;
    let v = reparam_sample_tape(group_mean, group_var, &noise.content)?.gather_rows(levels)?;
    let style_eps = tape.constant(noise.style.clone());
    let s = style_mean.add(style_logvar.scale(0.5).exp().mul(style_eps)?)?;

    let p = model.decoder.forward(v.concat_cols(s)?)?;
    let reconstruction = bernoulli_loglik_tape(x, p)?;

    let (prior_mean, prior_cov) = model.prior_moments(tape)?;
    let content_kl = kl_diag_full_batched(
        group_mean.transpose()?,
        group_var.transpose()?,
        prior_mean,
        prior_cov,
    )?;

    let style_kl = style_logvar
        .exp()
        .add(style_mean.square())?
        .sub(style_logvar)?
        .offset(-1.0)
        .sum()
        .scale(0.5);

    let total = reconstruction.sub(content_kl)?.sub(style_kl)?;
    Ok(ElboTerms {
        reconstruction,
        content_kl,
        style_kl,
        total,
    })
}

pub fn elbo(model: &Model, x: &Tensor, levels: &[usize], noise: &ElboNoise) -> Result<ElboBreakdown> {
    let tape = Tape::new();
    Ok(elbo_terms(&model.bind(&tape), x, levels, noise)?.breakdown())
}

/// ELBO and the gradient of the loss `-total` for every parameter, in
/// catalog order.
pub fn loss_gradients(
    model: &Model,
    x: &Tensor,
    levels: &[usize],
    noise: &ElboNoise,
) -> Result<(ElboBreakdown, Vec<Tensor>)> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let terms = elbo_terms(&bound, x, levels, noise)?;
    let breakdown = terms.breakdown();
    let grads = tape.backward(terms.total.neg())?;
    Ok((breakdown, bound.leaves().into_iter().map(|l| grads.wrt(l)).collect()))
}

/// `Σ_l KL(N(m_l, diag(s_l)) || N(a_l, C_l))` where `m_l`, `s_l` collect
/// coordinate `l` of the `K` group posteriors.
pub fn content_kl(posteriors: &[DiagGaussian], prior: &ChainGaussian) -> Result<f64> {
    let k = prior.k;
    if posteriors.len() != k {
        return Err(Error::shape("content_kl", &[k], &[posteriors.len()]));
    }
    if let Some(q) = posteriors.iter().find(|q| q.dim() != prior.d) {
        return Err(Error::shape("content_kl", &[prior.d], &[q.dim()]));
    }
    let mut total = 0.0;
    for l in 0..prior.d {
        let m: Vec<f64> = posteriors.iter().map(|q| q.mean[l]).collect();
        let s: Vec<f64> = posteriors.iter().map(|q| q.var[l]).collect();
        total += kl_diag_full(&m, &s, prior.mean(l), &prior.covs[l])?;
    }
    Ok(total)
}

/// `KL(q || N(0, I))`.
pub fn style_kl(q: &DiagGaussian) -> f64 {
    0.5 * q
        .mean
        .iter()
        .zip(&q.var)
        .map(|(m, s)| s + m * m - 1.0 - s.ln())
        .sum::<f64>()
}

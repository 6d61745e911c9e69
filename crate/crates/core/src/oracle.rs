//! Independent reference computations: Monte-Carlo moments and KL,
//! grid-normalized products of experts, a monolithic joint KL built with
//! nalgebra, and finite-difference checks of the full objective.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::check::{check_gradients, GradCheckReport};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::inference::{poe_fuse, DiagGaussian};
use crate::linalg::SpdMatrix;
use crate::model::{Model, ModelConfig};
use crate::objective::{content_kl, elbo_terms, ElboNoise};
use crate::prior::{ChainGaussian, PriorMode, Spacing, SpacingParams};

/// Valid prior parameters with moderate spacings.
pub fn random_spacing<R: Rng + ?Sized>(rng: &mut R, d: usize, k: usize) -> Result<SpacingParams> {
    let mut p = SpacingParams::init(d, k)?;
    for x in p.mu1.data_mut() {
        *x = rng.random_range(-1.0..1.0);
    }
    if let (Some(db), Some(sb)) = (&mut p.delta_bar, &mut p.sigma_bar) {
        for x in db.data_mut() {
            *x = rng.random_range(-1.0..0.5);
        }
        for x in sb.data_mut() {
            *x = rng.random_range(-2.0..2.0);
        }
    }
    Ok(p)
}

pub fn random_diag<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DiagGaussian {
    DiagGaussian {
        mean: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
        var: (0..d).map(|_| rng.random_range(0.2..2.0)).collect(),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MomentCheck {
    pub max_mean_error: f64,
    pub max_cov_error: f64,
}

/// Largest absolute gaps between closed-form joint moments and the
/// empirical moments of `samples` ancestral draws.
pub fn ancestral_moments<R: Rng + ?Sized>(params: &SpacingParams, samples: usize, rng: &mut R) -> MomentCheck {
    let (d, k) = (params.d, params.k);
    let spacing = params.constrain();
    let joint = spacing.joint_moments();
    let mut sum = vec![0.0; d * k];
    let mut cross = vec![0.0; d * k * k];
    for _ in 0..samples {
        let v = spacing.sample(rng);
        for l in 0..d {
            let row = &v[l * k..(l + 1) * k];
            for i in 0..k {
                sum[l * k + i] += row[i];
                for j in i..k {
                    cross[(l * k + i) * k + j] += row[i] * row[j];
                }
            }
        }
    }
    let n = samples as f64;
    let mut out = MomentCheck {
        max_mean_error: 0.0,
        max_cov_error: 0.0,
    };
    for l in 0..d {
        for i in 0..k {
            let mi = sum[l * k + i] / n;
            out.max_mean_error = out.max_mean_error.max((mi - joint.mean(l)[i]).abs());
            for j in i..k {
                let mj = sum[l * k + j] / n;
                let cov = cross[(l * k + i) * k + j] / n - mi * mj;
                out.max_cov_error = out.max_cov_error.max((cov - joint.covs[l].at(i, j)).abs());
            }
        }
    }
    out
}

/// Largest gap between the chain-form and joint-form log-densities over
/// `points` jittered prior draws.
pub fn chain_joint_gap<R: Rng + ?Sized>(params: &SpacingParams, points: usize, rng: &mut R) -> Result<f64> {
    let spacing = params.constrain();
    let joint = spacing.joint_moments();
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let v: Vec<f64> = spacing
            .sample(rng)
            .into_iter()
            .map(|x| x + rng.random_range(-0.5..0.5))
            .collect();
        worst = worst.max((spacing.log_density(&v)? - joint.log_density(&v)?).abs());
    }
    Ok(worst)
}

/// Monte-Carlo estimate of `KL(N(m, diag(s)) || N(a, C))` and its standard error.
pub fn kl_monte_carlo<R: Rng + ?Sized>(
    m: &[f64],
    s: &[f64],
    a: &[f64],
    c: &SpdMatrix,
    samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let k = m.len();
    let chol = c.cholesky()?;
    let logdet_s: f64 = s.iter().map(|v| v.ln()).sum();
    let const_diff = 0.5 * (chol.logdet() - logdet_s);
    let (mut sum, mut sum2) = (0.0, 0.0);
    let mut r = vec![0.0; k];
    for _ in 0..samples {
        let mut quad_q = 0.0;
        for i in 0..k {
            let z: f64 = rng.sample(StandardNormal);
            quad_q += z * z;
            r[i] = m[i] + s[i].sqrt() * z - a[i];
        }
        chol.forward_substitute(&mut r);
        let quad_p: f64 = r.iter().map(|x| x * x).sum();
        let term = const_diff - 0.5 * quad_q + 0.5 * quad_p;
        sum += term;
        sum2 += term * term;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum2 / n - mean * mean).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// Content KL computed on the full `(d·K)`-dimensional Gaussian, with
/// coordinates ordered level-major and factored by nalgebra.
pub fn monolithic_content_kl(posteriors: &[DiagGaussian], prior: &ChainGaussian) -> Result<f64> {
    let (d, k) = (prior.d, prior.k);
    if posteriors.len() != k || posteriors.iter().any(|q| q.dim() != d) {
        return Err(Error::Contract("posterior set does not match prior".into()));
    }
    let n = d * k;
    let idx = |i: usize, l: usize| i * d + l;
    let mut cov = DMatrix::<f64>::zeros(n, n);
    let mut diff = DVector::<f64>::zeros(n);
    let mut q_var = DVector::<f64>::zeros(n);
    for l in 0..d {
        for i in 0..k {
            diff[idx(i, l)] = prior.mean(l)[i] - posteriors[i].mean[l];
            q_var[idx(i, l)] = posteriors[i].var[l];
            for j in 0..k {
                cov[(idx(i, l), idx(j, l))] = prior.covs[l].at(i, j);
            }
        }
    }
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Domain("monolithic prior covariance not positive definite".into()))?;
    let inv = chol.inverse();
    let trace: f64 = (0..n).map(|p| inv[(p, p)] * q_var[p]).sum();
    let quad = diff.dot(&(&inv * &diff));
    let logdet_p = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let logdet_q: f64 = q_var.iter().map(|x| x.ln()).sum();
    Ok(0.5 * (trace + quad - n as f64 + logdet_p - logdet_q))
}

/// Largest gap between [`content_kl`] and [`monolithic_content_kl`] over
/// `trials` random instances.
pub fn kl_decomposition_gap<R: Rng + ?Sized>(d: usize, k: usize, trials: usize, rng: &mut R) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let prior = random_spacing(rng, d, k)?.joint_moments();
        let qs: Vec<DiagGaussian> = (0..k).map(|_| random_diag(rng, d)).collect();
        worst = worst.max((content_kl(&qs, &prior)? - monolithic_content_kl(&qs, &prior)?).abs());
    }
    Ok(worst)
}

/// Fused mean and variance of 1-D experts by normalizing the product
/// density on a uniform grid.
pub fn grid_fused_moments(experts: &[(f64, f64)], points: usize) -> (f64, f64) {
    let lo = experts
        .iter()
        .map(|(m, v)| m - 10.0 * v.sqrt())
        .fold(f64::INFINITY, f64::min);
    let hi = experts
        .iter()
        .map(|(m, v)| m + 10.0 * v.sqrt())
        .fold(f64::NEG_INFINITY, f64::max);
    let step = (hi - lo) / (points - 1) as f64;
    let log_density = |x: f64| -> f64 { experts.iter().map(|(m, v)| -0.5 * (x - m) * (x - m) / v).sum() };
    let peak = (0..points)
        .map(|i| log_density(lo + i as f64 * step))
        .fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut first, mut second) = (0.0, 0.0, 0.0);
    for i in 0..points {
        let x = lo + i as f64 * step;
        let w = (log_density(x) - peak).exp();
        z += w;
        first += w * x;
        second += w * x * x;
    }
    let mean = first / z;
    (mean, second / z - mean * mean)
}

#[derive(Clone, Copy, Debug)]
pub struct PoeCheck {
    pub max_grid_error: f64,
    pub max_permutation_gap: f64,
    pub max_incremental_gap: f64,
}

/// Compare [`poe_fuse`] against grid normalization, reordering and
/// two-stage fusion over `sets` random sets of 2 to 5 experts.
pub fn poe_checks<R: Rng + ?Sized>(sets: usize, d: usize, rng: &mut R) -> Result<PoeCheck> {
    let mut out = PoeCheck {
        max_grid_error: 0.0,
        max_permutation_gap: 0.0,
        max_incremental_gap: 0.0,
    };
    let gap = |a: &DiagGaussian, b: &DiagGaussian| -> f64 {
        a.mean
            .iter()
            .zip(&b.mean)
            .chain(a.var.iter().zip(&b.var))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    for _ in 0..sets {
        let n = rng.random_range(2..=5);
        let experts: Vec<DiagGaussian> = (0..n).map(|_| random_diag(rng, d)).collect();
        let fused = poe_fuse(&experts)?;
        for l in 0..d {
            let pairs: Vec<(f64, f64)> = experts.iter().map(|q| (q.mean[l], q.var[l])).collect();
            let (gm, gv) = grid_fused_moments(&pairs, 200_001);
            out.max_grid_error = out
                .max_grid_error
                .max((gm - fused.mean[l]).abs())
                .max((gv - fused.var[l]).abs());
        }
        let mut shuffled = experts.clone();
        shuffled.shuffle(rng);
        out.max_permutation_gap = out.max_permutation_gap.max(gap(&fused, &poe_fuse(&shuffled)?));
        let cut = rng.random_range(1..n);
        let staged = poe_fuse(&[poe_fuse(&experts[..cut])?, poe_fuse(&experts[cut..])?])?;
        out.max_incremental_gap = out.max_incremental_gap.max(gap(&fused, &staged));
    }
    Ok(out)
}

/// Per-link frequency of `v[i+1] < v[i]` and the frequency of draws with
/// at least one inversion anywhere.
pub fn inversion_rates<R: Rng + ?Sized>(spacing: &Spacing, samples: usize, rng: &mut R) -> (Vec<f64>, f64) {
    let (d, k) = (spacing.d, spacing.k);
    let mut per_link = vec![0usize; d * (k - 1)];
    let mut any = 0usize;
    for _ in 0..samples {
        let v = spacing.sample(rng);
        let mut hit = false;
        for l in 0..d {
            for i in 1..k {
                if v[l * k + i] < v[l * k + i - 1] {
                    per_link[l * (k - 1) + i - 1] += 1;
                    hit = true;
                }
            }
        }
        any += hit as usize;
    }
    let n = samples as f64;
    (per_link.into_iter().map(|c| c as f64 / n).collect(), any as f64 / n)
}

/// Spacing with every link at the tightest allowed ratio `Δ = 3σ`.
pub fn tight_spacing<R: Rng + ?Sized>(rng: &mut R, d: usize, k: usize) -> Result<Spacing> {
    let delta: Vec<f64> = (0..d * (k - 1)).map(|_| rng.random_range(0.3..3.0)).collect();
    let sigma = delta.iter().map(|x| x / 3.0).collect();
    Spacing::new(d, k, vec![0.0; d], delta, sigma)
}

/// Finite-difference check of the full objective with respect to every
/// parameter, on random data with `per_group` rows per level.
pub fn elbo_gradient_check(config: ModelConfig, per_group: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(config.clone(), &mut rng)?;
    if config.prior_mode == PriorMode::Ordinal {
        model.prior = Some(random_spacing(&mut rng, config.content_dim, config.k)?);
    }
    let rows = per_group * config.k;
    let x = Tensor::new(
        vec![rows, config.data_dim],
        (0..rows * config.data_dim).map(|_| rng.random_range(0.0..1.0)).collect(),
    )?;
    let levels: Vec<usize> = (0..rows).map(|r| r / per_group).collect();
    let noise = ElboNoise::draw(&mut rng, config.k, config.content_dim, rows, config.style_dim)?;
    let inputs: Vec<Tensor> = model.named().into_iter().map(|(_, t)| t.clone()).collect();
    check_gradients(
        |_, leaves| Ok(elbo_terms(&model.bind_leaves(leaves)?, &x, &levels, &noise)?.total),
        &inputs,
        None,
        1e-5,
    )
}

/// Best-of-`reps` wall time of one [`content_kl`] evaluation.
pub fn content_kl_seconds(d: usize, k: usize, reps: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prior = random_spacing(&mut rng, d, k)?.joint_moments();
    let qs: Vec<DiagGaussian> = (0..k).map(|_| random_diag(&mut rng, d)).collect();
    let mut best = f64::INFINITY;
    for _ in 0..reps {
        let fresh = ChainGaussian {
            covs: prior.covs.iter().map(|c| SpdMatrix::new(k, c.entries().to_vec())).collect::<Result<_>>()?,
            ..prior.clone()
        };
        let start = Instant::now();
        std::hint::black_box(content_kl(&qs, &fresh)?);
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// One KL instance for Monte-Carlo comparison: `(m, s, a, C)`.
pub fn random_kl_instance<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, SpdMatrix)> {
    let prior = random_spacing(rng, 1, k)?.joint_moments();
    let q = random_diag(rng, k);
    let a = prior.mean(0).to_vec();
    Ok((q.mean, q.var, a, prior.covs[0].clone()))
}

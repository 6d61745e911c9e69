//! Conditional Gaussian spacing prior over the K content reference vectors.
//!
//! Per latent dimension the K coordinates form a chain
//! `v₁ ~ N(μ₁, 1)`, `vᵢ | vᵢ₋₁ ~ N(vᵢ₋₁ + Δᵢ, σᵢ²)` with `0 < σᵢ ≤ Δᵢ/3`.
//! The chain is jointly Gaussian with means `μ₁ + Δ₂ + … + Δᵢ` and
//! covariances `Cov(vᵢ, vⱼ) = 1 + σ₂² + … + σ²_min(i,j)`; dimensions are
//! independent.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{sigmoid, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::linalg::SpdMatrix;

/// Ratio between a link's spacing and its maximal standard deviation.
pub const SEPARATION: f64 = 3.0;

/// Standard deviation of the first chain element.
pub const FIRST_SIGMA: f64 = 1.0;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Unconstrained, learnable prior parameters.
///
/// `delta_bar` and `sigma_bar` are `[d, K-1]` and absent when `K = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpacingParams {
    pub d: usize,
    pub k: usize,
    pub mu1: Tensor,
    pub delta_bar: Option<Tensor>,
    pub sigma_bar: Option<Tensor>,
}

impl SpacingParams {
    /// μ₁ = 0, Δ = 1 and σ = Δ/6 in every dimension.
    pub fn init(d: usize, k: usize) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(Error::Contract(format!("prior needs d, K >= 1 (got {d}, {k})")));
        }
        let links = (k > 1).then(|| Tensor::zeros(&[d, k - 1]));
        Ok(SpacingParams {
            d,
            k,
            mu1: Tensor::zeros(&[d]),
            delta_bar: links.clone(),
            sigma_bar: links,
        })
    }

    pub fn from_parts(mu1: Tensor, delta_bar: Option<Tensor>, sigma_bar: Option<Tensor>) -> Result<Self> {
        let d = mu1.len();
        if mu1.shape() != [d] {
            return Err(Error::shape("SpacingParams", mu1.shape(), &[d]));
        }
        let k = match (&delta_bar, &sigma_bar) {
            (None, None) => 1,
            (Some(db), Some(sb)) => {
                let (rows, links) = db.dims2()?;
                if rows != d || sb.shape() != db.shape() {
                    return Err(Error::shape("SpacingParams", db.shape(), sb.shape()));
                }
                links + 1
            }
            _ => return Err(Error::Contract("delta_bar and sigma_bar must both be present".into())),
        };
        Ok(SpacingParams {
            d,
            k,
            mu1,
            delta_bar,
            sigma_bar,
        })
    }

    /// Map to positive spacings `Δ = exp(Δ̄)` and scales `σ = (Δ/3)·sigmoid(σ̄)`.
    pub fn constrain(&self) -> Spacing {
        let (delta, sigma) = match (&self.delta_bar, &self.sigma_bar) {
            (Some(db), Some(sb)) => db
                .data()
                .iter()
                .zip(sb.data())
                .map(|(&db, &sb)| {
                    let delta = db.exp();
                    (delta, delta * sigmoid(sb) / SEPARATION)
                })
                .unzip(),
            _ => (Vec::new(), Vec::new()),
        };
        Spacing {
            d: self.d,
            k: self.k,
            mu1: self.mu1.data().to_vec(),
            delta,
            sigma,
        }
    }

    pub fn joint_moments(&self) -> ChainGaussian {
        self.constrain().joint_moments()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.constrain().sample(rng)
    }

    pub fn log_density(&self, v: &[f64]) -> Result<f64> {
        self.constrain().log_density(v)
    }

    /// Record the parameters as gradient leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundSpacing<'t> {
        BoundSpacing {
            d: self.d,
            k: self.k,
            mu1: tape.param(self.mu1.clone()),
            delta_bar: self.delta_bar.as_ref().map(|t| tape.param(t.clone())),
            sigma_bar: self.sigma_bar.as_ref().map(|t| tape.param(t.clone())),
        }
    }
}

/// [`SpacingParams`] recorded on a tape.
pub struct BoundSpacing<'t> {
    pub d: usize,
    pub k: usize,
    pub mu1: Var<'t>,
    pub delta_bar: Option<Var<'t>>,
    pub sigma_bar: Option<Var<'t>>,
}

impl<'t> BoundSpacing<'t> {
    /// Parameter leaves in [`crate::model::Model`] catalog order.
    pub fn leaves(&self) -> Vec<Var<'t>> {
        let mut v = vec![self.mu1];
        v.extend(self.delta_bar);
        v.extend(self.sigma_bar);
        v
    }

    /// Differentiable joint moments: means `[d, K]` and covariances `[d, K, K]`.
    pub fn moments(&self) -> Result<(Var<'t>, Var<'t>)> {
        let (d, k) = (self.d, self.k);
        let tape = self.mu1.tape();
        let (Some(db), Some(sb)) = (self.delta_bar, self.sigma_bar) else {
            let a = self.mu1.reshape(&[d, 1])?;
            let c = tape.constant(Tensor::full(&[d, 1, 1], FIRST_SIGMA * FIRST_SIGMA));
            return Ok((a, c));
        };
        let delta = db.exp();
        let sigma = delta.mul(sb.sigmoid())?.scale(1.0 / SEPARATION);
        // upper[j][i] = 1 when link j+2 contributes to level i+1
        let mut upper = vec![0.0; (k - 1) * k];
        for j in 0..k - 1 {
            for i in j + 1..k {
                upper[j * k + i] = 1.0;
            }
        }
        let upper = tape.constant(Tensor::matrix(k - 1, k, upper)?);

        let mu_index: Vec<usize> = (0..d).flat_map(|l| std::iter::repeat_n(l, k)).collect();
        let a = self
            .mu1
            .gather(&mu_index, &[d, k])?
            .add(delta.matmul(upper)?)?;

        let cum_var = sigma.square().matmul(upper)?.offset(FIRST_SIGMA * FIRST_SIGMA);
        let cov_index: Vec<usize> = (0..d)
            .flat_map(|l| (0..k).flat_map(move |i| (0..k).map(move |j| l * k + i.min(j))))
            .collect();
        let c = cum_var.gather(&cov_index, &[d, k, k])?;
        Ok((a, c))
    }
}

/// Constrained chain parameters: `delta`, `sigma` are `[d, K-1]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spacing {
    pub d: usize,
    pub k: usize,
    pub mu1: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Spacing {
    /// Validates `Δ > 0` and `0 < σ ≤ Δ/3`.
    pub fn new(d: usize, k: usize, mu1: Vec<f64>, delta: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(Error::Contract(format!("prior needs d, K >= 1 (got {d}, {k})")));
        }
        let links = d * (k - 1);
        if mu1.len() != d || delta.len() != links || sigma.len() != links {
            return Err(Error::shape("Spacing::new", &[d, k], &[mu1.len(), delta.len(), sigma.len()]));
        }
        for (&dl, &sg) in delta.iter().zip(&sigma) {
            if !(dl > 0.0 && sg > 0.0 && sg <= dl / SEPARATION * (1.0 + 1e-12)) {
                return Err(Error::Domain(format!(
                    "spacing constraint violated: delta {dl}, sigma {sg}"
                )));
            }
        }
        Ok(Spacing { d, k, mu1, delta, sigma })
    }

    fn link(&self, l: usize, i: usize) -> (f64, f64) {
        let idx = l * (self.k - 1) + i - 1;
        (self.delta[idx], self.sigma[idx])
    }

    pub fn joint_moments(&self) -> ChainGaussian {
        let (d, k) = (self.d, self.k);
        let mut means = Vec::with_capacity(d * k);
        let mut covs = Vec::with_capacity(d);
        for l in 0..d {
            let mut mean = self.mu1[l];
            let mut cum = vec![FIRST_SIGMA * FIRST_SIGMA];
            means.push(mean);
            for i in 1..k {
                let (delta, sigma) = self.link(l, i);
                mean += delta;
                means.push(mean);
                cum.push(cum[i - 1] + sigma * sigma);
            }
            let mut c = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..k {
                    c[i * k + j] = cum[i.min(j)];
                }
            }
            covs.push(SpdMatrix::new(k, c).expect("chain covariance is symmetric"));
        }
        ChainGaussian { d, k, means, covs }
    }

    /// Ancestral draw driven by caller-supplied standard normals (`d·K` of them).
    pub fn sample_with_noise(&self, noise: &[f64]) -> Result<Vec<f64>> {
        let (d, k) = (self.d, self.k);
        if noise.len() != d * k {
            return Err(Error::shape("sample_chain", &[d, k], &[noise.len()]));
        }
        let mut v = vec![0.0; d * k];
        for l in 0..d {
            v[l * k] = self.mu1[l] + FIRST_SIGMA * noise[l * k];
            for i in 1..k {
                let (delta, sigma) = self.link(l, i);
                v[l * k + i] = v[l * k + i - 1] + delta + sigma * noise[l * k + i];
            }
        }
        Ok(v)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let noise: Vec<f64> = (0..self.d * self.k).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_with_noise(&noise).expect("noise sized to the chain")
    }

    /// Chain-form log-density, summed over dimensions. `v` is `[d, K]`.
    pub fn log_density(&self, v: &[f64]) -> Result<f64> {
        let (d, k) = (self.d, self.k);
        if v.len() != d * k {
            return Err(Error::shape("log_density", &[d, k], &[v.len()]));
        }
        let mut total = 0.0;
        for l in 0..d {
            total += normal_log_pdf(v[l * k], self.mu1[l], FIRST_SIGMA);
            for i in 1..k {
                let (delta, sigma) = self.link(l, i);
                total += normal_log_pdf(v[l * k + i], v[l * k + i - 1] + delta, sigma);
            }
        }
        Ok(total)
    }
}

fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * (LN_2PI + z * z) - sd.ln()
}

/// Per-dimension joint Gaussian over the K content coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainGaussian {
    pub d: usize,
    pub k: usize,
    /// `[d, K]` row-major.
    pub means: Vec<f64>,
    pub covs: Vec<SpdMatrix>,
}

impl ChainGaussian {
    pub fn mean(&self, l: usize) -> &[f64] {
        &self.means[l * self.k..(l + 1) * self.k]
    }

    /// Joint-form log-density through the Cholesky factors. `v` is `[d, K]`.
    pub fn log_density(&self, v: &[f64]) -> Result<f64> {
        let (d, k) = (self.d, self.k);
        if v.len() != d * k {
            return Err(Error::shape("log_density", &[d, k], &[v.len()]));
        }
        let mut total = 0.0;
        for l in 0..d {
            let chol = self.covs[l].cholesky()?;
            let mut r: Vec<f64> = v[l * k..(l + 1) * k]
                .iter()
                .zip(self.mean(l))
                .map(|(x, m)| x - m)
                .collect();
            chol.forward_substitute(&mut r);
            let quad: f64 = r.iter().map(|x| x * x).sum();
            total += -0.5 * (k as f64 * LN_2PI + chol.logdet() + quad);
        }
        Ok(total)
    }

    /// Draw through the Cholesky factors: `a + L z`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let (d, k) = (self.d, self.k);
        let mut out = Vec::with_capacity(d * k);
        for l in 0..d {
            let chol = self.covs[l].cholesky()?;
            let z: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            for i in 0..k {
                let lz: f64 = (0..=i).map(|p| chol.at(i, p) * z[p]).sum();
                out.push(self.mean(l)[i] + lz);
            }
        }
        Ok(out)
    }
}

/// Standard-normal moments for every level: the non-ordinal ablation.
pub fn iid_prior_moments(d: usize, k: usize) -> Result<ChainGaussian> {
    if d == 0 || k == 0 {
        return Err(Error::Contract(format!("prior needs d, K >= 1 (got {d}, {k})")));
    }
    Ok(ChainGaussian {
        d,
        k,
        means: vec![0.0; d * k],
        covs: (0..d).map(|_| SpdMatrix::identity(k)).collect(),
    })
}

/// Which content prior the model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorMode {
    Ordinal,
    Iid,
}

impl PriorMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PriorMode::Ordinal => "ordinal",
            PriorMode::Iid => "iid",
        }
    }
}

impl std::str::FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ordinal" => Ok(PriorMode::Ordinal),
            "iid" => Ok(PriorMode::Iid),
            other => Err(Error::Contract(format!(
                "unknown prior mode {other:?} (expected ordinal or iid)"
            ))),
        }
    }
}

impl std::fmt::Display for PriorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::kl_diag_full;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, d: usize, k: usize) -> SpacingParams {
        let mut p = SpacingParams::init(d, k).unwrap();
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
        p
    }

    #[test]
    fn constrain_trivial_values() {
        let s = SpacingParams::init(2, 3).unwrap().constrain();
        assert!(s.delta.iter().all(|&d| d == 1.0));
        assert!(s.sigma.iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-16));

        let mut p = SpacingParams::init(1, 2).unwrap();
        p.sigma_bar.as_mut().unwrap().data_mut()[0] = 40.0;
        let s = p.constrain();
        assert!((s.sigma[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!(s.sigma[0] <= s.delta[0] / 3.0);
    }

    #[test]
    fn three_level_fixture_is_exact() {
        let s = Spacing::new(1, 3, vec![0.0], vec![1.0, 1.0], vec![1.0 / 3.0, 1.0 / 3.0]).unwrap();
        let g = s.joint_moments();
        assert_eq!(g.means, vec![0.0, 1.0, 2.0]);
        let want = [
            1.0,
            1.0,
            1.0,
            1.0,
            10.0 / 9.0,
            10.0 / 9.0,
            1.0,
            10.0 / 9.0,
            11.0 / 9.0,
        ];
        assert_eq!(g.covs[0].entries(), &want);
    }

    #[test]
    fn single_level_degenerates_to_unit_normal() {
        let p = SpacingParams::from_parts(Tensor::vector(vec![0.7]), None, None).unwrap();
        let g = p.joint_moments();
        assert_eq!(g.means, vec![0.7]);
        assert_eq!(g.covs[0].entries(), &[1.0]);

        let s = SpacingParams::init(1, 1).unwrap();
        let peak = s.log_density(&[0.0]).unwrap();
        assert!((peak + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn moments_match_ancestral_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (d, k) = (2, 6);
        let p = random_params(&mut rng, d, k);
        let g = p.joint_moments();
        let n = 200_000;
        let mut sum = vec![0.0; d * k];
        let mut sum2 = vec![0.0; d * k * k];
        for _ in 0..n {
            let v = p.sample(&mut rng);
            for l in 0..d {
                for i in 0..k {
                    sum[l * k + i] += v[l * k + i];
                    for j in 0..k {
                        sum2[(l * k + i) * k + j] += v[l * k + i] * v[l * k + j];
                    }
                }
            }
        }
        for l in 0..d {
            for i in 0..k {
                let mi = sum[l * k + i] / n as f64;
                assert!((mi - g.mean(l)[i]).abs() < 0.02);
                for j in 0..k {
                    let mj = sum[l * k + j] / n as f64;
                    let cov = sum2[(l * k + i) * k + j] / n as f64 - mi * mj;
                    assert!((cov - g.covs[l].at(i, j)).abs() < 0.05);
                }
            }
        }
    }

    #[test]
    fn noiseless_chain_is_the_mean_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(&mut rng, 3, 5);
        let s = p.constrain();
        let v = s.sample_with_noise(&[0.0; 15]).unwrap();
        let g = s.joint_moments();
        for l in 0..3 {
            let row = &v[l * 5..(l + 1) * 5];
            assert!(row.windows(2).all(|w| w[1] > w[0]));
            for i in 0..5 {
                assert!((row[i] - g.mean(l)[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tight_links_invert_at_the_three_sigma_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let k = 4;
        let delta = vec![0.6, 1.0, 2.5];
        let sigma: Vec<f64> = delta.iter().map(|d| d / 3.0).collect();
        let s = Spacing::new(1, k, vec![0.0], delta, sigma).unwrap();
        let n = 100_000;
        let mut inversions = vec![0usize; k - 1];
        for _ in 0..n {
            let v = s.sample(&mut rng);
            for i in 1..k {
                if v[i] < v[i - 1] {
                    inversions[i - 1] += 1;
                }
            }
        }
        for count in inversions {
            let f = count as f64 / n as f64;
            // Φ(-3) ≈ 0.00135
            assert!((0.0005..=0.0025).contains(&f), "frequency {f}");
        }
    }

    #[test]
    fn chain_and_joint_densities_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (d, k) = (3, 5);
        let p = random_params(&mut rng, d, k);
        let g = p.joint_moments();
        for _ in 0..100 {
            let v: Vec<f64> = p
                .sample(&mut rng)
                .into_iter()
                .map(|x| x + rng.random_range(-0.5..0.5))
                .collect();
            let chain = p.log_density(&v).unwrap();
            let joint = g.log_density(&v).unwrap();
            assert!((chain - joint).abs() < 1e-9, "{chain} vs {joint}");
        }
    }

    #[test]
    fn violated_link_is_penalised() {
        let s = Spacing::new(1, 3, vec![0.0], vec![1.0, 1.0], vec![0.2, 0.2]).unwrap();
        let mean = s.joint_moments().means;
        let at_mean = s.log_density(&mean).unwrap();
        // v₂ placed 3σ below v₁ while v₃ sits Δ above v₂
        let v2 = mean[0] - 3.0 * 0.2;
        let v = [mean[0], v2, v2 + 1.0];
        let violated = s.log_density(&v).unwrap();
        assert!(at_mean - violated >= 18.0 - 1e-9);
    }

    #[test]
    fn iid_moments_and_block_kl() {
        let g = iid_prior_moments(3, 4).unwrap();
        assert!(g.means.iter().all(|&m| m == 0.0));
        assert!(g.covs.iter().all(|c| *c == SpdMatrix::identity(4)));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..2.0)).collect();
        let joint = kl_diag_full(&m, &s, g.mean(0), &g.covs[0]).unwrap();
        let per_level: f64 = (0..4)
            .map(|i| 0.5 * (s[i] + m[i] * m[i] - 1.0 - s[i].ln()))
            .sum();
        assert!((joint - per_level).abs() < 1e-12);
    }

    #[test]
    fn iid_samples_have_identity_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = iid_prior_moments(1, 4).unwrap();
        let n = 100_000;
        let mut sum2 = [0.0; 16];
        for _ in 0..n {
            let v = g.sample(&mut rng).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    sum2[i * 4 + j] += v[i] * v[j];
                }
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((sum2[i * 4 + j] / n as f64 - want).abs() < 0.05);
            }
        }
    }

    #[test]
    fn tape_moments_match_plain_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for k in [1, 2, 5] {
            let p = random_params(&mut rng, 3, k);
            let g = p.joint_moments();
            let tape = Tape::new();
            let (a, c) = p.bind(&tape).moments().unwrap();
            for (x, y) in a.value().data().iter().zip(&g.means) {
                assert!((x - y).abs() < 1e-12);
            }
            let flat: Vec<f64> = g.covs.iter().flat_map(|c| c.entries().to_vec()).collect();
            for (x, y) in c.value().data().iter().zip(&flat) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn chain_structure_holds(seed in 0u64..500, d in 1usize..4, k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(&mut rng, d, k);
            let s = p.constrain();
            for (&dl, &sg) in s.delta.iter().zip(&s.sigma) {
                prop_assert!(dl > 0.0 && sg > 0.0 && sg < dl / 3.0);
            }
            let g = s.joint_moments();
            for l in 0..d {
                prop_assert!(g.mean(l).windows(2).all(|w| w[1] > w[0]));
                prop_assert!(g.covs[l].cholesky().is_ok());
                let mut cum = vec![1.0];
                for i in 1..k {
                    let sig = s.sigma[l * (k - 1) + i - 1];
                    cum.push(cum[i - 1] + sig * sig);
                }
                for i in 0..k {
                    for j in 0..k {
                        prop_assert_eq!(g.covs[l].at(i, j), cum[i.min(j)]);
                        prop_assert_eq!(g.covs[l].at(i, j), g.covs[l].at(i.min(j), i.min(j)));
                    }
                    if i > 0 {
                        prop_assert!(g.covs[l].at(i, i) >= g.covs[l].at(i - 1, i - 1));
                    }
                }
            }
        }
    }
}

//! Gaussian encoders, product-of-experts group fusion and reparameterized
//! sampling.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{BoundMlp, Mlp};

/// Log-variance head outputs are clamped to this range before `exp`.
pub const LOGVAR_RANGE: (f64, f64) = (-10.0, 10.0);

/// Gaussian with diagonal covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() || mean.is_empty() {
            return Err(Error::shape("DiagGaussian", &[mean.len()], &[var.len()]));
        }
        if let Some(v) = var.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!("variance must be positive, got {v}")));
        }
        Ok(DiagGaussian { mean, var })
    }

    pub fn standard(d: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; d],
            var: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Fuse experts by adding precisions: `Σ = (Σₙ Sₙ⁻¹)⁻¹`, `μ = Σ Σₙ Sₙ⁻¹ mₙ`.
pub fn poe_fuse(experts: &[DiagGaussian]) -> Result<DiagGaussian> {
    let first = experts
        .first()
        .ok_or_else(|| Error::Contract("product of experts needs at least one expert".into()))?;
    if experts.len() == 1 {
        return Ok(first.clone());
    }
    let d = first.dim();
    let mut precision = vec![0.0; d];
    let mut weighted = vec![0.0; d];
    for e in experts {
        if e.dim() != d {
            return Err(Error::shape("poe_fuse", &[d], &[e.dim()]));
        }
        for i in 0..d {
            let p = 1.0 / e.var[i];
            precision[i] += p;
            weighted[i] += p * e.mean[i];
        }
    }
    let var: Vec<f64> = precision.iter().map(|p| 1.0 / p).collect();
    let mean = weighted.iter().zip(&var).map(|(w, v)| w * v).collect();
    Ok(DiagGaussian { mean, var })
}

/// `mean + sqrt(var) ⊙ noise`.
pub fn reparam_sample(q: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != q.dim() {
        return Err(Error::shape("reparam_sample", &[q.dim()], &[noise.len()]));
    }
    Ok(q.mean
        .iter()
        .zip(&q.var)
        .zip(noise)
        .map(|((m, v), e)| m + v.sqrt() * e)
        .collect())
}

/// Fully connected encoder whose `2d` outputs are `(mean, log-variance)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderNet {
    pub net: Mlp,
}

impl EncoderNet {
    pub fn new<R: Rng + ?Sized>(data_dim: usize, hidden: &[usize], latent: usize, rng: &mut R) -> Result<Self> {
        Ok(EncoderNet {
            net: Mlp::new(&layer_sizes(data_dim, hidden, latent), rng)?,
        })
    }

    pub fn zeros(data_dim: usize, hidden: &[usize], latent: usize) -> Result<Self> {
        Ok(EncoderNet {
            net: Mlp::zeros(&layer_sizes(data_dim, hidden, latent))?,
        })
    }

    pub fn from_mlp(net: Mlp) -> Result<Self> {
        if net.output_dim() % 2 != 0 {
            return Err(Error::Contract(format!(
                "encoder output must be even, got {}",
                net.output_dim()
            )));
        }
        Ok(EncoderNet { net })
    }

    pub fn data_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.net.output_dim() / 2
    }

    pub fn encode(&self, x: &[f64]) -> Result<DiagGaussian> {
        let batch = Tensor::new(vec![1, x.len()], x.to_vec())?;
        Ok(self.encode_batch(&batch)?.pop().expect("one row"))
    }

    /// Encode each row of `x` (`[n, D]`).
    pub fn encode_batch(&self, x: &Tensor) -> Result<Vec<DiagGaussian>> {
        let (_, cols) = x.dims2()?;
        if cols != self.data_dim() {
            return Err(Error::shape("encode", &[self.data_dim()], x.shape()));
        }
        let out = self.net.forward(x)?;
        let d = self.latent_dim();
        Ok(out
            .data()
            .chunks_exact(2 * d)
            .map(|row| DiagGaussian {
                mean: row[..d].to_vec(),
                var: row[d..]
                    .iter()
                    .map(|lv| lv.clamp(LOGVAR_RANGE.0, LOGVAR_RANGE.1).exp())
                    .collect(),
            })
            .collect())
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundEncoder<'t> {
        BoundEncoder {
            net: self.net.bind(tape),
            latent: self.latent_dim(),
        }
    }
}

fn layer_sizes(input: usize, hidden: &[usize], latent: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(2 * latent);
    sizes
}

pub struct BoundEncoder<'t> {
    pub net: BoundMlp<'t>,
    pub latent: usize,
}

impl<'t> BoundEncoder<'t> {
    /// Returns `(mean, clamped log-variance)`, each `[n, d]`.
    pub fn forward(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let out = self.net.forward(x)?;
        let n = out.shape()[0];
        let d = self.latent;
        let cols = |offset: usize| -> Vec<usize> {
            (0..n)
                .flat_map(|r| (0..d).map(move |c| r * 2 * d + offset + c))
                .collect()
        };
        let mean = out.gather(&cols(0), &[n, d])?;
        let logvar = out
            .gather(&cols(d), &[n, d])?
            .clamp(LOGVAR_RANGE.0, LOGVAR_RANGE.1);
        Ok((mean, logvar))
    }
}

/// Product-of-experts fusion of a batch into `groups` posteriors on the tape.
///
/// Row `i` of `mean`/`logvar` is an expert for group `group[i]`. Groups with
/// no member fall back to `N(0, I)`. Returns `(mean, var)`, each `[groups, d]`.
pub fn poe_fuse_groups<'t>(
    mean: Var<'t>,
    logvar: Var<'t>,
    group: &[usize],
    groups: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    let tape = mean.tape();
    let d = mean.shape()[1];
    let precision = logvar.neg().exp();
    let precision_sum = precision.segment_sum(group, groups)?;
    let weighted = precision.mul(mean)?.segment_sum(group, groups)?;
    let mut present = vec![false; groups];
    for &g in group {
        present[g] = true;
    }
    let fill: Vec<f64> = present
        .iter()
        .flat_map(|&p| std::iter::repeat_n(if p { 0.0 } else { 1.0 }, d))
        .collect();
    let var = precision_sum
        .add(tape.constant(Tensor::new(vec![groups, d], fill)?))?
        .recip();
    let fused_mean = weighted.mul(var)?;
    Ok((fused_mean, var))
}

/// `mean + sqrt(var) ⊙ noise` on the tape.
pub fn reparam_sample_tape<'t>(mean: Var<'t>, var: Var<'t>, noise: &Tensor) -> Result<Var<'t>> {
    let eps = mean.tape().constant(noise.clone());
    mean.add(var.sqrt().mul(eps)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::check_gradients;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_expert(rng: &mut ChaCha8Rng, d: usize) -> DiagGaussian {
        DiagGaussian::new(
            (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            (0..d).map(|_| rng.random_range(0.1..3.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_encoder_gives_standard_normal() {
        let enc = EncoderNet::zeros(16, &[8, 4], 3).unwrap();
        let q = enc.encode(&[0.3; 16]).unwrap();
        assert_eq!(q, DiagGaussian::standard(3));
    }

    #[test]
    fn encoder_variance_positive_and_input_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = EncoderNet::new(16, &[32, 16], 4, &mut rng).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
            let q = enc.encode(&x).unwrap();
            assert!(q.var.iter().all(|&v| v > 0.0));
        }
        assert!(matches!(enc.encode(&[0.0; 15]), Err(Error::Shape { .. })));
    }

    #[test]
    fn encoder_is_continuous_in_its_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = EncoderNet::new(16, &[32, 16], 2, &mut rng).unwrap();
        let x: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
        let base = enc.encode(&x).unwrap();
        let h = 1e-6;
        let mut xp = x.clone();
        xp[5] += h;
        let moved = enc.encode(&xp).unwrap();
        for (a, b) in base.mean.iter().zip(&moved.mean) {
            let slope = (b - a) / h;
            assert!(slope.is_finite() && slope.abs() < 1e3);
        }
    }

    #[test]
    fn poe_closed_form_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = random_expert(&mut rng, 4);
        assert_eq!(poe_fuse(std::slice::from_ref(&e)).unwrap(), e);

        let halved = poe_fuse(&[e.clone(), e.clone()]).unwrap();
        for i in 0..4 {
            assert!((halved.mean[i] - e.mean[i]).abs() < 1e-12);
            assert!((halved.var[i] - e.var[i] / 2.0).abs() < 1e-12);
        }

        let a = DiagGaussian::new(vec![0.0; 3], vec![1.0; 3]).unwrap();
        let b = DiagGaussian::new(vec![2.0; 3], vec![1.0; 3]).unwrap();
        let f = poe_fuse(&[a, b]).unwrap();
        assert_eq!(f.mean, vec![1.0; 3]);
        assert_eq!(f.var, vec![0.5; 3]);

        assert!(matches!(poe_fuse(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn reparam_cases() {
        let q = DiagGaussian::new(vec![1.0, -2.0], vec![4.0, 0.25]).unwrap();
        assert_eq!(reparam_sample(&q, &[0.0, 0.0]).unwrap(), q.mean);
        let unit = DiagGaussian::standard(2);
        assert_eq!(reparam_sample(&unit, &[0.3, -1.1]).unwrap(), vec![0.3, -1.1]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let (mut s, mut s2) = ([0.0; 2], [0.0; 2]);
        for _ in 0..n {
            let noise: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let z = reparam_sample(&q, &noise).unwrap();
            for i in 0..2 {
                s[i] += z[i];
                s2[i] += z[i] * z[i];
            }
        }
        for i in 0..2 {
            let mean = s[i] / n as f64;
            let var = s2[i] / n as f64 - mean * mean;
            assert!((var / q.var[i] - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn tape_fusion_matches_plain_fusion_with_absent_fallback() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let experts: Vec<DiagGaussian> = (0..5).map(|_| random_expert(&mut rng, 3)).collect();
        let group = [0, 2, 0, 2, 2];
        let tape = Tape::new();
        let mean = tape.constant(
            Tensor::new(vec![5, 3], experts.iter().flat_map(|e| e.mean.clone()).collect()).unwrap(),
        );
        let logvar = tape.constant(
            Tensor::new(vec![5, 3], experts.iter().flat_map(|e| e.var.iter().map(|v| v.ln())).collect())
                .unwrap(),
        );
        let (m, v) = poe_fuse_groups(mean, logvar, &group, 4).unwrap();
        let (m, v) = (m.value().clone(), v.value().clone());
        for g in 0..4 {
            let members: Vec<DiagGaussian> = group
                .iter()
                .zip(&experts)
                .filter(|(&gi, _)| gi == g)
                .map(|(_, e)| e.clone())
                .collect();
            let want = if members.is_empty() {
                DiagGaussian::standard(3)
            } else {
                poe_fuse(&members).unwrap()
            };
            for i in 0..3 {
                assert!((m.at2(g, i) - want.mean[i]).abs() < 1e-12);
                assert!((v.at2(g, i) - want.var[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_fusion_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mean = Tensor::new(vec![4, 2], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let logvar = Tensor::new(vec![4, 2], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let noise = Tensor::new(vec![3, 2], (0..6).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let report = check_gradients(
            |_, v| {
                let (m, var) = poe_fuse_groups(v[0], v[1], &[1, 0, 1, 1], 3)?;
                Ok(reparam_sample_tape(m, var, &noise)?.tanh().sum())
            },
            &[mean, logvar],
            None,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{:?}", report.worst());
    }

    #[test]
    fn product_density_matches_grid_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let n = rng.random_range(2..6);
            let experts: Vec<DiagGaussian> = (0..n).map(|_| random_expert(&mut rng, 1)).collect();
            let fused = poe_fuse(&experts).unwrap();
            let (lo, hi, steps) = (-12.0, 12.0, 200_000);
            let dx = (hi - lo) / steps as f64;
            let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
            for s in 0..=steps {
                let x = lo + s as f64 * dx;
                let logp: f64 = experts
                    .iter()
                    .map(|e| -0.5 * (x - e.mean[0]).powi(2) / e.var[0])
                    .sum();
                let p = logp.exp();
                z += p;
                m1 += p * x;
                m2 += p * x * x;
            }
            let mean = m1 / z;
            let var = m2 / z - mean * mean;
            assert!((mean - fused.mean[0]).abs() < 1e-3);
            assert!((var - fused.var[0]).abs() < 1e-3);
        }
    }

    proptest! {
        #[test]
        fn fusion_is_order_invariant_and_incremental(seed in 0u64..1000, n in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let experts: Vec<DiagGaussian> = (0..n).map(|_| random_expert(&mut rng, 3)).collect();
            let all = poe_fuse(&experts).unwrap();

            let mut reversed = experts.clone();
            reversed.reverse();
            let r = poe_fuse(&reversed).unwrap();
            for i in 0..3 {
                prop_assert!((r.mean[i] - all.mean[i]).abs() < 1e-12);
                prop_assert!((r.var[i] - all.var[i]).abs() < 1e-12);
            }

            let mut acc = experts[0].clone();
            for e in &experts[1..] {
                let next = poe_fuse(&[acc.clone(), e.clone()]).unwrap();
                for i in 0..3 {
                    prop_assert!(next.var[i] <= acc.var[i]);
                }
                acc = next;
            }
            for i in 0..3 {
                prop_assert!((acc.mean[i] - all.mean[i]).abs() < 1e-12);
                prop_assert!((acc.var[i] - all.var[i]).abs() < 1e-12);
                let min_var = experts.iter().map(|e| e.var[i]).fold(f64::INFINITY, f64::min);
                prop_assert!(all.var[i] <= min_var);
            }
        }
    }
}

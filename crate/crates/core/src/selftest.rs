//! Oracle suites runnable outside the test harness.

use std::io::{self, Write};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::linalg::kl_diag_full;
use crate::model::ModelConfig;
use crate::oracle;
use crate::prior::{PriorMode, Spacing, SpacingParams};

#[derive(Clone, Debug)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

pub struct Suite {
    pub name: &'static str,
    pub run: fn() -> Result<Outcome>,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

/// Empirical moments of 2×10⁵ ancestral draws for 5 random priors
/// (d = 4, K = 6) within 0.02 (means) and 0.05 (covariances), under 10 s.
pub fn prior_moments() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut mean_err, mut cov_err) = (0.0f64, 0.0f64);
    for _ in 0..5 {
        let params = oracle::random_spacing(&mut rng, 4, 6)?;
        let c = oracle::ancestral_moments(&params, 200_000, &mut rng);
        mean_err = mean_err.max(c.max_mean_error);
        cov_err = cov_err.max(c.max_cov_error);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mean_err < 0.02 && cov_err < 0.05 && secs < 10.0,
        format!("max mean error {mean_err:.4}, max cov error {cov_err:.4}, {secs:.2} s"),
    )
}

/// Chain and joint log-densities within 1e-9 on 100 points (d = 3, K = 5).
pub fn chain_density() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let params = oracle::random_spacing(&mut rng, 3, 5)?;
    let gap = oracle::chain_joint_gap(&params, 100, &mut rng)?;
    outcome(gap < 1e-9, format!("max gap {gap:e}"))
}

/// Three-level fixture reproduces its closed-form moments bit for bit.
pub fn three_level_fixture() -> Result<Outcome> {
    let s = Spacing::new(1, 3, vec![0.0], vec![1.0, 1.0], vec![1.0 / 3.0, 1.0 / 3.0])?;
    let g = s.joint_moments();
    let want_cov = [
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
    let exact = g.means == [0.0, 1.0, 2.0] && g.covs[0].entries() == want_cov;
    outcome(exact, format!("a = {:?}, C = {:?}", g.means, g.covs[0].entries()))
}

/// Closed-form KL within 3 standard errors of 10⁶-sample Monte Carlo on 5
/// instances (d = 1, K = 4), and the per-dimension decomposition within
/// 1e-9 of the monolithic KL (d = 3, K = 4).
pub fn kl_divergence() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst_z: f64 = 0.0;
    for _ in 0..5 {
        let (m, s, a, c) = oracle::random_kl_instance(&mut rng, 4)?;
        let exact = kl_diag_full(&m, &s, &a, &c)?;
        let (est, se) = oracle::kl_monte_carlo(&m, &s, &a, &c, 1_000_000, &mut rng)?;
        worst_z = worst_z.max((est - exact).abs() / se);
    }
    let gap = oracle::kl_decomposition_gap(3, 4, 20, &mut rng)?;
    outcome(
        worst_z < 3.0 && gap < 1e-9,
        format!("worst |MC - exact| = {worst_z:.2} SE, decomposition gap {gap:e}"),
    )
}

/// Fusion matches grid normalization within 1e-3 over 20 random sets of
/// 2–5 experts; reordering and two-stage fusion agree within 1e-12.
pub fn product_of_experts() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let c = oracle::poe_checks(20, 1, &mut rng)?;
    outcome(
        c.max_grid_error < 1e-3 && c.max_permutation_gap < 1e-12 && c.max_incremental_gap < 1e-12,
        format!(
            "grid error {:e}, permutation gap {:e}, incremental gap {:e}",
            c.max_grid_error, c.max_permutation_gap, c.max_incremental_gap
        ),
    )
}

/// Tight links (Δ = 3σ) invert at a per-link rate in [0.0005, 0.0025] over
/// 10⁵ draws; the default prior inverts anywhere in under 0.1% of draws.
pub fn ordering() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let tight = oracle::tight_spacing(&mut rng, 2, 6)?;
    let (links, _) = oracle::inversion_rates(&tight, 100_000, &mut rng);
    let lo = links.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = links.iter().copied().fold(0.0, f64::max);
    let default = SpacingParams::init(10, 6)?.constrain();
    let (_, any) = oracle::inversion_rates(&default, 100_000, &mut rng);
    outcome(
        lo >= 0.0005 && hi <= 0.0025 && any < 0.001,
        format!("tight per-link rates in [{lo:.5}, {hi:.5}], default any-inversion {any:.5}"),
    )
}

/// Network widths for the objective gradient check.
pub const GRADIENT_CHECK_ENCODER: [usize; 2] = [32, 16];
pub const GRADIENT_CHECK_DECODER: [usize; 2] = [16, 32];

/// Reverse-mode gradients of the full objective against central
/// differences (D = 16, d_c = d_s = 2, K = 3) for every parameter
/// coordinate, three seeds, relative error < 1e-4 in under 30 s.
pub fn objective_gradients() -> Result<Outcome> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for seed in 0..3 {
        let mut config = ModelConfig::new(16, 2, 2, 3, PriorMode::Ordinal);
        config.encoder_hidden = GRADIENT_CHECK_ENCODER.to_vec();
        config.decoder_hidden = GRADIENT_CHECK_DECODER.to_vec();
        let report = oracle::elbo_gradient_check(config, 2, seed)?;
        worst = worst.max(report.max_rel_error());
        probes += report.probes.len();
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 30.0,
        format!("{probes} coordinates, max relative error {worst:e}, {secs:.2} s"),
    )
}

/// Content-KL time at K = 17 grows at most 15× from d = 10 to d = 100.
pub fn kl_scaling() -> Result<Outcome> {
    let small = oracle::content_kl_seconds(10, 17, 200, 110)?;
    let large = oracle::content_kl_seconds(100, 17, 200, 110)?;
    let ratio = large / small;
    outcome(
        ratio <= 15.0,
        format!("d=10: {:.1} us, d=100: {:.1} us, ratio {ratio:.2}", small * 1e6, large * 1e6),
    )
}

pub fn suites() -> Vec<Suite> {
    vec![
        Suite { name: "prior-moments", run: prior_moments },
        Suite { name: "chain-density", run: chain_density },
        Suite { name: "three-level-fixture", run: three_level_fixture },
        Suite { name: "kl-divergence", run: kl_divergence },
        Suite { name: "product-of-experts", run: product_of_experts },
        Suite { name: "ordering", run: ordering },
        Suite { name: "objective-gradients", run: objective_gradients },
        Suite { name: "kl-scaling", run: kl_scaling },
    ]
}

/// Run every suite, one line each; returns whether all passed.
pub fn run_all(out: &mut dyn Write) -> io::Result<bool> {
    let mut all = true;
    for suite in suites() {
        let (passed, detail) = match (suite.run)() {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        all &= passed;
        writeln!(out, "{:<22} {}  {detail}", suite.name, if passed { "PASS" } else { "FAIL" })?;
    }
    Ok(all)
}

//! Finite-sample data from exact distributions and states.
//!
//! All randomness flows through [`RngStream`], a ChaCha stream keyed by a root
//! seed, a trial index and a role tag, so every trial is reproducible no
//! matter which thread runs it.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal, Poisson};
use thiserror::Error;

use crate::qstate::{
    l2_distance, partial_trace, tensor, DensityMatrix, QStateError, SystemLayout,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplingError {
    #[error("distribution is empty or has no mass")]
    EmptyDistribution,
    #[error("invalid distribution: {0}")]
    BadDistribution(String),
    #[error("need at least {need} copies, got {got}")]
    TooFewCopies { need: u64, got: u64 },
    #[error("invalid oracle parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    State(#[from] QStateError),
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stable 64-bit tag for a role name (FNV-1a).
pub fn role_tag(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Deterministic random stream for one (seed, trial, role).
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    trial: u64,
    role: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, trial: u64, role: u64) -> Self {
        let key = splitmix64(splitmix64(seed) ^ splitmix64(trial.rotate_left(17) ^ 0x5452_4941_4c00))
            ^ splitmix64(role ^ 0x524f_4c45);
        RngStream { seed, trial, role, rng: ChaCha8Rng::seed_from_u64(key) }
    }

    pub fn named(seed: u64, trial: u64, role: &str) -> Self {
        Self::new(seed, trial, role_tag(role))
    }

    /// Independent sub-stream; does not advance `self`.
    pub fn derive(&self, role: u64) -> Self {
        Self::new(self.seed, self.trial, splitmix64(self.role) ^ role)
    }

    pub fn derive_named(&self, role: &str) -> Self {
        self.derive(role_tag(role))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn trial(&self) -> u64 {
        self.trial
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Tallies over outcome indices 0..len.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counts {
    pub tallies: Vec<u64>,
    pub total: u64,
}

impl Counts {
    pub fn from_tallies(tallies: Vec<u64>) -> Self {
        let total = tallies.iter().sum();
        Counts { tallies, total }
    }

    pub fn len(&self) -> usize {
        self.tallies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

fn check_distribution(p: &[f64]) -> Result<(), SamplingError> {
    if p.is_empty() {
        return Err(SamplingError::EmptyDistribution);
    }
    if let Some(x) = p.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(SamplingError::BadDistribution(format!("entry {x}")));
    }
    let s: f64 = p.iter().sum();
    if s <= 0.0 {
        return Err(SamplingError::EmptyDistribution);
    }
    if (s - 1.0).abs() > 1e-6 {
        return Err(SamplingError::BadDistribution(format!("sums to {s}")));
    }
    Ok(())
}

/// Cumulative table for repeated inverse-CDF draws.
#[derive(Debug, Clone)]
pub struct Sampler {
    cdf: Vec<f64>,
}

impl Sampler {
    pub fn new(p: &[f64]) -> Result<Self, SamplingError> {
        check_distribution(p)?;
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = p
            .iter()
            .map(|x| {
                acc += x;
                acc
            })
            .collect();
        let total = acc;
        for c in cdf.iter_mut() {
            *c /= total;
        }
        Ok(Sampler { cdf })
    }

    pub fn len(&self) -> usize {
        self.cdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cdf.is_empty()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        // skip zero-mass bins sitting at the same cumulative value
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }

    pub fn draw_many<R: Rng + ?Sized>(&self, n: u64, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| self.draw(rng)).collect()
    }

    pub fn counts<R: Rng + ?Sized>(&self, n: u64, rng: &mut R) -> Counts {
        let mut tallies = vec![0u64; self.cdf.len()];
        for _ in 0..n {
            tallies[self.draw(rng)] += 1;
        }
        Counts { tallies, total: n }
    }
}

/// n iid draws from p, tallied.
pub fn sample_counts<R: Rng + ?Sized>(p: &[f64], n: u64, rng: &mut R) -> Result<Counts, SamplingError> {
    Ok(Sampler::new(p)?.counts(n, rng))
}

/// Multinomial(n, p) by sequential binomial splitting; O(len) work.
pub fn multinomial_counts<R: Rng + ?Sized>(
    p: &[f64],
    n: u64,
    rng: &mut R,
) -> Result<Counts, SamplingError> {
    check_distribution(p)?;
    let mut tallies = vec![0u64; p.len()];
    let mut left = n;
    let mut mass: f64 = p.iter().sum();
    for (slot, &pi) in tallies.iter_mut().zip(p) {
        if left == 0 {
            break;
        }
        let q = if mass > 0.0 { (pi / mass).clamp(0.0, 1.0) } else { 0.0 };
        let k = if q >= 1.0 {
            left
        } else {
            Binomial::new(left, q).expect("q in [0,1]").sample(rng)
        };
        *slot = k;
        left -= k;
        mass -= pi;
    }
    if left > 0 {
        // rounding left a remainder; give it to the last bin with mass
        let last = p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1);
        tallies[last] += left;
    }
    Ok(Counts { tallies, total: n })
}

/// A Poisson(m) draw; m = 0 gives 0.
pub fn poissonize<R: Rng + ?Sized>(m: f64, rng: &mut R) -> u64 {
    if m <= 0.0 {
        return 0;
    }
    Poisson::new(m).expect("positive finite rate").sample(rng) as u64
}

/// Independent Poisson(m·p_i) per bin, the Poissonized sample of size Poisson(m).
pub fn poissonized_counts<R: Rng + ?Sized>(
    p: &[f64],
    m: f64,
    rng: &mut R,
) -> Result<Counts, SamplingError> {
    check_distribution(p)?;
    let tallies: Vec<u64> = p.iter().map(|&pi| poissonize(m * pi, rng)).collect();
    Ok(Counts::from_tallies(tallies))
}

fn bipartite(layout: &SystemLayout) -> Result<(), SamplingError> {
    if layout.parties() != 2 {
        return Err(QStateError::LayoutMismatch(format!(
            "bipartite layout required, got {layout}"
        ))
        .into());
    }
    Ok(())
}

/// (tr ρ², tr[ρ(ρ₁⊗ρ₂)], tr ρ₁²·tr ρ₂²).
pub fn swap_expectation_triple(
    state: &DensityMatrix,
    layout: &SystemLayout,
) -> Result<(f64, f64, f64), SamplingError> {
    bipartite(layout)?;
    layout.check(state)?;
    let r1 = partial_trace(state, layout, &[0])?;
    let r2 = partial_trace(state, layout, &[1])?;
    let prod = tensor(&r1, &r2);
    Ok((state.purity(), state.overlap(&prod), r1.purity() * r2.purity()))
}

/// e1 − 2e2 + e3 = ‖ρ − ρ₁⊗ρ₂‖₂².
pub fn swap_difference(state: &DensityMatrix, layout: &SystemLayout) -> Result<f64, SamplingError> {
    let (e1, e2, e3) = swap_expectation_triple(state, layout)?;
    Ok(e1 - 2.0 * e2 + e3)
}

fn pm_one<R: Rng + ?Sized>(expectation: f64, rng: &mut R) -> f64 {
    let p = ((1.0 + expectation) / 2.0).clamp(0.0, 1.0);
    if rng.random_bool(p) {
        1.0
    } else {
        -1.0
    }
}

/// Per-batch values o₁ − 2o₂ + o₃ for ⌊n_copies/4⌋ four-copy batches.
pub fn swap_batch_values<R: Rng + ?Sized>(
    state: &DensityMatrix,
    layout: &SystemLayout,
    n_copies: u64,
    rng: &mut R,
) -> Result<Vec<f64>, SamplingError> {
    if n_copies < 4 {
        return Err(SamplingError::TooFewCopies { need: 4, got: n_copies });
    }
    let (e1, e2, e3) = swap_expectation_triple(state, layout)?;
    Ok((0..n_copies / 4)
        .map(|_| pm_one(e1, rng) - 2.0 * pm_one(e2, rng) + pm_one(e3, rng))
        .collect())
}

/// Batch mean of the swap-observable estimator; unbiased for ‖ρ−ρ₁⊗ρ₂‖₂².
pub fn swap_batch_estimate<R: Rng + ?Sized>(
    state: &DensityMatrix,
    layout: &SystemLayout,
    n_copies: u64,
    rng: &mut R,
) -> Result<f64, SamplingError> {
    let v = swap_batch_values(state, layout, n_copies, rng)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Moment contract of the simulated collective estimators.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CollectiveOracleParams {
    pub c_mean_bias: f64,
    pub c_var_lin: f64,
    pub c_var_quad: f64,
    pub small_n_cap: f64,
}

impl Default for CollectiveOracleParams {
    fn default() -> Self {
        CollectiveOracleParams { c_mean_bias: 0.0, c_var_lin: 1.0, c_var_quad: 1.0, small_n_cap: 100.0 }
    }
}

/// Copies at which the independence estimator switches to the general variance law.
pub const SMALL_N_THRESHOLD: u64 = 12;

/// Clip range; every squared ℓ2 distance between states lies in [0, 4].
pub const ORACLE_CLIP: f64 = 4.0;

impl CollectiveOracleParams {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.c_mean_bias != 0.0 {
            return Err(SamplingError::BadParams("c_mean_bias must be 0".into()));
        }
        if !(self.c_var_lin > 0.0 && self.c_var_quad > 0.0 && self.small_n_cap > 0.0) {
            return Err(SamplingError::BadParams("variance constants must be positive".into()));
        }
        Ok(())
    }

    /// c_lin·E/n + c_quad/n².
    pub fn variance(&self, expectation: f64, n: u64) -> f64 {
        let n = n as f64;
        self.c_var_lin * expectation.max(0.0) / n + self.c_var_quad / (n * n)
    }

    /// Variance used by the independence estimator. Below
    /// [`SMALL_N_THRESHOLD`] copies the law is evaluated at n = 4 and capped.
    pub fn independence_variance(&self, expectation: f64, n: u64) -> f64 {
        if n >= SMALL_N_THRESHOLD {
            self.variance(expectation, n)
        } else {
            self.variance(expectation, 4).min(self.small_n_cap)
        }
    }
}

fn clipped_gaussian<R: Rng + ?Sized>(mean: f64, var: f64, rng: &mut R) -> f64 {
    let draw = Normal::new(mean, var.sqrt()).expect("finite moments").sample(rng);
    draw.clamp(-ORACLE_CLIP, ORACLE_CLIP)
}

/// One simulated collective estimate of ‖ρ−σ‖₂² from n copies of each.
pub fn collective_l2_identity_oracle<R: Rng + ?Sized>(
    rho: &DensityMatrix,
    sigma: &DensityMatrix,
    n: u64,
    rng: &mut R,
    params: &CollectiveOracleParams,
) -> Result<f64, SamplingError> {
    params.validate()?;
    if n < 4 {
        return Err(SamplingError::TooFewCopies { need: 4, got: n });
    }
    let e = l2_distance(rho, sigma)?.powi(2);
    Ok(clipped_gaussian(e, params.variance(e, n), rng))
}

/// One simulated collective estimate of ‖ρ−ρ₁⊗ρ₂‖₂² from n copies.
pub fn collective_independence_oracle<R: Rng + ?Sized>(
    state: &DensityMatrix,
    layout: &SystemLayout,
    n: u64,
    rng: &mut R,
    params: &CollectiveOracleParams,
) -> Result<f64, SamplingError> {
    params.validate()?;
    if n < 4 {
        return Err(SamplingError::TooFewCopies { need: 4, got: n });
    }
    let e = swap_difference(state, layout)?.max(0.0);
    Ok(clipped_gaussian(e, params.independence_variance(e, n), rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qstate::{random_mixed, random_pure, tensor};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::RngCore;

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, var)
    }

    fn l22() -> SystemLayout {
        SystemLayout::new(vec![2, 2]).unwrap()
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = RngStream::new(7, 3, 1);
        let mut b = RngStream::new(7, 3, 1);
        let mut c = RngStream::new(7, 4, 1);
        let mut d = RngStream::new(7, 3, 2);
        let xa: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa[0], c.next_u64());
        assert_ne!(xa[0], d.next_u64());
        let s = RngStream::new(7, 3, 1);
        assert_ne!(s.derive(1).next_u64(), s.derive(2).next_u64());
    }

    #[test]
    fn point_mass_and_errors() {
        let mut r = RngStream::new(1, 0, 0);
        let c = sample_counts(&[0.0, 1.0, 0.0], 50, &mut r).unwrap();
        assert_eq!(c.tallies, vec![0, 50, 0]);
        assert!(matches!(sample_counts(&[], 5, &mut r), Err(SamplingError::EmptyDistribution)));
        assert!(matches!(sample_counts(&[0.0, 0.0], 5, &mut r), Err(SamplingError::EmptyDistribution)));
        assert!(sample_counts(&[0.5, 0.6], 5, &mut r).is_err());
    }

    #[test]
    fn uniform_bins_within_five_sigma() {
        let mut r = RngStream::new(2, 0, 0);
        let n = 600_000u64;
        let c = sample_counts(&[1.0 / 6.0; 6], n, &mut r).unwrap();
        let sd = (n as f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
        for t in c.tallies {
            assert!((t as f64 - n as f64 / 6.0).abs() < 5.0 * sd);
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let p = [0.1, 0.2, 0.3, 0.4];
        let a = sample_counts(&p, 1000, &mut RngStream::new(3, 1, 1)).unwrap();
        let b = sample_counts(&p, 1000, &mut RngStream::new(3, 1, 1)).unwrap();
        assert_eq!(a, b);
        let a = poissonized_counts(&p, 100.0, &mut RngStream::new(3, 1, 1)).unwrap();
        let b = poissonized_counts(&p, 100.0, &mut RngStream::new(3, 1, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn multinomial_matches_moments() {
        let p = [0.5, 0.0, 0.25, 0.25];
        let mut r = RngStream::new(4, 0, 0);
        let reps = 20_000;
        let mut sums = [0.0f64; 4];
        for _ in 0..reps {
            let c = multinomial_counts(&p, 40, &mut r).unwrap();
            assert_eq!(c.total, 40);
            assert_eq!(c.tallies[1], 0);
            for (s, t) in sums.iter_mut().zip(&c.tallies) {
                *s += *t as f64;
            }
        }
        for (s, pi) in sums.iter().zip(p) {
            let se = (40.0 * pi * (1.0 - pi) / reps as f64).sqrt();
            assert!((s / reps as f64 - 40.0 * pi).abs() <= 4.0 * se + 1e-12);
        }
    }

    #[test]
    fn poisson_mean() {
        let mut r = RngStream::new(5, 0, 0);
        assert_eq!(poissonize(0.0, &mut r), 0);
        let m = 7.5;
        let draws: Vec<f64> = (0..100_000).map(|_| poissonize(m, &mut r) as f64).collect();
        let (mean, _) = mean_var(&draws);
        let se = (m / draws.len() as f64).sqrt();
        assert!((mean - m).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn poissonized_bins_uncorrelated() {
        let mut r = RngStream::new(6, 0, 0);
        let p = [0.5, 0.3, 0.2];
        let reps = 20_000;
        let rows: Vec<Vec<f64>> = (0..reps)
            .map(|_| {
                poissonized_counts(&p, 20.0, &mut r)
                    .unwrap()
                    .tallies
                    .iter()
                    .map(|&t| t as f64)
                    .collect()
            })
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                let xi: Vec<f64> = rows.iter().map(|r| r[i]).collect();
                let xj: Vec<f64> = rows.iter().map(|r| r[j]).collect();
                let (mi, vi) = mean_var(&xi);
                let (mj, vj) = mean_var(&xj);
                let prods: Vec<f64> = xi.iter().zip(&xj).map(|(a, b)| (a - mi) * (b - mj)).collect();
                let (cov, _) = mean_var(&prods);
                let se = (vi * vj / reps as f64).sqrt();
                assert!(cov.abs() < 3.0 * se, "cov({i},{j}) = {cov}, se {se}");
            }
        }
    }

    #[test]
    fn swap_triple_examples() {
        let pure_prod = tensor(&DensityMatrix::basis_state(2, 0), &DensityMatrix::basis_state(2, 1));
        let (a, b, c) = swap_expectation_triple(&pure_prod, &l22()).unwrap();
        assert_abs_diff_eq!(a, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c, 1.0, epsilon = 1e-12);

        let (a, b, c) = swap_expectation_triple(&DensityMatrix::maximally_mixed(4), &l22()).unwrap();
        for x in [a, b, c] {
            assert_abs_diff_eq!(x, 0.25, epsilon = 1e-12);
        }

        let bell = DensityMatrix::maximally_entangled(2);
        let (a, b, c) = swap_expectation_triple(&bell, &l22()).unwrap();
        assert_abs_diff_eq!(a, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b, 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(c, 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(a - 2.0 * b + c, 0.75, epsilon = 1e-12);
        assert!(swap_expectation_triple(&bell, &SystemLayout::new(vec![4]).unwrap()).is_err());
    }

    #[test]
    fn swap_batch_pure_product_is_zero() {
        let mut r = RngStream::new(8, 0, 0);
        let s = tensor(&DensityMatrix::basis_state(2, 1), &DensityMatrix::basis_state(2, 0));
        assert_eq!(swap_batch_estimate(&s, &l22(), 400, &mut r).unwrap(), 0.0);
        assert!(matches!(
            swap_batch_estimate(&s, &l22(), 3, &mut r),
            Err(SamplingError::TooFewCopies { .. })
        ));
    }

    #[test]
    fn swap_batch_unbiased_with_bounded_variance() {
        let mut r = RngStream::new(9, 0, 0);
        for _ in 0..3 {
            let rho = random_mixed(4, 2, &mut r).unwrap();
            let want = swap_difference(&rho, &l22()).unwrap();
            let v = swap_batch_values(&rho, &l22(), 4 * 20_000, &mut r).unwrap();
            let (m, var) = mean_var(&v);
            assert!(var <= 6.0 + 0.1);
            assert!((m - want).abs() < 3.0 * (var / v.len() as f64).sqrt());
        }
    }

    #[test]
    fn identity_oracle_contract() {
        let mut r = RngStream::new(10, 0, 0);
        let params = CollectiveOracleParams::default();
        let rho = random_pure(2, &mut r).unwrap();
        let sigma = random_mixed(2, 2, &mut r).unwrap();
        let exact = l2_distance(&rho, &sigma).unwrap().powi(2);
        for n in [4u64, 16, 100] {
            let v: Vec<f64> = (0..10_000)
                .map(|_| collective_l2_identity_oracle(&rho, &sigma, n, &mut r, &params).unwrap())
                .collect();
            let (m, var) = mean_var(&v);
            assert!((m - exact).abs() < 3.0 * (var / 1e4).sqrt(), "n={n}");
            assert!(var <= 1.1 * params.variance(exact, n));
        }
        // equal states, large n: concentrated at 0 with sd ≈ √c_quad/n
        let v: Vec<f64> = (0..10_000)
            .map(|_| collective_l2_identity_oracle(&rho, &rho, 1000, &mut r, &params).unwrap())
            .collect();
        let (m, var) = mean_var(&v);
        assert!(m.abs() < 3.0 * (var / 1e4).sqrt());
        assert!((var.sqrt() * 1000.0 - 1.0).abs() < 0.05);
        assert!(collective_l2_identity_oracle(&rho, &rho, 3, &mut r, &params).is_err());
    }

    #[test]
    fn independence_oracle_contract() {
        let mut r = RngStream::new(11, 0, 0);
        let params = CollectiveOracleParams::default();
        let bell = DensityMatrix::maximally_entangled(2);
        for n in [4u64, 8, 12, 50] {
            let v: Vec<f64> = (0..10_000)
                .map(|_| collective_independence_oracle(&bell, &l22(), n, &mut r, &params).unwrap())
                .collect();
            let (m, var) = mean_var(&v);
            assert!((m - 0.75).abs() < 3.0 * (var / 1e4).sqrt(), "n={n}: {m}");
            assert!(var <= 1.1 * params.independence_variance(0.75, n));
            assert!(var <= 100.0);
        }
        let prod = tensor(&random_mixed(2, 2, &mut r).unwrap(), &random_mixed(2, 2, &mut r).unwrap());
        let v: Vec<f64> = (0..10_000)
            .map(|_| collective_independence_oracle(&prod, &l22(), 20, &mut r, &params).unwrap())
            .collect();
        let (m, var) = mean_var(&v);
        assert!(m.abs() < 3.0 * (var / 1e4).sqrt());
    }

    #[test]
    fn params_are_checked() {
        let bad = CollectiveOracleParams { c_mean_bias: 0.1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = CollectiveOracleParams { c_var_lin: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn counts_sum_to_n(seed in any::<u64>(), n in 0u64..500, k in 1usize..12) {
            let mut r = RngStream::new(seed, 0, 0);
            let p = vec![1.0 / k as f64; k];
            prop_assert_eq!(sample_counts(&p, n, &mut r).unwrap().tallies.iter().sum::<u64>(), n);
            prop_assert_eq!(multinomial_counts(&p, n, &mut r).unwrap().tallies.iter().sum::<u64>(), n);
        }

        #[test]
        fn same_stream_same_output(seed in any::<u64>(), trial in any::<u64>()) {
            let p = [0.25, 0.25, 0.5];
            let a = sample_counts(&p, 64, &mut RngStream::new(seed, trial, 9)).unwrap();
            let b = sample_counts(&p, 64, &mut RngStream::new(seed, trial, 9)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

//! Classical ℓ2 statistics shared by every quantum tester.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampling::Counts;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClassicalError {
    #[error("support mismatch: {left} vs {right} outcomes")]
    SupportMismatch { left: usize, right: usize },
    #[error("distance parameter must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("need at least 4 samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample ({a}, {b}) outside support {na}x{nb}")]
    OutOfSupport { a: usize, b: usize, na: usize, nb: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn is_yes(self) -> bool {
        self == Answer::Yes
    }
}

impl std::fmt::Display for Answer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Answer::Yes => "Yes",
            Answer::No => "No",
        })
    }
}

/// ‖p − q‖₂² computed exactly.
pub fn exact_l2(p: &[f64], q: &[f64]) -> Result<f64, ClassicalError> {
    if p.len() != q.len() {
        return Err(ClassicalError::SupportMismatch { left: p.len(), right: q.len() });
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Σ_ab (p_ab − p_a p_b)² for a row-major joint table of shape na×nb.
pub fn exact_independence_l2(p_ab: &[f64], na: usize, nb: usize) -> Result<f64, ClassicalError> {
    if p_ab.len() != na * nb {
        return Err(ClassicalError::SupportMismatch { left: p_ab.len(), right: na * nb });
    }
    let pa: Vec<f64> = (0..na).map(|a| p_ab[a * nb..(a + 1) * nb].iter().sum()).collect();
    let pb: Vec<f64> = (0..nb).map(|b| (0..na).map(|a| p_ab[a * nb + b]).sum()).collect();
    let mut s = 0.0;
    for a in 0..na {
        for b in 0..nb {
            s += (p_ab[a * nb + b] - pa[a] * pb[b]).powi(2);
        }
    }
    Ok(s)
}

/// Z = Σ_i ((X_i − Y_i)² − X_i − Y_i). With Poissonized counts E[Z] = m²‖p−q‖₂².
pub fn cdvv_statistic(x: &Counts, y: &Counts) -> Result<f64, ClassicalError> {
    if x.len() != y.len() {
        return Err(ClassicalError::SupportMismatch { left: x.len(), right: y.len() });
    }
    Ok(x.tallies
        .iter()
        .zip(&y.tallies)
        .map(|(&a, &b)| {
            let (a, b) = (a as f64, b as f64);
            (a - b) * (a - b) - a - b
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosenessReport {
    pub statistic: f64,
    pub threshold: f64,
    /// Poisson parameter per distribution
    pub m: u64,
    pub verdict: Answer,
}

/// m = ⌈C·b/ε₂²⌉.
pub fn closeness_budget(eps2: f64, b: f64, c: f64) -> Result<u64, ClassicalError> {
    if !(eps2 > 0.0 && eps2.is_finite()) {
        return Err(ClassicalError::BadEpsilon(eps2));
    }
    Ok((c * b / (eps2 * eps2)).ceil() as u64)
}

/// Decision rule on two Poissonized count vectors: Yes iff Z ≤ m²ε₂²/2.
pub fn closeness_from_counts(
    x: &Counts,
    y: &Counts,
    m: u64,
    eps2: f64,
) -> Result<ClosenessReport, ClassicalError> {
    let statistic = cdvv_statistic(x, y)?;
    let mf = m as f64;
    let threshold = mf * mf * eps2 * eps2 / 2.0;
    let verdict = if statistic <= threshold { Answer::Yes } else { Answer::No };
    Ok(ClosenessReport { statistic, threshold, m, verdict })
}

/// ℓ2 closeness test. Each sampler receives the Poisson parameter m and
/// returns Poissonized counts of its distribution.
pub fn closeness_test<P, Q>(
    mut p_sampler: P,
    mut q_sampler: Q,
    eps2: f64,
    b: f64,
    c: f64,
) -> Result<ClosenessReport, ClassicalError>
where
    P: FnMut(f64) -> Counts,
    Q: FnMut(f64) -> Counts,
{
    let m = closeness_budget(eps2, b, c)?;
    let x = p_sampler(m as f64);
    let y = q_sampler(m as f64);
    closeness_from_counts(&x, &y, m, eps2)
}

/// Outcome pairs (a, b) over an na×nb support.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BivariateSamples {
    pub pairs: Vec<(usize, usize)>,
    pub na: usize,
    pub nb: usize,
}

impl BivariateSamples {
    pub fn new(pairs: Vec<(usize, usize)>, na: usize, nb: usize) -> Result<Self, ClassicalError> {
        if let Some(&(a, b)) = pairs.iter().find(|(a, b)| *a >= na || *b >= nb) {
            return Err(ClassicalError::OutOfSupport { a, b, na, nb });
        }
        Ok(BivariateSamples { pairs, na, nb })
    }

    /// Row-major cell counts.
    pub fn table(&self) -> Vec<u64> {
        let mut t = vec![0u64; self.na * self.nb];
        for &(a, b) in &self.pairs {
            t[a * self.nb + b] += 1;
        }
        t
    }
}

/// Unbiased estimate of Σ_ab (p_ab − p_a p_b)² from iid pairs.
pub fn independence_l2_ustat(samples: &BivariateSamples) -> Result<f64, ClassicalError> {
    ustat_from_table(&samples.table(), samples.na, samples.nb)
}

/// The same U-statistic from a row-major count table, via factored collision
/// counts over ordered tuples of distinct samples.
pub fn ustat_from_table(table: &[u64], na: usize, nb: usize) -> Result<f64, ClassicalError> {
    if table.len() != na * nb {
        return Err(ClassicalError::SupportMismatch { left: table.len(), right: na * nb });
    }
    let n_total: u64 = table.iter().sum();
    if n_total < 4 {
        return Err(ClassicalError::TooFewSamples(n_total as usize));
    }
    let n = n_total as f64;
    let row: Vec<f64> = (0..na).map(|a| table[a * nb..(a + 1) * nb].iter().sum::<u64>() as f64).collect();
    let col: Vec<f64> = (0..nb).map(|b| (0..na).map(|a| table[a * nb + b]).sum::<u64>() as f64).collect();

    let mut pair_ab = 0.0; // Σ n_ab(n_ab − 1)
    let mut s = 0.0; // Σ n_ab(n_a − 1)(n_b − 1)
    for a in 0..na {
        for b in 0..nb {
            let x = table[a * nb + b] as f64;
            pair_ab += x * (x - 1.0);
            s += x * (row[a] - 1.0) * (col[b] - 1.0);
        }
    }
    let pair_a: f64 = row.iter().map(|x| x * (x - 1.0)).sum();
    let pair_b: f64 = col.iter().map(|x| x * (x - 1.0)).sum();

    let n2 = n * (n - 1.0);
    let n3 = n2 * (n - 2.0);
    let n4 = n3 * (n - 3.0);
    let t1 = pair_ab / n2;
    let t2 = (s - pair_ab) / n3;
    let t3 = (pair_a * pair_b - 4.0 * s + 2.0 * pair_ab) / n4;
    Ok(t1 - 2.0 * t2 + t3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{poissonized_counts, RngStream, Sampler};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn counts(v: &[u64]) -> Counts {
        Counts::from_tallies(v.to_vec())
    }

    #[test]
    fn cdvv_equal_counts() {
        assert_eq!(cdvv_statistic(&counts(&[1, 1]), &counts(&[1, 1])).unwrap(), -4.0);
        assert_eq!(cdvv_statistic(&counts(&[2, 0]), &counts(&[2, 0])).unwrap(), -4.0);
        assert!(matches!(
            cdvv_statistic(&counts(&[1]), &counts(&[1, 0])),
            Err(ClassicalError::SupportMismatch { .. })
        ));
    }

    #[test]
    fn exact_oracles() {
        assert_eq!(exact_l2(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_abs_diff_eq!(exact_l2(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.5);
        let prod = [0.3 * 0.6, 0.3 * 0.4, 0.7 * 0.6, 0.7 * 0.4];
        assert_abs_diff_eq!(exact_independence_l2(&prod, 2, 2).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(exact_independence_l2(&[0.5, 0.0, 0.0, 0.5], 2, 2).unwrap(), 0.25);
    }

    fn mc_mean_se(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }

    #[test]
    fn cdvv_unbiased() {
        let p = [0.4, 0.3, 0.2, 0.1];
        let q = [0.1, 0.2, 0.3, 0.4];
        let m = 30.0;
        let mut r = RngStream::new(21, 0, 0);
        for (a, b) in [(&p, &p), (&p, &q)] {
            let z: Vec<f64> = (0..20_000)
                .map(|_| {
                    let x = poissonized_counts(a, m, &mut r).unwrap();
                    let y = poissonized_counts(b, m, &mut r).unwrap();
                    cdvv_statistic(&x, &y).unwrap()
                })
                .collect();
            let (mean, se) = mc_mean_se(&z);
            let want = m * m * exact_l2(a, b).unwrap();
            assert!((mean - want).abs() < 3.0 * se, "{mean} vs {want}");
        }
    }

    #[test]
    fn closeness_test_rates() {
        let p = vec![0.25; 4];
        let far = vec![0.55, 0.15, 0.15, 0.15];
        let eps2 = exact_l2(&p, &far).unwrap().sqrt() / 2.0;
        let b = exact_l2(&far, &[0.0; 4]).unwrap().sqrt();
        let mut yes = 0;
        let mut no = 0;
        let trials = 400;
        for t in 0..trials {
            let mut r = RngStream::new(22, t, 0);
            let mut r2 = r.derive(1);
            let same = closeness_test(
                |m| poissonized_counts(&p, m, &mut r).unwrap(),
                |m| poissonized_counts(&p, m, &mut r2).unwrap(),
                eps2,
                b,
                40.0,
            )
            .unwrap();
            yes += same.verdict.is_yes() as u32;
            let diff = closeness_test(
                |m| poissonized_counts(&p, m, &mut r).unwrap(),
                |m| poissonized_counts(&far, m, &mut r2).unwrap(),
                eps2,
                b,
                40.0,
            )
            .unwrap();
            no += (!diff.verdict.is_yes()) as u32;
        }
        assert!(yes as f64 / trials as f64 >= 2.0 / 3.0, "yes {yes}");
        assert!(no as f64 / trials as f64 >= 2.0 / 3.0, "no {no}");
    }

    #[test]
    fn budget_scaling() {
        let m1 = closeness_budget(0.2, 0.5, 10.0).unwrap();
        let m2 = closeness_budget(0.1, 0.5, 10.0).unwrap();
        assert_eq!(m2, 4 * m1);
        assert_eq!(closeness_budget(0.2, 1.0, 10.0).unwrap(), 2 * m1);
        assert!(closeness_budget(0.0, 1.0, 1.0).is_err());
    }

    // Direct definition over ordered tuples of distinct samples.
    fn brute_ustat(pairs: &[(usize, usize)]) -> f64 {
        let n = pairs.len();
        let (mut c1, mut c2, mut c3) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if j == i {
                    continue;
                }
                if pairs[i] == pairs[j] {
                    c1 += 1.0;
                }
                for k in 0..n {
                    if k == i || k == j {
                        continue;
                    }
                    if pairs[j].0 == pairs[i].0 && pairs[k].1 == pairs[i].1 {
                        c2 += 1.0;
                    }
                    for l in 0..n {
                        if l == i || l == j || l == k {
                            continue;
                        }
                        if pairs[i].0 == pairs[j].0 && pairs[k].1 == pairs[l].1 {
                            c3 += 1.0;
                        }
                    }
                }
            }
        }
        let nf = n as f64;
        let n2 = nf * (nf - 1.0);
        let n3 = n2 * (nf - 2.0);
        let n4 = n3 * (nf - 3.0);
        c1 / n2 - 2.0 * c2 / n3 + c3 / n4
    }

    #[test]
    fn ustat_matches_tuple_definition() {
        let mut r = RngStream::new(23, 0, 0);
        let s = Sampler::new(&[0.1, 0.2, 0.05, 0.15, 0.3, 0.2]).unwrap();
        for n in 4..9 {
            let pairs: Vec<(usize, usize)> =
                s.draw_many(n, &mut r).into_iter().map(|o| (o / 3, o % 3)).collect();
            let bs = BivariateSamples::new(pairs.clone(), 2, 3).unwrap();
            assert_abs_diff_eq!(independence_l2_ustat(&bs).unwrap(), brute_ustat(&pairs), epsilon = 1e-12);
        }
    }

    #[test]
    fn ustat_exhaustive_expectation_n5() {
        for p in [[0.4, 0.1, 0.2, 0.3], [0.5, 0.0, 0.0, 0.5], [0.12, 0.28, 0.18, 0.42]] {
            let mut expect = 0.0;
            for code in 0..4usize.pow(5) {
                let mut prob = 1.0;
                let mut pairs = Vec::with_capacity(5);
                let mut c = code;
                for _ in 0..5 {
                    let o = c % 4;
                    c /= 4;
                    prob *= p[o];
                    pairs.push((o / 2, o % 2));
                }
                if prob == 0.0 {
                    continue;
                }
                let bs = BivariateSamples::new(pairs, 2, 2).unwrap();
                expect += prob * independence_l2_ustat(&bs).unwrap();
            }
            assert_abs_diff_eq!(expect, exact_independence_l2(&p, 2, 2).unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn ustat_monte_carlo() {
        let mut r = RngStream::new(24, 0, 0);
        for p in [[0.18, 0.12, 0.42, 0.28], [0.5, 0.0, 0.0, 0.5]] {
            let s = Sampler::new(&p).unwrap();
            let v: Vec<f64> = (0..10_000)
                .map(|_| {
                    let pairs = s.draw_many(30, &mut r).into_iter().map(|o| (o / 2, o % 2)).collect();
                    independence_l2_ustat(&BivariateSamples::new(pairs, 2, 2).unwrap()).unwrap()
                })
                .collect();
            let (mean, se) = mc_mean_se(&v);
            let want = exact_independence_l2(&p, 2, 2).unwrap();
            assert!((mean - want).abs() < 3.0 * se, "{mean} vs {want}");
        }
    }

    #[test]
    fn ustat_errors() {
        let bs = BivariateSamples::new(vec![(0, 0); 3], 2, 2).unwrap();
        assert!(matches!(independence_l2_ustat(&bs), Err(ClassicalError::TooFewSamples(3))));
        assert!(BivariateSamples::new(vec![(2, 0)], 2, 2).is_err());
    }

    proptest! {
        #[test]
        fn ustat_permutation_invariant(raw in prop::collection::vec((0usize..3, 0usize..2), 4..20), rot in 0usize..20) {
            let a = BivariateSamples::new(raw.clone(), 3, 2).unwrap();
            let mut shuffled = raw.clone();
            shuffled.reverse();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            let b = BivariateSamples::new(shuffled, 3, 2).unwrap();
            prop_assert!((independence_l2_ustat(&a).unwrap() - independence_l2_ustat(&b).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn budget_monotone_in_eps(b in 0.01f64..2.0, e1 in 0.05f64..1.0, e2 in 0.05f64..1.0) {
            let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
            prop_assert!(closeness_budget(lo, b, 5.0).unwrap() >= closeness_budget(hi, b, 5.0).unwrap());
        }
    }
}

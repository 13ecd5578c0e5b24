//! Dense density-matrix arithmetic.
//!
//! Every state in the crate is a [`DensityMatrix`]: a validated Hermitian,
//! positive semidefinite, unit-trace complex matrix. Multipartite structure
//! is carried separately by a [`SystemLayout`]; party 0 is the most
//! significant tensor factor, so `a ⊗ b` has row index `ia * db + ib`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Complex dense matrix used throughout the crate.
pub type CMatrix = DMatrix<Complex64>;

/// Absolute tolerance for Hermiticity, positivity and trace checks.
pub const VALIDATION_TOL: f64 = 1e-9;

/// Largest total dimension accepted anywhere in the crate.
pub const MAX_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QStateError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not Hermitian (max |a_ij - conj(a_ji)| = {max_deviation:.3e})")]
    NotHermitian { max_deviation: f64 },
    #[error("matrix is not positive semidefinite (minimum eigenvalue {min_eigenvalue:.3e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("trace is {trace}, expected 1")]
    BadTrace { trace: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("rank {rank} is not in 1..={dim}")]
    BadRank { rank: usize, dim: usize },
    #[error("mixing parameter {0} is outside [0, 1]")]
    BadLambda(f64),
    #[error("dimension {dim} exceeds the supported maximum of {MAX_DIM}")]
    TooLarge { dim: usize },
    #[error("target distance {target} is unreachable (largest attainable {max})")]
    UnreachableDistance { target: f64, max: f64 },
    #[error("malformed state file: {0}")]
    Format(String),
}

/// Validated d×d density matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    mat: CMatrix,
}

/// Checks the three density-matrix invariants and wraps the matrix.
pub fn validate(raw: CMatrix) -> Result<DensityMatrix, QStateError> {
    if raw.nrows() != raw.ncols() {
        return Err(QStateError::NotSquare { rows: raw.nrows(), cols: raw.ncols() });
    }
    let d = raw.nrows();
    if d == 0 {
        return Err(QStateError::NotSquare { rows: 0, cols: 0 });
    }
    if d > MAX_DIM {
        return Err(QStateError::TooLarge { dim: d });
    }
    let mut max_deviation: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            max_deviation = max_deviation.max((raw[(i, j)] - raw[(j, i)].conj()).norm());
        }
    }
    if max_deviation > VALIDATION_TOL {
        return Err(QStateError::NotHermitian { max_deviation });
    }
    let herm = hermitian_part(&raw);
    let min_eigenvalue = hermitian_eigenvalues(&herm)
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    if min_eigenvalue < -VALIDATION_TOL {
        return Err(QStateError::NotPsd { min_eigenvalue });
    }
    let trace = herm.trace().re;
    if (trace - 1.0).abs() > VALIDATION_TOL {
        return Err(QStateError::BadTrace { trace });
    }
    Ok(DensityMatrix { mat: herm })
}

fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()).scale(0.5)
}

/// Real eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(m: &CMatrix) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

impl DensityMatrix {
    pub fn new(raw: CMatrix) -> Result<Self, QStateError> {
        validate(raw)
    }

    /// Wraps a matrix produced by a trace- and positivity-preserving operation
    /// on valid states. Only the Hermitian part is kept.
    pub(crate) fn from_trusted(mat: CMatrix) -> Self {
        debug_assert_eq!(mat.nrows(), mat.ncols());
        DensityMatrix { mat: hermitian_part(&mat) }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }

    pub fn into_matrix(self) -> CMatrix {
        self.mat
    }

    /// The maximally mixed state I/d.
    pub fn maximally_mixed(d: usize) -> Self {
        let mut m = CMatrix::zeros(d, d);
        for i in 0..d {
            m[(i, i)] = Complex64::new(1.0 / d as f64, 0.0);
        }
        DensityMatrix { mat: m }
    }

    /// Computational basis projector |i⟩⟨i|.
    pub fn basis_state(d: usize, i: usize) -> Self {
        let mut m = CMatrix::zeros(d, d);
        m[(i, i)] = Complex64::new(1.0, 0.0);
        DensityMatrix { mat: m }
    }

    /// |ψ⟩⟨ψ| for a (not necessarily normalized) nonzero vector.
    pub fn pure(psi: &[Complex64]) -> Result<Self, QStateError> {
        let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if psi.is_empty() || norm == 0.0 {
            return Err(QStateError::Format("zero state vector".into()));
        }
        if psi.len() > MAX_DIM {
            return Err(QStateError::TooLarge { dim: psi.len() });
        }
        let d = psi.len();
        let m = CMatrix::from_fn(d, d, |i, j| psi[i] * psi[j].conj() / (norm * norm));
        Ok(DensityMatrix { mat: m })
    }

    /// Maximally entangled state on C^d ⊗ C^d.
    pub fn maximally_entangled(d: usize) -> Self {
        let mut psi = vec![Complex64::new(0.0, 0.0); d * d];
        for i in 0..d {
            psi[i * d + i] = Complex64::new(1.0, 0.0);
        }
        Self::pure(&psi).expect("nonzero vector")
    }

    pub fn trace(&self) -> f64 {
        self.mat.trace().re
    }

    /// tr ρ².
    pub fn purity(&self) -> f64 {
        self.mat.iter().map(|z| z.norm_sqr()).sum()
    }

    /// tr(ρσ).
    pub fn overlap(&self, other: &DensityMatrix) -> f64 {
        // tr(AB) = Σ_ij A_ij B_ji = Σ_ij A_ij conj(B_ij) for Hermitian B
        self.mat
            .iter()
            .zip(other.mat.iter())
            .map(|(a, b)| (a * b.conj()).re)
            .sum()
    }

    /// ⟨v|ρ|v⟩.
    pub fn expectation(&self, v: &[Complex64]) -> f64 {
        let d = self.dim();
        debug_assert_eq!(v.len(), d);
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..d {
            let vi = v[i].conj();
            if vi == Complex64::new(0.0, 0.0) {
                continue;
            }
            let mut row = Complex64::new(0.0, 0.0);
            for (j, vj) in v.iter().enumerate() {
                row += self.mat[(i, j)] * vj;
            }
            acc += vi * row;
        }
        acc.re
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        hermitian_eigenvalues(&self.mat)
    }
}

/// Local dimensions (d_1, …, d_m) of a multipartite system.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SystemLayout {
    dims: Vec<usize>,
}

impl SystemLayout {
    pub fn new(dims: Vec<usize>) -> Result<Self, QStateError> {
        if dims.is_empty() {
            return Err(QStateError::LayoutMismatch("layout has no parties".into()));
        }
        if let Some(d) = dims.iter().find(|&&d| d < 2) {
            return Err(QStateError::LayoutMismatch(format!("local dimension {d} < 2")));
        }
        let total = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        match total {
            Some(t) if t <= MAX_DIM => Ok(SystemLayout { dims }),
            Some(t) => Err(QStateError::TooLarge { dim: t }),
            None => Err(QStateError::TooLarge { dim: usize::MAX }),
        }
    }

    pub fn single(d: usize) -> Result<Self, QStateError> {
        Self::new(vec![d])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn parties(&self) -> usize {
        self.dims.len()
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn check(&self, state: &DensityMatrix) -> Result<(), QStateError> {
        if self.total_dim() != state.dim() {
            return Err(QStateError::LayoutMismatch(format!(
                "layout {:?} has total dimension {} but state has dimension {}",
                self.dims,
                self.total_dim(),
                state.dim()
            )));
        }
        Ok(())
    }

    /// Layout of the kept parties, in their original order.
    pub fn sub(&self, keep: &[usize]) -> Result<Self, QStateError> {
        let keep = normalize_keep(keep, self.parties())?;
        Ok(SystemLayout { dims: keep.iter().map(|&k| self.dims[k]).collect() })
    }

    /// Every local dimension rounded up to a power of two.
    pub fn padded(&self) -> SystemLayout {
        SystemLayout { dims: self.dims.iter().map(|d| d.next_power_of_two()).collect() }
    }

    pub fn is_power_of_two(&self) -> bool {
        self.dims.iter().all(|d| d.is_power_of_two())
    }

    /// Splits a flat index into per-party digits.
    pub fn digits(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims.len()];
        for (slot, &d) in out.iter_mut().zip(&self.dims).rev() {
            *slot = index % d;
            index /= d;
        }
        out
    }

    pub fn flat_index(&self, digits: &[usize]) -> usize {
        digits.iter().zip(&self.dims).fold(0, |acc, (&x, &d)| acc * d + x)
    }
}

impl std::fmt::Display for SystemLayout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        f.write_str(&s.join("x"))
    }
}

fn normalize_keep(keep: &[usize], parties: usize) -> Result<Vec<usize>, QStateError> {
    if keep.is_empty() {
        return Err(QStateError::LayoutMismatch("no parties kept".into()));
    }
    let mut k = keep.to_vec();
    k.sort_unstable();
    k.dedup();
    if k.len() != keep.len() {
        return Err(QStateError::LayoutMismatch("duplicate party index".into()));
    }
    if let Some(&bad) = k.iter().find(|&&i| i >= parties) {
        return Err(QStateError::LayoutMismatch(format!(
            "party {bad} out of range for {parties} parties"
        )));
    }
    Ok(k)
}

/// Kronecker product a ⊗ b.
pub fn tensor(a: &DensityMatrix, b: &DensityMatrix) -> DensityMatrix {
    DensityMatrix { mat: a.mat.kronecker(&b.mat) }
}

/// ρ_1 ⊗ … ⊗ ρ_m. Panics on an empty slice.
pub fn tensor_all(parts: &[DensityMatrix]) -> DensityMatrix {
    let (first, rest) = parts.split_first().expect("at least one factor");
    rest.iter().fold(first.clone(), |acc, p| tensor(&acc, p))
}

/// Reduced state on the parties in `keep` (0-based).
pub fn partial_trace(
    state: &DensityMatrix,
    layout: &SystemLayout,
    keep: &[usize],
) -> Result<DensityMatrix, QStateError> {
    layout.check(state)?;
    let keep = normalize_keep(keep, layout.parties())?;
    if keep.len() == layout.parties() {
        return Ok(state.clone());
    }
    let traced: Vec<usize> = (0..layout.parties()).filter(|p| !keep.contains(p)).collect();
    let kept_layout = layout.sub(&keep)?;
    let traced_layout = SystemLayout {
        dims: traced.iter().map(|&t| layout.dims[t]).collect(),
    };
    let dk = kept_layout.total_dim();
    let d = state.dim();

    // (kept index, traced index) of each full basis index
    let split: Vec<(usize, usize)> = (0..d)
        .map(|i| {
            let digits = layout.digits(i);
            let kd: Vec<usize> = keep.iter().map(|&k| digits[k]).collect();
            let td: Vec<usize> = traced.iter().map(|&t| digits[t]).collect();
            (kept_layout.flat_index(&kd), traced_layout.flat_index(&td))
        })
        .collect();

    let mut out = CMatrix::zeros(dk, dk);
    for i in 0..d {
        let (ki, ti) = split[i];
        for (j, &(kj, tj)) in split.iter().enumerate() {
            if ti == tj {
                out[(ki, kj)] += state.mat[(i, j)];
            }
        }
    }
    Ok(DensityMatrix::from_trusted(out))
}

/// Reorders tensor factors: party `j` of the output is party `order[j]` of the input.
pub fn permute_parties(
    state: &DensityMatrix,
    layout: &SystemLayout,
    order: &[usize],
) -> Result<(DensityMatrix, SystemLayout), QStateError> {
    layout.check(state)?;
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..layout.parties()).collect::<Vec<_>>() {
        return Err(QStateError::LayoutMismatch(format!("{order:?} is not a permutation")));
    }
    let new_layout = SystemLayout { dims: order.iter().map(|&o| layout.dims[o]).collect() };
    let d = state.dim();
    let map: Vec<usize> = (0..d)
        .map(|i| {
            let digits = layout.digits(i);
            let nd: Vec<usize> = order.iter().map(|&o| digits[o]).collect();
            new_layout.flat_index(&nd)
        })
        .collect();
    let mut out = CMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            out[(map[i], map[j])] = state.mat[(i, j)];
        }
    }
    Ok((DensityMatrix { mat: out }, new_layout))
}

/// ρ_G ⊗ ρ_{rest}, arranged back in the original party order.
pub fn product_over_cut(
    state: &DensityMatrix,
    layout: &SystemLayout,
    group: &[usize],
) -> Result<DensityMatrix, QStateError> {
    let group = normalize_keep(group, layout.parties())?;
    let rest: Vec<usize> = (0..layout.parties()).filter(|p| !group.contains(p)).collect();
    if rest.is_empty() {
        return Ok(state.clone());
    }
    let a = partial_trace(state, layout, &group)?;
    let b = partial_trace(state, layout, &rest)?;
    let prod = tensor(&a, &b);
    let mut order_layout_dims: Vec<usize> = group.iter().map(|&g| layout.dims[g]).collect();
    order_layout_dims.extend(rest.iter().map(|&r| layout.dims[r]));
    let cut_layout = SystemLayout { dims: order_layout_dims };
    // position of original party p inside (group, rest)
    let concat: Vec<usize> = group.iter().chain(rest.iter()).copied().collect();
    let inverse: Vec<usize> = (0..layout.parties())
        .map(|p| concat.iter().position(|&c| c == p).expect("party present"))
        .collect();
    Ok(permute_parties(&prod, &cut_layout, &inverse)?.0)
}

/// ρ_1 ⊗ … ⊗ ρ_m built from the single-party marginals.
pub fn product_of_marginals(
    state: &DensityMatrix,
    layout: &SystemLayout,
) -> Result<DensityMatrix, QStateError> {
    layout.check(state)?;
    let marginals = (0..layout.parties())
        .map(|p| partial_trace(state, layout, &[p]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(tensor_all(&marginals))
}

fn difference(a: &DensityMatrix, b: &DensityMatrix) -> Result<CMatrix, QStateError> {
    if a.dim() != b.dim() {
        return Err(QStateError::DimMismatch { left: a.dim(), right: b.dim() });
    }
    Ok(&a.mat - &b.mat)
}

/// Trace norm of a Hermitian matrix.
pub fn trace_norm(m: &CMatrix) -> f64 {
    hermitian_eigenvalues(m).iter().map(|x| x.abs()).sum()
}

/// ‖a − b‖₁, the sum of absolute eigenvalues of the difference.
pub fn l1_distance(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64, QStateError> {
    Ok(trace_norm(&difference(a, b)?))
}

/// ‖a − b‖₂, the Frobenius norm of the difference.
pub fn l2_distance(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64, QStateError> {
    Ok(difference(a, b)?.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProductDistance {
    pub l1: f64,
    pub l2: f64,
}

/// Distances between a state and the product of its single-party marginals.
pub fn distance_to_product(
    state: &DensityMatrix,
    layout: &SystemLayout,
) -> Result<ProductDistance, QStateError> {
    let prod = product_of_marginals(state, layout)?;
    Ok(ProductDistance { l1: l1_distance(state, &prod)?, l2: l2_distance(state, &prod)? })
}

fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im)
}

/// Haar-random pure state from a normalized complex Gaussian vector.
pub fn random_pure<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<DensityMatrix, QStateError> {
    if d == 0 {
        return Err(QStateError::BadRank { rank: 1, dim: 0 });
    }
    if d > MAX_DIM {
        return Err(QStateError::TooLarge { dim: d });
    }
    let psi: Vec<Complex64> = (0..d).map(|_| complex_gaussian(rng)).collect();
    DensityMatrix::pure(&psi)
}

/// G·G†/tr(G·G†) with G a d×rank complex Gaussian matrix.
pub fn random_mixed<R: Rng + ?Sized>(
    d: usize,
    rank: usize,
    rng: &mut R,
) -> Result<DensityMatrix, QStateError> {
    if rank == 0 || rank > d {
        return Err(QStateError::BadRank { rank, dim: d });
    }
    if d > MAX_DIM {
        return Err(QStateError::TooLarge { dim: d });
    }
    let g = CMatrix::from_fn(d, rank, |_, _| complex_gaussian(rng));
    let w = &g * g.adjoint();
    let tr = w.trace().re;
    Ok(DensityMatrix::from_trusted(w.unscale(tr)))
}

/// (1 − λ)·a + λ·b.
pub fn interpolate_toward(
    a: &DensityMatrix,
    b: &DensityMatrix,
    lambda: f64,
) -> Result<DensityMatrix, QStateError> {
    if !(0.0..=1.0).contains(&lambda) || lambda.is_nan() {
        return Err(QStateError::BadLambda(lambda));
    }
    let diff_dims = (a.dim(), b.dim());
    if diff_dims.0 != diff_dims.1 {
        return Err(QStateError::DimMismatch { left: a.dim(), right: b.dim() });
    }
    Ok(DensityMatrix::from_trusted(a.mat.scale(1.0 - lambda) + b.mat.scale(lambda)))
}

/// Finds λ with `distance(interpolate_toward(a, b, λ)) = target` by bisection.
///
/// `distance` must be nondecreasing in λ along the segment. Returns the
/// state at the smallest λ whose distance reaches `target` (within 1e-12 in λ),
/// together with the exactly recomputed distance.
pub fn bisect_mixing<F>(
    a: &DensityMatrix,
    b: &DensityMatrix,
    target: f64,
    distance: F,
) -> Result<(f64, DensityMatrix, f64), QStateError>
where
    F: Fn(&DensityMatrix) -> Result<f64, QStateError>,
{
    let at = |l: f64| -> Result<(DensityMatrix, f64), QStateError> {
        let s = interpolate_toward(a, b, l)?;
        let dist = distance(&s)?;
        Ok((s, dist))
    };
    let (s1, d1) = at(1.0)?;
    if d1 < target {
        return Err(QStateError::UnreachableDistance { target, max: d1 });
    }
    let (s0, d0) = at(0.0)?;
    if d0 >= target {
        return Ok((0.0, s0, d0));
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut best = (1.0, s1, d1);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        let (s, dist) = at(mid)?;
        if dist >= target {
            hi = mid;
            best = (mid, s, dist);
        } else {
            lo = mid;
        }
    }
    Ok(best)
}

/// Zero-pads every local factor of `state` into the dimensions of `target`.
///
/// Traces, inner products, ℓ1 and ℓ2 distances are preserved.
pub fn embed(
    state: &DensityMatrix,
    layout: &SystemLayout,
    target: &SystemLayout,
) -> Result<DensityMatrix, QStateError> {
    layout.check(state)?;
    if layout.parties() != target.parties()
        || layout.dims.iter().zip(&target.dims).any(|(a, b)| a > b)
    {
        return Err(QStateError::LayoutMismatch(format!(
            "cannot embed {layout} into {target}"
        )));
    }
    if layout == target {
        return Ok(state.clone());
    }
    let d = state.dim();
    let map: Vec<usize> = (0..d).map(|i| target.flat_index(&layout.digits(i))).collect();
    let dt = target.total_dim();
    let mut out = CMatrix::zeros(dt, dt);
    for i in 0..d {
        for j in 0..d {
            out[(map[i], map[j])] = state.mat[(i, j)];
        }
    }
    Ok(DensityMatrix { mat: out })
}

/// Test-fixture shape: what the yes- and no-instances hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Instance {
    Single(DensityMatrix),
    Pair(DensityMatrix, DensityMatrix),
}

/// A yes-instance with the property planted exactly and a no-instance at a
/// verified exact distance from it.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePair {
    pub yes_instance: Instance,
    pub no_instance: Instance,
    pub planted_distance: f64,
}

/// On-disk state format: `{"dims": [...], "re": [[...]], "im": [[...]]}`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFile {
    pub dims: Vec<usize>,
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

impl StateFile {
    pub fn from_state(state: &DensityMatrix, layout: &SystemLayout) -> Self {
        let d = state.dim();
        let re = (0..d).map(|i| (0..d).map(|j| state.mat[(i, j)].re).collect()).collect();
        let im = (0..d).map(|i| (0..d).map(|j| state.mat[(i, j)].im).collect()).collect();
        StateFile { dims: layout.dims.clone(), re, im }
    }

    /// Builds and validates the state; errors name the failed invariant.
    pub fn into_state(self) -> Result<(DensityMatrix, SystemLayout), QStateError> {
        let layout = SystemLayout::new(self.dims)?;
        let d = self.re.len();
        if self.im.len() != d
            || self.re.iter().chain(self.im.iter()).any(|row| row.len() != d)
        {
            return Err(QStateError::Format("re/im must both be square and equal-sized".into()));
        }
        let raw = CMatrix::from_fn(d, d, |i, j| Complex64::new(self.re[i][j], self.im[i][j]));
        let state = validate(raw)?;
        layout.check(&state)?;
        Ok((state, layout))
    }

    pub fn from_json(text: &str) -> Result<Self, QStateError> {
        serde_json::from_str(text).map_err(|e| QStateError::Format(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn layout(d: &[usize]) -> SystemLayout {
        SystemLayout::new(d.to_vec()).unwrap()
    }

    #[test]
    fn maximally_mixed_validates() {
        let raw = CMatrix::identity(2, 2).scale(0.5);
        let rho = validate(raw).unwrap();
        let ev = rho.eigenvalues();
        assert_abs_diff_eq!(ev[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(ev[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn pure_projector_validates() {
        let raw = CMatrix::from_row_slice(2, 2, &[c(1.0), c(0.0), c(0.0), c(0.0)]);
        let rho = validate(raw).unwrap();
        assert_abs_diff_eq!(rho.purity(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_each_invariant() {
        let asym = CMatrix::from_row_slice(2, 2, &[c(1.0), c(1.0), c(0.0), c(0.0)]);
        assert!(matches!(validate(asym), Err(QStateError::NotHermitian { .. })));

        let neg = CMatrix::from_row_slice(2, 2, &[c(1.5), c(0.0), c(0.0), c(-0.5)]);
        match validate(neg) {
            Err(QStateError::NotPsd { min_eigenvalue }) => {
                assert_abs_diff_eq!(min_eigenvalue, -0.5, epsilon = 1e-12)
            }
            other => panic!("expected NotPsd, got {other:?}"),
        }

        let big = CMatrix::identity(2, 2);
        assert!(matches!(validate(big), Err(QStateError::BadTrace { .. })));

        let rect = CMatrix::zeros(2, 3);
        assert!(matches!(validate(rect), Err(QStateError::NotSquare { .. })));
    }

    #[test]
    fn tensor_examples() {
        let mm = DensityMatrix::maximally_mixed(2);
        let t = tensor(&mm, &mm);
        assert_eq!(t.dim(), 4);
        assert_abs_diff_eq!(l2_distance(&t, &DensityMatrix::maximally_mixed(4)).unwrap(), 0.0);

        let t = tensor(&DensityMatrix::basis_state(2, 0), &DensityMatrix::basis_state(2, 1));
        for i in 0..4 {
            let want = if i == 1 { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(t.matrix()[(i, i)].re, want);
        }
        assert_abs_diff_eq!(t.trace(), 1.0);
    }

    #[test]
    fn partial_trace_of_bell_is_mixed() {
        let phi = DensityMatrix::maximally_entangled(2);
        let l = layout(&[2, 2]);
        for keep in [0, 1] {
            let r = partial_trace(&phi, &l, &[keep]).unwrap();
            assert_abs_diff_eq!(
                l2_distance(&r, &DensityMatrix::maximally_mixed(2)).unwrap(),
                0.0,
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn partial_trace_recovers_factors() {
        let mut r = rng(1);
        let a = random_mixed(2, 2, &mut r).unwrap();
        let b = random_mixed(3, 2, &mut r).unwrap();
        let l = layout(&[2, 3]);
        let ab = tensor(&a, &b);
        assert!(l2_distance(&partial_trace(&ab, &l, &[0]).unwrap(), &a).unwrap() < 1e-13);
        assert!(l2_distance(&partial_trace(&ab, &l, &[1]).unwrap(), &b).unwrap() < 1e-13);
        assert!(matches!(
            partial_trace(&ab, &layout(&[2, 2]), &[0]),
            Err(QStateError::LayoutMismatch(_))
        ));
        assert!(partial_trace(&ab, &l, &[]).is_err());
    }

    #[test]
    fn partial_trace_preserves_trace() {
        let mut r = rng(2);
        let l = layout(&[2, 3, 2]);
        for _ in 0..100 {
            let rho = random_mixed(12, 3, &mut r).unwrap();
            for keep in [&[0][..], &[1], &[2], &[0, 2], &[1, 2]] {
                let red = partial_trace(&rho, &l, keep).unwrap();
                assert_abs_diff_eq!(red.trace(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn orthogonal_pure_distances() {
        let a = DensityMatrix::basis_state(2, 0);
        let b = DensityMatrix::basis_state(2, 1);
        assert_abs_diff_eq!(l1_distance(&a, &b).unwrap(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l2_distance(&a, &b).unwrap(), 2f64.sqrt(), epsilon = 1e-12);
        assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
        assert!(matches!(
            l1_distance(&a, &DensityMatrix::maximally_mixed(3)),
            Err(QStateError::DimMismatch { .. })
        ));
    }

    #[test]
    fn bell_distance_to_product() {
        let phi = DensityMatrix::maximally_entangled(2);
        let dist = distance_to_product(&phi, &layout(&[2, 2])).unwrap();
        // Φ − I/4 has eigenvalues 3/4, −1/4, −1/4, −1/4
        assert_abs_diff_eq!(dist.l1, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(dist.l2, 0.75f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn product_input_has_zero_distance() {
        let mut r = rng(3);
        let a = random_mixed(2, 2, &mut r).unwrap();
        let b = random_pure(2, &mut r).unwrap();
        let dist = distance_to_product(&tensor(&a, &b), &layout(&[2, 2])).unwrap();
        assert!(dist.l1 < 1e-12 && dist.l2 < 1e-12);
    }

    #[test]
    fn distance_to_product_monotone_in_mixing() {
        let mut r = rng(4);
        let l = layout(&[2, 2]);
        let prod = tensor(&random_mixed(2, 2, &mut r).unwrap(), &random_mixed(2, 2, &mut r).unwrap());
        let phi = DensityMatrix::maximally_entangled(2);
        let mut last = -1.0;
        for step in 0..=20 {
            let lam = step as f64 / 20.0;
            let s = interpolate_toward(&prod, &phi, lam).unwrap();
            let d = distance_to_product(&s, &l).unwrap().l1;
            assert!(d >= last - 1e-12, "λ={lam}: {d} < {last}");
            last = d;
        }
    }

    #[test]
    fn fixture_generators() {
        let mut r = rng(5);
        let a = random_mixed(3, 2, &mut r).unwrap();
        let b = random_pure(3, &mut r).unwrap();
        assert_eq!(interpolate_toward(&a, &b, 0.0).unwrap(), DensityMatrix::from_trusted(a.matrix().clone()));
        assert!(matches!(interpolate_toward(&a, &b, 1.5), Err(QStateError::BadLambda(_))));
        assert_abs_diff_eq!(b.purity(), 1.0, epsilon = 1e-10);
        let m = random_mixed(4, 4, &mut r).unwrap();
        assert!(m.eigenvalues().iter().all(|&e| e >= -1e-12));
        assert_abs_diff_eq!(m.trace(), 1.0, epsilon = 1e-12);
        assert!(matches!(random_mixed(4, 5, &mut r), Err(QStateError::BadRank { .. })));
        assert!(matches!(random_mixed(4, 0, &mut r), Err(QStateError::BadRank { .. })));
    }

    #[test]
    fn bisection_plants_exact_distance() {
        let mut r = rng(6);
        let a = random_mixed(2, 2, &mut r).unwrap();
        let b = DensityMatrix::basis_state(2, 0);
        let far = l1_distance(&a, &b).unwrap();
        let (lam, s, d) = bisect_mixing(&a, &b, 0.5 * far, |s| l1_distance(&a, s)).unwrap();
        assert_abs_diff_eq!(lam, 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(d, l1_distance(&a, &s).unwrap());
        assert!(matches!(
            bisect_mixing(&a, &b, far + 0.1, |s| l1_distance(&a, s)),
            Err(QStateError::UnreachableDistance { .. })
        ));
    }

    #[test]
    fn embedding_preserves_distances() {
        let mut r = rng(7);
        let l = layout(&[3, 2]);
        let a = random_mixed(6, 3, &mut r).unwrap();
        let b = random_mixed(6, 2, &mut r).unwrap();
        let p = l.padded();
        assert_eq!(p.dims(), &[4, 2]);
        let ea = embed(&a, &l, &p).unwrap();
        let eb = embed(&b, &l, &p).unwrap();
        assert_abs_diff_eq!(
            l1_distance(&ea, &eb).unwrap(),
            l1_distance(&a, &b).unwrap(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            l2_distance(&ea, &eb).unwrap(),
            l2_distance(&a, &b).unwrap(),
            epsilon = 1e-12
        );
        // marginals commute with embedding
        let m = partial_trace(&ea, &p, &[1]).unwrap();
        assert!(l2_distance(&m, &partial_trace(&a, &l, &[1]).unwrap()).unwrap() < 1e-13);
    }

    #[test]
    fn product_over_cut_matches_direct_for_first_party() {
        let mut r = rng(8);
        let l = layout(&[2, 2, 2]);
        let rho = random_mixed(8, 4, &mut r).unwrap();
        let direct = tensor(
            &partial_trace(&rho, &l, &[0]).unwrap(),
            &partial_trace(&rho, &l, &[1, 2]).unwrap(),
        );
        let cut = product_over_cut(&rho, &l, &[0]).unwrap();
        assert!(l2_distance(&direct, &cut).unwrap() < 1e-13);
        // middle party: marginals of the cut product are the original marginals
        let mid = product_over_cut(&rho, &l, &[1]).unwrap();
        for p in 0..3 {
            let want = partial_trace(&rho, &l, &[p]).unwrap();
            let got = partial_trace(&mid, &l, &[p]).unwrap();
            assert!(l2_distance(&want, &got).unwrap() < 1e-13);
        }
        let (_, pl) = permute_parties(&rho, &l, &[2, 0, 1]).unwrap();
        assert_eq!(pl.dims(), &[2, 2, 2]);
    }

    #[test]
    fn state_file_round_trip_and_errors() {
        let mut r = rng(9);
        let l = layout(&[2, 2]);
        let rho = random_mixed(4, 2, &mut r).unwrap();
        let text = StateFile::from_state(&rho, &l).to_json();
        let (back, bl) = StateFile::from_json(&text).unwrap().into_state().unwrap();
        assert_eq!(bl, l);
        assert!(l2_distance(&back, &rho).unwrap() < 1e-15);

        let bad = r#"{"dims":[2],"re":[[1,1],[0,0]],"im":[[0,0],[0,0]]}"#;
        let err = StateFile::from_json(bad).unwrap().into_state().unwrap_err();
        assert!(matches!(err, QStateError::NotHermitian { .. }), "{err}");
        let wrong_layout = r#"{"dims":[3],"re":[[1,0],[0,0]],"im":[[0,0],[0,0]]}"#;
        assert!(matches!(
            StateFile::from_json(wrong_layout).unwrap().into_state(),
            Err(QStateError::LayoutMismatch(_))
        ));
    }

    #[test]
    fn layout_guards() {
        assert!(SystemLayout::new(vec![]).is_err());
        assert!(SystemLayout::new(vec![1, 2]).is_err());
        assert!(matches!(SystemLayout::new(vec![16, 32]), Err(QStateError::TooLarge { .. })));
        let l = layout(&[2, 3, 4]);
        for i in 0..24 {
            assert_eq!(l.flat_index(&l.digits(i)), i);
        }
    }

    fn seeded_pair(seed: u64, dims: &[usize]) -> (DensityMatrix, DensityMatrix, SystemLayout) {
        let mut r = rng(seed);
        let l = layout(dims);
        let d = l.total_dim();
        let rank_a = 1 + (seed as usize % d);
        let a = random_mixed(d, rank_a, &mut r).unwrap();
        let b = random_mixed(d, d, &mut r).unwrap();
        (a, b, l)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn norm_sandwich(seed in any::<u64>(), d in 2usize..9) {
            let (a, b, _) = seeded_pair(seed, &[d]);
            let l1 = l1_distance(&a, &b).unwrap();
            let l2 = l2_distance(&a, &b).unwrap();
            prop_assert!(l2 <= l1 + 1e-12);
            prop_assert!(l1 <= (d as f64).sqrt() * l2 + 1e-12);
        }

        #[test]
        fn trace_distance_contracts_under_partial_trace(seed in any::<u64>()) {
            let (a, b, l) = seeded_pair(seed, &[2, 3]);
            let full = l1_distance(&a, &b).unwrap();
            for p in 0..2 {
                let ra = partial_trace(&a, &l, &[p]).unwrap();
                let rb = partial_trace(&b, &l, &[p]).unwrap();
                prop_assert!(l1_distance(&ra, &rb).unwrap() <= full + 1e-12);
            }
        }

        #[test]
        fn product_triangle(seed in any::<u64>(), m in 2usize..4) {
            let mut r = rng(seed);
            let rs: Vec<_> = (0..m).map(|_| random_mixed(2, 2, &mut r).unwrap()).collect();
            let ss: Vec<_> = (0..m).map(|_| random_mixed(2, 1 + (seed as usize % 2), &mut r).unwrap()).collect();
            let lhs = l1_distance(&tensor_all(&rs), &tensor_all(&ss)).unwrap();
            let rhs: f64 = rs.iter().zip(&ss).map(|(a, b)| l1_distance(a, b).unwrap()).sum();
            prop_assert!(lhs <= rhs + 1e-12);
        }

        #[test]
        fn close_to_product_implies_close_to_marginal_product(seed in any::<u64>(), lam in 0.0f64..1.0) {
            let mut r = rng(seed);
            let l = layout(&[2, 2]);
            let sigma = tensor(&random_mixed(2, 2, &mut r).unwrap(), &random_mixed(2, 2, &mut r).unwrap());
            let rho = interpolate_toward(&sigma, &random_mixed(4, 4, &mut r).unwrap(), lam).unwrap();
            let eps = 3.0 * l1_distance(&rho, &sigma).unwrap();
            prop_assert!(distance_to_product(&rho, &l).unwrap().l1 <= eps + 1e-12);
        }

        #[test]
        fn one_vs_rest_closeness_bounds_full_product_distance(seed in any::<u64>(), m in 3usize..5) {
            let mut r = rng(seed);
            let l = layout(&vec![2; m]);
            let rho = random_mixed(l.total_dim(), 1 + (seed as usize % 4), &mut r).unwrap();
            let eps = (0..m)
                .map(|i| l1_distance(&rho, &product_over_cut(&rho, &l, &[i]).unwrap()).unwrap())
                .fold(0.0, f64::max);
            let full = distance_to_product(&rho, &l).unwrap().l1;
            prop_assert!(full <= 5.0 * m as f64 * eps + 1e-12);
        }

        #[test]
        fn purity_is_multiplicative(seed in any::<u64>()) {
            let mut r = rng(seed);
            let a = random_mixed(3, 2, &mut r).unwrap();
            let b = random_mixed(2, 2, &mut r).unwrap();
            let lhs = tensor(&a, &b).purity();
            prop_assert!((lhs - a.purity() * b.purity()).abs() < 1e-12);
        }
    }
}

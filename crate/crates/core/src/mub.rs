//! Mutually unbiased bases for d = 2^k and the measurement channels built on them.
//!
//! The n-qubit Pauli group is partitioned into 2^k + 1 commuting classes; the
//! joint eigenbasis of each class is one basis of the family. Measuring every
//! basis with weight 1/(d+1) gives a d(d+1)-outcome POVM whose image
//! distribution is an isometric copy of the state in ℓ2.

use std::sync::OnceLock;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::qstate::{embed, CMatrix, DensityMatrix, QStateError, SystemLayout};

/// Largest supported qubit count per party.
pub const MAX_K: u32 = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MubError {
    #[error("dimension {0} is not a power of two in 2..=16")]
    UnsupportedDimension(usize),
    #[error("no commuting partition found for k = {0}")]
    PartitionNotFound(u32),
    #[error("eigenbasis of class {0} stayed degenerate after retries")]
    DegenerateEigenbasis(usize),
    #[error("dimension mismatch: state {state}, channel {channel}")]
    DimMismatch { state: usize, channel: usize },
    #[error(transparent)]
    State(#[from] QStateError),
}

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// X^x Z^z on k qubits with the phase i^{|x∧z|} that makes it Hermitian.
///
/// Bit b of `x`/`z` acts on bit b of the computational basis index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PauliOperator {
    pub k: u32,
    pub x_bits: u32,
    pub z_bits: u32,
    /// Exponent of i in the Hermitian representative.
    pub phase: u8,
}

impl PauliOperator {
    pub fn new(k: u32, x_bits: u32, z_bits: u32) -> Self {
        let phase = ((x_bits & z_bits).count_ones() % 4) as u8;
        PauliOperator { k, x_bits, z_bits, phase }
    }

    /// Position in the enumeration x·2^k + z used by the partition search.
    pub fn index(&self) -> usize {
        ((self.x_bits as usize) << self.k) | self.z_bits as usize
    }

    pub fn from_index(k: u32, index: usize) -> Self {
        let mask = (1usize << k) - 1;
        Self::new(k, (index >> k) as u32, (index & mask) as u32)
    }

    pub fn is_identity(&self) -> bool {
        self.x_bits == 0 && self.z_bits == 0
    }

    /// Symplectic commutation test.
    pub fn commutes_with(&self, other: &PauliOperator) -> bool {
        ((self.x_bits & other.z_bits) ^ (self.z_bits & other.x_bits)).count_ones().is_multiple_of(2)
    }

    /// Product up to phase.
    pub fn mul(&self, other: &PauliOperator) -> PauliOperator {
        Self::new(self.k, self.x_bits ^ other.x_bits, self.z_bits ^ other.z_bits)
    }

    pub fn matrix(&self) -> CMatrix {
        let d = 1usize << self.k;
        let ph = Complex64::i().powu(self.phase as u32);
        let mut m = CMatrix::zeros(d, d);
        for b in 0..d {
            let sign = if (self.z_bits as usize & b).count_ones().is_multiple_of(2) { 1.0 } else { -1.0 };
            m[(b ^ self.x_bits as usize, b)] = ph * sign;
        }
        m
    }

    /// P|v⟩ without building the matrix.
    pub fn apply(&self, v: &[Complex64]) -> Vec<Complex64> {
        let ph = Complex64::i().powu(self.phase as u32);
        let mut out = vec![ZERO; v.len()];
        for (b, &vb) in v.iter().enumerate() {
            let sign = if (self.z_bits as usize & b).count_ones().is_multiple_of(2) { 1.0 } else { -1.0 };
            out[b ^ self.x_bits as usize] = ph * sign * vb;
        }
        out
    }

    /// Tensor-product letters, most significant qubit first.
    pub fn label(&self) -> String {
        (0..self.k)
            .rev()
            .map(|q| match ((self.x_bits >> q) & 1, (self.z_bits >> q) & 1) {
                (0, 0) => 'I',
                (1, 0) => 'X',
                (0, 1) => 'Z',
                _ => 'Y',
            })
            .collect()
    }
}

/// A maximal commuting set of 2^k Paulis, identity included.
#[derive(Debug, Clone, PartialEq)]
pub struct AbelianClass {
    pub index: usize,
    pub members: Vec<PauliOperator>,
}

impl AbelianClass {
    /// k independent members whose products generate the class.
    pub fn generators(&self) -> Vec<PauliOperator> {
        let mut span: Vec<PauliOperator> = vec![self.members[0].mul(&self.members[0])];
        let mut gens = Vec::new();
        for p in &self.members {
            if span.contains(p) {
                continue;
            }
            let extra: Vec<PauliOperator> = span.iter().map(|s| s.mul(p)).collect();
            span.extend(extra);
            gens.push(*p);
        }
        gens
    }
}

/// Splits the 4^k − 1 non-identity Paulis into 2^k + 1 commuting classes.
pub fn commuting_partition(k: u32) -> Result<Vec<AbelianClass>, MubError> {
    if k == 0 || k > MAX_K {
        return Err(MubError::UnsupportedDimension(1usize << k.min(31)));
    }
    let n = 1usize << (2 * k);
    let mut covered = vec![false; n];
    covered[0] = true;
    let mut classes: Vec<Vec<usize>> = Vec::new();
    if !cover(k, &mut covered, &mut classes) {
        return Err(MubError::PartitionNotFound(k));
    }
    Ok(classes
        .into_iter()
        .enumerate()
        .map(|(index, members)| {
            let mut ops: Vec<PauliOperator> =
                members.into_iter().map(|i| PauliOperator::from_index(k, i)).collect();
            ops.sort_by_key(|p| p.index());
            AbelianClass { index, members: ops }
        })
        .collect())
}

fn cover(k: u32, covered: &mut [bool], classes: &mut Vec<Vec<usize>>) -> bool {
    let Some(first) = covered.iter().position(|&c| !c) else {
        return true;
    };
    let mut span = vec![0usize, first];
    grow(k, first, &mut span, covered, classes)
}

// Extends `span` (a subgroup, as symplectic indices) by uncovered commuting
// elements until it has 2^k members, then recurses on the remaining cover.
fn grow(
    k: u32,
    from: usize,
    span: &mut Vec<usize>,
    covered: &mut [bool],
    classes: &mut Vec<Vec<usize>>,
) -> bool {
    let size = 1usize << k;
    if span.len() == size {
        for &s in span.iter() {
            covered[s] = true;
        }
        classes.push(span.clone());
        if cover(k, covered, classes) {
            return true;
        }
        classes.pop();
        for &s in span.iter().skip(1) {
            covered[s] = false;
        }
        return false;
    }
    let ops: Vec<PauliOperator> = span.iter().map(|&s| PauliOperator::from_index(k, s)).collect();
    for cand in from + 1..covered.len() {
        if covered[cand] || span.contains(&cand) {
            continue;
        }
        let q = PauliOperator::from_index(k, cand);
        if !ops.iter().all(|p| p.commutes_with(&q)) {
            continue;
        }
        let extra: Vec<usize> = ops.iter().map(|p| p.mul(&q).index()).collect();
        if extra.iter().any(|&e| covered[e]) {
            continue;
        }
        let before = span.len();
        span.extend(extra);
        if grow(k, cand, span, covered, classes) {
            return true;
        }
        span.truncate(before);
    }
    false
}

/// The d + 1 bases; `bases[i][j]` is the unit vector |β_{i,j}⟩.
#[derive(Debug, Clone, PartialEq)]
pub struct MubFamily {
    pub d: usize,
    pub classes: Vec<AbelianClass>,
    pub bases: Vec<Vec<Vec<Complex64>>>,
}

fn k_of(d: usize) -> Result<u32, MubError> {
    if !d.is_power_of_two() || !(2..=1 << MAX_K).contains(&d) {
        return Err(MubError::UnsupportedDimension(d));
    }
    Ok(d.trailing_zeros())
}

/// Builds the family from scratch. Prefer [`mub_family`], which caches.
pub fn build_mub_family(d: usize) -> Result<MubFamily, MubError> {
    let k = k_of(d)?;
    let classes = commuting_partition(k)?;
    let bases = classes
        .iter()
        .map(|cl| class_eigenbasis(cl, d))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MubFamily { d, classes, bases })
}

fn class_eigenbasis(class: &AbelianClass, d: usize) -> Result<Vec<Vec<Complex64>>, MubError> {
    let gens = class.generators();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d75_6200 + class.index as u64);
    for _attempt in 0..16 {
        let mut h = CMatrix::zeros(d, d);
        for p in class.members.iter().filter(|p| !p.is_identity()) {
            let w: f64 = rng.random_range(0.5..1.5);
            h += p.matrix().scale(w);
        }
        let eig = h.symmetric_eigen();
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        if ev.windows(2).any(|w| w[1] - w[0] < 1e-6) {
            continue;
        }
        let mut labelled: Vec<(usize, Vec<Complex64>)> = (0..d)
            .map(|col| {
                let v: Vec<Complex64> = eig.eigenvectors.column(col).iter().copied().collect();
                let label = sign_label(&gens, &v);
                (label, polish(&gens, label, &v))
            })
            .collect();
        labelled.sort_by_key(|(l, _)| *l);
        if labelled.windows(2).any(|w| w[0].0 == w[1].0) {
            continue;
        }
        return Ok(labelled.into_iter().map(|(_, v)| v).collect());
    }
    Err(MubError::DegenerateEigenbasis(class.index))
}

fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

// bit g is set when the eigenvalue under generator g is −1
fn sign_label(gens: &[PauliOperator], v: &[Complex64]) -> usize {
    gens.iter()
        .enumerate()
        .map(|(g, p)| if inner(v, &p.apply(v)).re < 0.0 { 1 << g } else { 0 })
        .sum()
}

// Projects onto the joint eigenspace Π_g (I ± P_g)/2, renormalizes, and fixes
// the phase so the first nonzero entry is real positive.
fn polish(gens: &[PauliOperator], label: usize, v: &[Complex64]) -> Vec<Complex64> {
    let mut w = v.to_vec();
    for (g, p) in gens.iter().enumerate() {
        let s = if label >> g & 1 == 1 { -1.0 } else { 1.0 };
        let pw = p.apply(&w);
        w = w.iter().zip(&pw).map(|(a, b)| (a + b * s) * 0.5).collect();
    }
    normalize_phase(&mut w);
    w
}

fn normalize_phase(w: &mut [Complex64]) {
    let norm = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let lead = w.iter().copied().find(|z| z.norm() > 1e-9).unwrap_or(c(1.0));
    let rot = lead.conj() / lead.norm();
    for z in w.iter_mut() {
        *z = *z * rot / norm;
        if z.norm() < 1e-15 {
            *z = ZERO;
        }
    }
}

static FAMILIES: [OnceLock<MubFamily>; MAX_K as usize] =
    [OnceLock::new(), OnceLock::new(), OnceLock::new(), OnceLock::new()];

/// Cached family for d ∈ {2, 4, 8, 16}.
pub fn mub_family(d: usize) -> Result<&'static MubFamily, MubError> {
    let k = k_of(d)?;
    let slot = &FAMILIES[(k - 1) as usize];
    if let Some(f) = slot.get() {
        return Ok(f);
    }
    let built = build_mub_family(d)?;
    Ok(slot.get_or_init(|| built))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MubReport {
    /// max over i ≠ s of ||⟨β_ij|β_st⟩|² − 1/d|
    pub max_unbiasedness_deviation: f64,
    /// max |⟨β_ij|β_it⟩ − δ_jt|
    pub max_orthonormality_deviation: f64,
    /// max entry of |Σ M_ij − I|
    pub completeness_residual: f64,
    /// max ‖P v − λ v‖ over class members P and basis vectors v
    pub max_eigen_residual: f64,
}

impl MubReport {
    pub fn passes(&self) -> bool {
        self.max_unbiasedness_deviation <= 1e-8
            && self.max_orthonormality_deviation <= 1e-9
            && self.completeness_residual <= 1e-9
            && self.max_eigen_residual <= 1e-8
    }
}

impl MubFamily {
    pub fn num_outcomes(&self) -> usize {
        self.d * (self.d + 1)
    }

    pub fn vector(&self, i: usize, j: usize) -> &[Complex64] {
        &self.bases[i][j]
    }

    /// Basis i as a unitary with column j = |β_{i,j}⟩.
    pub fn basis_matrix(&self, i: usize) -> CMatrix {
        CMatrix::from_fn(self.d, self.d, |r, col| self.bases[i][col][r])
    }

    /// Scans every overlap, completeness and eigenvector condition.
    pub fn verify(&self) -> MubReport {
        let d = self.d;
        let target = 1.0 / d as f64;
        let mut unb: f64 = 0.0;
        let mut orth: f64 = 0.0;
        for i in 0..=d {
            for s in i..=d {
                for j in 0..d {
                    for t in 0..d {
                        let ov = inner(&self.bases[i][j], &self.bases[s][t]);
                        if i == s {
                            let want = if j == t { c(1.0) } else { ZERO };
                            orth = orth.max((ov - want).norm());
                        } else {
                            unb = unb.max((ov.norm_sqr() - target).abs());
                        }
                    }
                }
            }
        }
        let povm = MubPovm::new(self);
        let mut eig_res: f64 = 0.0;
        for (cl, basis) in self.classes.iter().zip(&self.bases) {
            for p in &cl.members {
                for v in basis {
                    let pv = p.apply(v);
                    let lam = inner(v, &pv);
                    let r: f64 = pv.iter().zip(v).map(|(a, b)| (a - lam * b).norm_sqr()).sum();
                    eig_res = eig_res.max(r.sqrt());
                }
            }
        }
        MubReport {
            max_unbiasedness_deviation: unb,
            max_orthonormality_deviation: orth,
            completeness_residual: povm.completeness_residual(),
            max_eigen_residual: eig_res,
        }
    }

    /// Copy with entry `entry` of |β_{i,j}⟩ multiplied by e^{iθ}. For fault injection.
    pub fn with_corrupted_phase(&self, i: usize, j: usize, entry: usize, theta: f64) -> MubFamily {
        let mut out = self.clone();
        out.bases[i][j][entry] *= Complex64::from_polar(1.0, theta);
        out
    }
}

/// The d(d+1)-effect POVM M_ij = |β_ij⟩⟨β_ij|/(d+1); outcome (i, j) has index i·d + j.
#[derive(Debug, Clone, Copy)]
pub struct MubPovm<'a> {
    pub family: &'a MubFamily,
}

impl<'a> MubPovm<'a> {
    pub fn new(family: &'a MubFamily) -> Self {
        MubPovm { family }
    }

    pub fn num_outcomes(&self) -> usize {
        self.family.num_outcomes()
    }

    pub fn effect(&self, i: usize, j: usize) -> CMatrix {
        let v = self.family.vector(i, j);
        let d = self.family.d;
        CMatrix::from_fn(d, d, |r, s| v[r] * v[s].conj() / (d as f64 + 1.0))
    }

    pub fn completeness_residual(&self) -> f64 {
        let d = self.family.d;
        let mut sum = CMatrix::zeros(d, d);
        for i in 0..=d {
            for j in 0..d {
                sum += self.effect(i, j);
            }
        }
        sum -= CMatrix::identity(d, d);
        sum.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// p(i, j) = ⟨β_ij|ρ|β_ij⟩/(d+1).
pub fn channel_probabilities(state: &DensityMatrix, povm: &MubPovm) -> Result<Vec<f64>, MubError> {
    let d = povm.family.d;
    if state.dim() != d {
        return Err(MubError::DimMismatch { state: state.dim(), channel: d });
    }
    let scale = 1.0 / (d as f64 + 1.0);
    let mut p = Vec::with_capacity(povm.num_outcomes());
    for basis in &povm.family.bases {
        for v in basis {
            p.push((state.expectation(v) * scale).max(0.0));
        }
    }
    Ok(p)
}

/// Single-system coefficients μ_ij = ⟨β_ij|ρ|β_ij⟩ − 1/d.
#[derive(Debug, Clone, PartialEq)]
pub struct MubDecomposition {
    pub d: usize,
    /// indexed i·d + j
    pub mu: Vec<f64>,
}

impl MubDecomposition {
    /// I/d + Σ μ_ij |β_ij⟩⟨β_ij|.
    pub fn recompose(&self, family: &MubFamily) -> CMatrix {
        let d = self.d;
        let mut m = CMatrix::identity(d, d).scale(1.0 / d as f64);
        for i in 0..=d {
            for j in 0..d {
                m += projector(family.vector(i, j)).scale(self.mu[i * d + j]);
            }
        }
        m
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.mu.iter().map(|x| x * x).sum()
    }
}

fn projector(v: &[Complex64]) -> CMatrix {
    let d = v.len();
    CMatrix::from_fn(d, d, |r, s| v[r] * v[s].conj())
}

pub fn mub_decompose(state: &DensityMatrix, family: &MubFamily) -> Result<MubDecomposition, MubError> {
    let d = family.d;
    if state.dim() != d {
        return Err(MubError::DimMismatch { state: state.dim(), channel: d });
    }
    let mu = family
        .bases
        .iter()
        .flat_map(|b| b.iter().map(|v| state.expectation(v) - 1.0 / d as f64))
        .collect();
    Ok(MubDecomposition { d, mu })
}

/// Bipartite coefficients: ν from ρ₁, μ from ρ₂, and the joint χ.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteDecomposition {
    pub d1: usize,
    pub d2: usize,
    pub nu: Vec<f64>,
    pub mu: Vec<f64>,
    /// indexed (i·d1 + j)·d2(d2+1) + s·d2 + t
    pub chi: Vec<f64>,
}

pub fn mub_decompose_bipartite(
    state: &DensityMatrix,
    layout: &SystemLayout,
) -> Result<BipartiteDecomposition, MubError> {
    layout.check(state)?;
    if layout.parties() != 2 {
        return Err(QStateError::LayoutMismatch("bipartite layout required".into()).into());
    }
    let (d1, d2) = (layout.dims()[0], layout.dims()[1]);
    let f1 = mub_family(d1)?;
    let f2 = mub_family(d2)?;
    let r1 = crate::qstate::partial_trace(state, layout, &[0])?;
    let r2 = crate::qstate::partial_trace(state, layout, &[1])?;
    let nu = mub_decompose(&r1, f1)?.mu;
    let mu = mub_decompose(&r2, f2)?.mu;
    let joint = local_joint_expectations(state, layout)?;
    let (o1, o2) = (f1.num_outcomes(), f2.num_outcomes());
    let inv = 1.0 / (d1 * d2) as f64;
    let mut chi = vec![0.0; o1 * o2];
    for a in 0..o1 {
        for b in 0..o2 {
            chi[a * o2 + b] = joint[a * o2 + b] - inv - nu[a] / d2 as f64 - mu[b] / d1 as f64;
        }
    }
    Ok(BipartiteDecomposition { d1, d2, nu, mu, chi })
}

impl BipartiteDecomposition {
    pub fn recompose(&self) -> Result<CMatrix, MubError> {
        let (d1, d2) = (self.d1, self.d2);
        let f1 = mub_family(d1)?;
        let f2 = mub_family(d2)?;
        let p1: Vec<CMatrix> = f1.bases.iter().flatten().map(|v| projector(v)).collect();
        let p2: Vec<CMatrix> = f2.bases.iter().flatten().map(|v| projector(v)).collect();
        let i1 = CMatrix::identity(d1, d1);
        let i2 = CMatrix::identity(d2, d2);
        let mut m = CMatrix::identity(d1 * d2, d1 * d2).scale(1.0 / (d1 * d2) as f64);
        for (a, pa) in p1.iter().enumerate() {
            m += pa.kronecker(&i2).scale(self.nu[a] / d2 as f64);
        }
        for (b, pb) in p2.iter().enumerate() {
            m += i1.kronecker(pb).scale(self.mu[b] / d1 as f64);
        }
        for (a, pa) in p1.iter().enumerate() {
            for (b, pb) in p2.iter().enumerate() {
                m += pa.kronecker(pb).scale(self.chi[a * p2.len() + b]);
            }
        }
        Ok(m)
    }
}

// ⟨β⊗…⊗β|ρ|β⊗…⊗β⟩ for every local outcome tuple, mixed-radix with party 0 most
// significant. Requires every local dimension to be a supported power of two.
fn local_joint_expectations(
    state: &DensityMatrix,
    layout: &SystemLayout,
) -> Result<Vec<f64>, MubError> {
    layout.check(state)?;
    let families = layout
        .dims()
        .iter()
        .map(|&d| mub_family(d))
        .collect::<Result<Vec<_>, _>>()?;
    let m = layout.parties();
    let dim = state.dim();
    let nbases: Vec<usize> = layout.dims().iter().map(|d| d + 1).collect();
    let combos: usize = nbases.iter().product();
    let local_units: Vec<Vec<CMatrix>> = families
        .iter()
        .map(|f| (0..=f.d).map(|i| f.basis_matrix(i)).collect())
        .collect();
    let outcomes: Vec<usize> = layout.dims().iter().map(|d| d * (d + 1)).collect();
    let total: usize = outcomes.iter().product();
    let mut out = vec![0.0; total];
    let rho = state.matrix();
    for combo in 0..combos {
        // basis choice per party
        let mut rem = combo;
        let mut choice = vec![0usize; m];
        for t in (0..m).rev() {
            choice[t] = rem % nbases[t];
            rem /= nbases[t];
        }
        let u = choice
            .iter()
            .enumerate()
            .map(|(t, &i)| local_units[t][i].clone())
            .reduce(|a, b| a.kronecker(&b))
            .expect("at least one party");
        let w = rho * &u;
        for col in 0..dim {
            let val: f64 = (0..dim).map(|r| (u[(r, col)].conj() * w[(r, col)]).re).sum();
            let digits = layout.digits(col);
            let mut idx = 0usize;
            for t in 0..m {
                let local = choice[t] * layout.dims()[t] + digits[t];
                idx = idx * outcomes[t] + local;
            }
            out[idx] = val;
        }
    }
    Ok(out)
}

/// Product of the per-party MUB POVMs over a (padded) layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalMubPovm {
    /// original local dimensions
    pub layout: SystemLayout,
    /// dimensions rounded up to powers of two
    pub padded: SystemLayout,
}

impl LocalMubPovm {
    pub fn new(layout: &SystemLayout) -> Result<Self, MubError> {
        let padded = layout.padded();
        for &d in padded.dims() {
            k_of(d)?;
        }
        Ok(LocalMubPovm { layout: layout.clone(), padded })
    }

    /// Per-party outcome counts d_t′(d_t′+1).
    pub fn outcome_radices(&self) -> Vec<usize> {
        self.padded.dims().iter().map(|d| d * (d + 1)).collect()
    }

    pub fn num_outcomes(&self) -> usize {
        self.outcome_radices().iter().product()
    }

    /// Π_t (d_t′ + 1)
    pub fn scale(&self) -> f64 {
        self.padded.dims().iter().map(|&d| d as f64 + 1.0).product()
    }

    /// Exact image distribution of `state` (zero-padded first if needed).
    pub fn image(&self, state: &DensityMatrix) -> Result<Vec<f64>, MubError> {
        let padded_state = embed(state, &self.layout, &self.padded)?;
        let joint = local_joint_expectations(&padded_state, &self.padded)?;
        let s = self.scale();
        Ok(joint.into_iter().map(|x| (x / s).max(0.0)).collect())
    }

    /// Splits a flat outcome index into per-party outcome indices.
    pub fn split_outcome(&self, mut index: usize) -> Vec<usize> {
        let radices = self.outcome_radices();
        let mut out = vec![0; radices.len()];
        for (slot, r) in out.iter_mut().zip(&radices).rev() {
            *slot = index % r;
            index /= r;
        }
        out
    }

    /// Marginal of an image distribution on the parties in `keep` (sorted).
    pub fn marginal(&self, p: &[f64], keep: &[usize]) -> Vec<f64> {
        let radices = self.outcome_radices();
        let size: usize = keep.iter().map(|&k| radices[k]).product();
        let mut out = vec![0.0; size];
        for (idx, &pv) in p.iter().enumerate() {
            let parts = self.split_outcome(idx);
            let j = keep.iter().fold(0, |acc, &k| acc * radices[k] + parts[k]);
            out[j] += pv;
        }
        out
    }
}

/// Image of a single-system state, zero-padding to the next power of two.
pub fn single_image(state: &DensityMatrix) -> Result<Vec<f64>, MubError> {
    let layout = SystemLayout::single(state.dim())?;
    LocalMubPovm::new(&layout)?.image(state)
}

pub fn l2_norm(p: &[f64]) -> f64 {
    p.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_diff(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Outer product p ⊗ q of two distributions.
pub fn outer(p: &[f64], q: &[f64]) -> Vec<f64> {
    p.iter().flat_map(|a| q.iter().map(move |b| a * b)).collect()
}

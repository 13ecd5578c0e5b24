//! Fixtures, Monte Carlo experiments, calibration and the self-test.
//!
//! A run is fully determined by its [`ExperimentSpec`]: fixtures come from
//! `RngStream(seed, point, "fixture")` and trial t of kind yes/no from
//! `RngStream(seed, t, "<kind>/<point>")`, so rows are identical whether
//! trials run on one thread or many.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classical::{
    cdvv_statistic, exact_independence_l2, exact_l2, independence_l2_ustat, Answer,
    BivariateSamples,
};
use crate::mub::{build_mub_family, l2_diff, l2_norm, mub_family, single_image, LocalMubPovm, MubPovm};
use crate::qstate::{
    bisect_mixing, distance_to_product, l1_distance, l2_distance, partial_trace, random_mixed,
    random_pure, tensor, tensor_all, DensityMatrix, Instance, QStateError, StatePair,
    SystemLayout,
};
use crate::sampling::{
    collective_independence_oracle, collective_l2_identity_oracle, poissonized_counts, role_tag,
    sample_counts, swap_batch_estimate, swap_difference, CollectiveOracleParams, RngStream,
};
use crate::testers::{
    collection_identity, collection_identity_independence, collection_independence,
    cond_indep_collective, cond_indep_independent, condindep_xi, gamma, identity_test,
    mixedness_independent, mpartite_independence, truncated_poisson_mean, CollectionOracle,
    CqqState, Setting, StateSource, TesterConfig, TesterError, Verdict, WeightedCollection,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tester(#[from] TesterError),
    #[error(transparent)]
    State(#[from] QStateError),
    #[error("config file: {0}")]
    Config(String),
    #[error("calibration failed: {0}")]
    CalibrationFailed(String),
    #[error("output: {0}")]
    Output(String),
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Output(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TesterId {
    Identity,
    Mixedness,
    Independence,
    CollectionIdentity,
    CollectionIndependence,
    CollectionIdentityIndependence,
    Condindep,
}

impl TesterId {
    pub const ALL: [TesterId; 7] = [
        TesterId::Identity,
        TesterId::Mixedness,
        TesterId::Independence,
        TesterId::CollectionIdentity,
        TesterId::CollectionIndependence,
        TesterId::CollectionIdentityIndependence,
        TesterId::Condindep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TesterId::Identity => "identity",
            TesterId::Mixedness => "mixedness",
            TesterId::Independence => "independence",
            TesterId::CollectionIdentity => "collection-identity",
            TesterId::CollectionIndependence => "collection-independence",
            TesterId::CollectionIdentityIndependence => "collection-identity-independence",
            TesterId::Condindep => "condindep",
        }
    }

    /// Collections and conditional independence calibrate L; the rest C.
    pub fn tunes_l(self) -> bool {
        matches!(
            self,
            TesterId::CollectionIdentity
                | TesterId::CollectionIndependence
                | TesterId::CollectionIdentityIndependence
                | TesterId::Condindep
        )
    }
}

impl std::fmt::Display for TesterId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TesterId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TesterId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown tester {s:?}"))
    }
}

/// Shipped constants, found with [`calibrate`] and then doubled for margin.
pub fn default_config(tester: TesterId, setting: Setting) -> TesterConfig {
    let base = TesterConfig::default();
    match (tester, setting) {
        (TesterId::Condindep, Setting::Collective) => TesterConfig { l: 128.0, ..base },
        (TesterId::Condindep, _) => TesterConfig { l: 512.0, ..base },
        (TesterId::CollectionIdentityIndependence, _) => TesterConfig { l: 4.0, ..base },
        (t, _) if t.tunes_l() => TesterConfig { l: 2.0, ..base },
        _ => base,
    }
}

// ---------------------------------------------------------------------------
// fixtures

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceKind {
    Yes,
    No,
}

impl InstanceKind {
    pub fn name(self) -> &'static str {
        match self {
            InstanceKind::Yes => "yes",
            InstanceKind::No => "no",
        }
    }

    fn expected(self) -> Answer {
        match self {
            InstanceKind::Yes => Answer::Yes,
            InstanceKind::No => Answer::No,
        }
    }
}

/// States and weights of a collection; the oracle is rebuilt per trial.
#[derive(Debug, Clone, PartialEq)]
pub struct CollectionSpec {
    pub states: Vec<DensityMatrix>,
    pub weights: Vec<f64>,
    pub layout: SystemLayout,
}

impl CollectionSpec {
    pub fn weighted(&self) -> Result<WeightedCollection, TesterError> {
        let oracle = CollectionOracle::new(self.states.clone(), self.layout.clone())?;
        let s: f64 = self.weights.iter().sum();
        WeightedCollection::new(oracle, self.weights.clone(), s.min(1.0), s.max(1.0))
    }

    /// Σ c_i ‖ρ_i − σ‖₁ minimised over σ among the collection's own states.
    pub fn identity_gap(&self) -> Result<f64, QStateError> {
        let mut best = f64::INFINITY;
        for s in &self.states {
            let mut t = 0.0;
            for (r, c) in self.states.iter().zip(&self.weights) {
                t += c * l1_distance(r, s)?;
            }
            best = best.min(t);
        }
        Ok(best)
    }

    /// Σ c_i ‖ρ_i − ⊗ marginals‖₁.
    pub fn independence_gap(&self) -> Result<f64, QStateError> {
        let mut t = 0.0;
        for (r, c) in self.states.iter().zip(&self.weights) {
            t += c * distance_to_product(r, &self.layout)?.l1;
        }
        Ok(t)
    }
}

#[derive(Debug, Clone)]
pub enum Fixture {
    States { pair: StatePair, layout: SystemLayout },
    Collection { yes: CollectionSpec, no: CollectionSpec, planted_distance: f64 },
    Cqq { yes: CqqState, no: CqqState, planted_distance: f64 },
}

impl Fixture {
    pub fn planted_distance(&self) -> f64 {
        match self {
            Fixture::States { pair, .. } => pair.planted_distance,
            Fixture::Collection { planted_distance, .. } | Fixture::Cqq { planted_distance, .. } => {
                *planted_distance
            }
        }
    }
}

/// Plants a state at distance 2ε along a→b, or at b if 2ε is out of reach
/// but b is still farther than ε.
fn plant<F>(
    a: &DensityMatrix,
    b: &DensityMatrix,
    target: f64,
    floor: f64,
    distance: F,
) -> Result<(DensityMatrix, f64), QStateError>
where
    F: Fn(&DensityMatrix) -> Result<f64, QStateError>,
{
    match bisect_mixing(a, b, target, &distance) {
        Ok((_, s, d)) => Ok((s, d)),
        Err(QStateError::UnreachableDistance { max, .. }) if max > floor => Ok((b.clone(), max)),
        Err(e) => Err(e),
    }
}

/// Σ_{j<k} |j…j⟩/√k with k the smallest local dimension.
fn ghz(layout: &SystemLayout) -> Result<DensityMatrix, QStateError> {
    let k = *layout.dims().iter().min().expect("nonempty layout");
    let mut psi = vec![Complex64::new(0.0, 0.0); layout.total_dim()];
    for j in 0..k {
        psi[layout.flat_index(&vec![j; layout.parties()])] = Complex64::new(1.0, 0.0);
    }
    DensityMatrix::pure(&psi)
}

fn random_product<R: Rng + ?Sized>(layout: &SystemLayout, rng: &mut R) -> Result<DensityMatrix, QStateError> {
    let parts = layout
        .dims()
        .iter()
        .map(|&d| random_mixed(d, d, rng))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(tensor_all(&parts))
}

/// Random full-rank state and a partner at ℓ1 distance 2ε (or the fallback).
fn identity_pair<R: Rng + ?Sized>(
    d: usize,
    eps: f64,
    rng: &mut R,
) -> Result<(DensityMatrix, DensityMatrix, f64), QStateError> {
    let rho = random_mixed(d, d, rng)?;
    // the least-populated basis state is at distance ≥ 2(1 − 1/d)
    let k = (0..d)
        .min_by(|&i, &j| rho.matrix()[(i, i)].re.total_cmp(&rho.matrix()[(j, j)].re))
        .expect("d ≥ 1");
    let target = DensityMatrix::basis_state(d, k);
    let (sigma, dist) = plant(&rho, &target, 2.0 * eps, eps, |s| l1_distance(&rho, s))?;
    Ok((rho, sigma, dist))
}

fn entangled_near<R: Rng + ?Sized>(
    layout: &SystemLayout,
    target: f64,
    floor: f64,
    _rng: &mut R,
) -> Result<(DensityMatrix, f64), QStateError> {
    let mixed = DensityMatrix::maximally_mixed(layout.total_dim());
    plant(&mixed, &ghz(layout)?, target, floor, |s| Ok(distance_to_product(s, layout)?.l1))
}

/// Yes- and no-instances for `tester` at distance parameter `eps`.
///
/// `n` is the collection size or the number of classical labels.
pub fn make_fixture<R: Rng + ?Sized>(
    tester: TesterId,
    layout: &SystemLayout,
    n: usize,
    eps: f64,
    rng: &mut R,
) -> Result<Fixture, HarnessError> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(HarnessError::BadSpec(format!("epsilon must lie in (0, 1], got {eps}")));
    }
    let d = layout.total_dim();
    let uniform = |k: usize| vec![1.0 / k as f64; k];
    Ok(match tester {
        TesterId::Identity => {
            let (rho, sigma, dist) = identity_pair(d, eps, rng)?;
            Fixture::States {
                pair: StatePair {
                    yes_instance: Instance::Pair(rho.clone(), rho.clone()),
                    no_instance: Instance::Pair(rho, sigma),
                    planted_distance: dist,
                },
                layout: layout.clone(),
            }
        }
        TesterId::Mixedness => {
            let mixed = DensityMatrix::maximally_mixed(d);
            let (no, dist) =
                plant(&mixed, &DensityMatrix::basis_state(d, 0), 2.0 * eps, eps, |s| {
                    l1_distance(&mixed, s)
                })?;
            Fixture::States {
                pair: StatePair {
                    yes_instance: Instance::Single(mixed.clone()),
                    no_instance: Instance::Single(no),
                    planted_distance: dist,
                },
                layout: layout.clone(),
            }
        }
        TesterId::Independence => {
            need_parties(layout, 2)?;
            let yes = random_product(layout, rng)?;
            let (no, dist) = entangled_near(layout, 2.0 * eps, eps, rng)?;
            Fixture::States {
                pair: StatePair {
                    yes_instance: Instance::Single(yes),
                    no_instance: Instance::Single(no),
                    planted_distance: dist,
                },
                layout: layout.clone(),
            }
        }
        TesterId::CollectionIdentity => {
            need_size(n, 2)?;
            let (rho, sigma, _) = identity_pair(d, eps, rng)?;
            let yes = CollectionSpec { states: vec![rho.clone(); n], weights: uniform(n), layout: layout.clone() };
            let mut states = vec![rho; n];
            for s in states.iter_mut().skip(n / 2) {
                *s = sigma.clone();
            }
            let no = CollectionSpec { states, weights: uniform(n), layout: layout.clone() };
            let planted_distance = no.identity_gap()?;
            Fixture::Collection { yes, no, planted_distance }
        }
        TesterId::CollectionIndependence => {
            need_size(n, 2)?;
            need_parties(layout, 2)?;
            let products =
                (0..n).map(|_| random_product(layout, rng)).collect::<Result<Vec<_>, _>>()?;
            let yes = CollectionSpec { states: products.clone(), weights: uniform(n), layout: layout.clone() };
            // half the weight on one entangled state, the rest spread evenly
            let (ent, _) = entangled_near(layout, 4.0 * eps, 2.0 * eps, rng)?;
            let mut states = products;
            states[0] = ent;
            let mut weights = vec![0.5 / (n - 1) as f64; n];
            weights[0] = 0.5;
            let no = CollectionSpec { states, weights, layout: layout.clone() };
            let planted_distance = no.independence_gap()?;
            if planted_distance <= eps {
                return Err(QStateError::UnreachableDistance { target: 2.0 * eps, max: planted_distance }.into());
            }
            Fixture::Collection { yes, no, planted_distance }
        }
        TesterId::CollectionIdentityIndependence => {
            need_size(n, 2)?;
            need_parties(layout, 2)?;
            let prod = random_product(layout, rng)?;
            let yes = CollectionSpec { states: vec![prod; n], weights: uniform(n), layout: layout.clone() };
            let (ent, dist) = entangled_near(layout, 2.0 * eps, eps, rng)?;
            let no = CollectionSpec { states: vec![ent; n], weights: uniform(n), layout: layout.clone() };
            Fixture::Collection { yes, no, planted_distance: dist }
        }
        TesterId::Condindep => {
            need_size(n, 1)?;
            if layout.parties() != 2 {
                return Err(HarnessError::BadSpec("condindep needs a bipartite layout".into()));
            }
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
            let blocks = (0..n).map(|_| random_product(layout, rng)).collect::<Result<Vec<_>, _>>()?;
            let yes = CqqState::new(p, blocks, layout.clone())?;
            let no = CqqState::new(uniform(n), vec![ghz(layout)?; n], layout.clone())?;
            // the witness 2|Φ⟩⟨Φ| − I certifies distance ≥ Σ p_c = 1 to every
            // conditionally independent state
            let witnessed = 1.0;
            if witnessed <= eps {
                return Err(QStateError::UnreachableDistance { target: 2.0 * eps, max: witnessed }.into());
            }
            Fixture::Cqq { yes, no, planted_distance: witnessed }
        }
    })
}

fn need_parties(layout: &SystemLayout, m: usize) -> Result<(), HarnessError> {
    if layout.parties() < m {
        return Err(HarnessError::BadSpec(format!("layout {layout} needs at least {m} parties")));
    }
    Ok(())
}

fn need_size(n: usize, min: usize) -> Result<(), HarnessError> {
    if n < min {
        return Err(HarnessError::BadSpec(format!("collection size {n} below {min}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// experiments

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub tester: TesterId,
    pub setting: Setting,
    pub layout: Vec<usize>,
    pub epsilons: Vec<f64>,
    pub trials: u64,
    pub seed: u64,
    /// Collection size or number of classical labels.
    pub n: usize,
    pub config: TesterConfig,
}

impl ExperimentSpec {
    pub fn new(tester: TesterId, setting: Setting, layout: Vec<usize>, epsilons: Vec<f64>) -> Self {
        ExperimentSpec {
            tester,
            setting,
            layout,
            epsilons,
            trials: 400,
            seed: 1,
            n: 8,
            config: default_config(tester, setting),
        }
    }

    pub fn validate(&self) -> Result<SystemLayout, HarnessError> {
        if self.epsilons.is_empty() {
            return Err(HarnessError::BadSpec("epsilon grid is empty".into()));
        }
        if self.trials == 0 {
            return Err(HarnessError::BadSpec("trials must be positive".into()));
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
            return Err(HarnessError::BadSpec(format!("epsilon must lie in (0, 1], got {e}")));
        }
        self.config.validate()?;
        let layout = SystemLayout::new(self.layout.clone())?;
        match (self.tester, self.setting) {
            (TesterId::Mixedness, s) if s != Setting::Independent => {
                return Err(HarnessError::BadSpec("mixedness runs in the independent setting only".into()))
            }
            (TesterId::Condindep, Setting::Local | Setting::Swap) => {
                return Err(HarnessError::BadSpec(
                    "condindep runs in the independent or collective setting".into(),
                ))
            }
            _ => {}
        }
        Ok(layout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u64,
    pub instance: InstanceKind,
    pub answer: Answer,
    pub statistic: f64,
    pub threshold: f64,
    pub copies_used: u64,
    pub budget: u64,
    pub wall_micros: u64,
}

impl TrialRecord {
    pub fn correct(&self) -> bool {
        self.answer == self.instance.expected()
    }
}

/// How trials are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// rayon when the `parallel` feature is on, sequential otherwise
    Parallel,
}

fn check_counters(v: &Verdict, counted: u64) -> Result<(), HarnessError> {
    if v.copies_used != counted {
        return Err(HarnessError::BadSpec(format!(
            "copy accounting broke: verdict {} vs counters {counted}",
            v.copies_used
        )));
    }
    Ok(())
}

/// One trial of `tester` on the yes- or no-instance of `fixture`.
pub fn run_trial(
    tester: TesterId,
    setting: Setting,
    cfg: &TesterConfig,
    fixture: &Fixture,
    eps: f64,
    kind: InstanceKind,
    rng: &mut RngStream,
) -> Result<Verdict, HarnessError> {
    let v = match fixture {
        Fixture::States { pair, layout } => {
            let inst = match kind {
                InstanceKind::Yes => &pair.yes_instance,
                InstanceKind::No => &pair.no_instance,
            };
            match (tester, inst) {
                (TesterId::Identity, Instance::Pair(a, b)) => {
                    let a = StateSource::new(a.clone(), layout.clone())?;
                    let b = StateSource::new(b.clone(), layout.clone())?;
                    let v = identity_test(&a, &b, eps, setting, cfg, rng)?;
                    check_counters(&v, a.copies() + b.copies())?;
                    v
                }
                (TesterId::Mixedness, Instance::Single(s)) => {
                    let a = StateSource::new(s.clone(), layout.clone())?;
                    let v = mixedness_independent(&a, eps, cfg, rng)?;
                    check_counters(&v, a.copies())?;
                    v
                }
                (TesterId::Independence, Instance::Single(s)) => {
                    let a = StateSource::new(s.clone(), layout.clone())?;
                    let v = mpartite_independence(&a, eps, setting, cfg, rng)?;
                    check_counters(&v, a.copies())?;
                    v
                }
                _ => return Err(HarnessError::BadSpec(format!("fixture does not fit {tester}"))),
            }
        }
        Fixture::Collection { yes, no, .. } => {
            let spec = if kind == InstanceKind::Yes { yes } else { no };
            let wc = spec.weighted()?;
            let v = match tester {
                TesterId::CollectionIdentity => collection_identity(&wc, eps, setting, cfg, rng)?,
                TesterId::CollectionIndependence => collection_independence(&wc, eps, setting, cfg, rng)?,
                TesterId::CollectionIdentityIndependence => {
                    collection_identity_independence(&wc, eps, setting, cfg, rng)?
                }
                _ => return Err(HarnessError::BadSpec(format!("fixture does not fit {tester}"))),
            };
            check_counters(&v, wc.oracle.total_copies())?;
            v
        }
        Fixture::Cqq { yes, no, .. } => {
            let cqq = if kind == InstanceKind::Yes { yes } else { no };
            match setting {
                Setting::Collective => cond_indep_collective(cqq, eps, cfg, rng)?,
                Setting::Independent => cond_indep_independent(cqq, eps, cfg, rng)?,
                s => return Err(TesterError::Unsupported { tester: "condindep", setting: s }.into()),
            }
        }
    };
    Ok(v)
}

fn trial_stream(seed: u64, point: usize, trial: u64, kind: InstanceKind) -> RngStream {
    RngStream::new(seed, trial, role_tag(&format!("{}/{point}", kind.name())))
}

/// Runs `trials` trials of each kind; records come back in (kind, trial) order.
pub fn run_trials(
    spec: &ExperimentSpec,
    fixture: &Fixture,
    point: usize,
    eps: f64,
    exec: Exec,
) -> Result<Vec<TrialRecord>, HarnessError> {
    let jobs: Vec<(InstanceKind, u64)> = [InstanceKind::Yes, InstanceKind::No]
        .into_iter()
        .flat_map(|k| (0..spec.trials).map(move |t| (k, t)))
        .collect();
    let one = |&(kind, trial): &(InstanceKind, u64)| -> Result<TrialRecord, HarnessError> {
        let start = Instant::now();
        let mut rng = trial_stream(spec.seed, point, trial, kind);
        let v = run_trial(spec.tester, spec.setting, &spec.config, fixture, eps, kind, &mut rng)?;
        Ok(TrialRecord {
            trial,
            instance: kind,
            answer: v.answer,
            statistic: v.statistic,
            threshold: v.threshold,
            copies_used: v.copies_used,
            budget: v.budget,
            wall_micros: start.elapsed().as_micros() as u64,
        })
    };
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            jobs.par_iter().map(one).collect()
        }
        _ => jobs.iter().map(one).collect(),
    }
}

/// Wilson score interval lower bound at 95%.
pub fn wilson_lower(successes: u64, n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let z = 1.959_963_984_540_054_f64;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let centre = p + z2 / (2.0 * nf);
    let spread = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    ((centre - spread) / (1.0 + z2 / nf)).max(0.0)
}

/// One row of a sweep. `wilson_lo` is the smaller of the yes- and no-rate bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointReport {
    pub tester: String,
    pub setting: String,
    pub dims: String,
    pub epsilon: f64,
    pub trials: u64,
    pub yes_rate: f64,
    pub no_rate: f64,
    pub wilson_lo: f64,
    pub mean_copies: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointDetail {
    pub row: PointReport,
    pub planted_distance: f64,
    pub yes_wilson_lo: f64,
    pub no_wilson_lo: f64,
    pub budget: u64,
    pub max_copies: u64,
    pub records: Vec<TrialRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub points: Vec<PointDetail>,
}

impl Report {
    pub fn rows(&self) -> Vec<&PointReport> {
        self.points.iter().map(|p| &p.row).collect()
    }
}

fn summarize(spec: &ExperimentSpec, layout: &SystemLayout, eps: f64, planted: f64, records: Vec<TrialRecord>) -> PointDetail {
    let count = |k: InstanceKind| {
        let of_kind: Vec<_> = records.iter().filter(|r| r.instance == k).collect();
        (of_kind.iter().filter(|r| r.correct()).count() as u64, of_kind.len() as u64)
    };
    let (ys, yn) = count(InstanceKind::Yes);
    let (ns, nn) = count(InstanceKind::No);
    let yes_lo = wilson_lower(ys, yn);
    let no_lo = wilson_lower(ns, nn);
    let mean_copies = records.iter().map(|r| r.copies_used as f64).sum::<f64>() / records.len() as f64;
    PointDetail {
        row: PointReport {
            tester: spec.tester.name().into(),
            setting: spec.setting.name().into(),
            dims: layout.to_string(),
            epsilon: eps,
            trials: spec.trials,
            yes_rate: ys as f64 / yn as f64,
            no_rate: ns as f64 / nn as f64,
            wilson_lo: yes_lo.min(no_lo),
            mean_copies,
            seed: spec.seed,
        },
        planted_distance: planted,
        yes_wilson_lo: yes_lo,
        no_wilson_lo: no_lo,
        budget: records.iter().map(|r| r.budget).max().unwrap_or(0),
        max_copies: records.iter().map(|r| r.copies_used).max().unwrap_or(0),
        records,
    }
}

/// Fixture for grid point `point`, drawn from its own stream.
pub fn point_fixture(spec: &ExperimentSpec, layout: &SystemLayout, point: usize) -> Result<Fixture, HarnessError> {
    let mut rng = RngStream::new(spec.seed, point as u64, role_tag("fixture"));
    make_fixture(spec.tester, layout, spec.n, spec.epsilons[point], &mut rng)
}

pub fn run_experiment_with(spec: &ExperimentSpec, exec: Exec) -> Result<Report, HarnessError> {
    let layout = spec.validate()?;
    let mut points = Vec::with_capacity(spec.epsilons.len());
    for (i, &eps) in spec.epsilons.iter().enumerate() {
        let fixture = point_fixture(spec, &layout, i)?;
        let records = run_trials(spec, &fixture, i, eps, exec)?;
        points.push(summarize(spec, &layout, eps, fixture.planted_distance(), records));
    }
    Ok(Report { points })
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<Report, HarnessError> {
    run_experiment_with(spec, Exec::Parallel)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(format!("unknown format {s:?}")),
        }
    }
}

pub fn write_csv<W: Write>(rows: &[&PointReport], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the report; JSON carries per-trial records, CSV one row per point.
pub fn emit<W: Write>(report: &Report, format: Format, mut out: W) -> Result<(), HarnessError> {
    match format {
        Format::Csv => write_csv(&report.rows(), out),
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, report).map_err(|e| HarnessError::Output(e.to_string()))?;
            writeln!(out)?;
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// config files

/// Constants that a config file or flag may override.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_swap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rep_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mpartite_reps: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<CollectiveOracleParams>,
}

impl ConstantOverrides {
    pub fn apply(&self, cfg: &mut TesterConfig) {
        if let Some(v) = self.c {
            cfg.c = v;
        }
        if let Some(v) = self.l {
            cfg.l = v;
        }
        if let Some(v) = self.c_swap {
            cfg.c_swap = v;
        }
        if let Some(v) = self.rep_c {
            cfg.rep_c = v;
        }
        if let Some(v) = self.mpartite_reps {
            cfg.mpartite_reps = v;
        }
        if let Some(v) = self.oracle {
            cfg.oracle = v;
        }
    }
}

/// TOML config:
///
/// ```toml
/// trials = 400
/// seed = 7
///
/// [constants]          # every tester
/// c = 4.0
///
/// [testers.condindep]  # one tester, wins over [constants]
/// l = 300.0
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<ConstantOverrides>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub testers: BTreeMap<String, ConstantOverrides>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let cf: ConfigFile = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        if let Some(bad) = cf.testers.keys().find(|k| k.parse::<TesterId>().is_err()) {
            return Err(HarnessError::Config(format!("unknown tester section {bad:?}")));
        }
        Ok(cf)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain data serializes")
    }

    /// Built-in defaults, then `[constants]`, then `[testers.<id>]`.
    pub fn resolve(&self, tester: TesterId, setting: Setting) -> TesterConfig {
        let mut cfg = default_config(tester, setting);
        if let Some(c) = &self.constants {
            c.apply(&mut cfg);
        }
        if let Some(c) = self.testers.get(tester.name()) {
            c.apply(&mut cfg);
        }
        cfg
    }
}

// ---------------------------------------------------------------------------
// calibration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tester: TesterId,
    pub setting: Setting,
    /// "C" or "L"
    pub constant: String,
    pub value: f64,
    /// worst yes/no success rate over the grid at `value`
    pub worst_rate: f64,
    pub config: TesterConfig,
}

impl Calibration {
    /// The `[testers.<id>]` section of a defaults file.
    pub fn overrides(&self) -> ConstantOverrides {
        if self.constant == "L" {
            ConstantOverrides { l: Some(self.value), ..Default::default() }
        } else {
            ConstantOverrides { c: Some(self.value), ..Default::default() }
        }
    }
}

/// Smallest constant on a doubling ladder from `start` (at most `steps`
/// rungs) for which every grid point has yes- and no-rates of at least 2/3.
pub fn calibrate(
    base: &ExperimentSpec,
    start: f64,
    steps: u32,
) -> Result<Calibration, HarnessError> {
    base.validate()?;
    let tunes_l = base.tester.tunes_l();
    let mut value = start;
    let mut last_worst = 0.0;
    for _ in 0..steps {
        let mut spec = base.clone();
        if tunes_l {
            spec.config.l = value;
        } else {
            spec.config.c = value;
        }
        let report = run_experiment(&spec)?;
        let worst = report
            .rows()
            .iter()
            .map(|r| r.yes_rate.min(r.no_rate))
            .fold(f64::INFINITY, f64::min);
        if worst >= 2.0 / 3.0 {
            return Ok(Calibration {
                tester: base.tester,
                setting: base.setting,
                constant: if tunes_l { "L" } else { "C" }.into(),
                value,
                worst_rate: worst,
                config: spec.config,
            });
        }
        last_worst = worst;
        value *= 2.0;
    }
    Err(HarnessError::CalibrationFailed(format!(
        "{} ({}) still at worst rate {last_worst:.3} after {steps} doublings from {start}",
        base.tester, base.setting
    )))
}

// ---------------------------------------------------------------------------
// self-test

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name: name.into(), passed, detail }
}

/// Unbiasedness and completeness checks on the MUB family of dimension 2^k.
pub fn mub_checks(k: u32) -> Vec<CheckResult> {
    let d = 1usize << k;
    let mut out = Vec::new();
    match mub_family(d) {
        Ok(fam) => {
            let rep = fam.verify();
            out.push(check(
                &format!("mub d={d}"),
                rep.passes(),
                format!(
                    "unbiasedness {:.2e}, orthonormality {:.2e}, completeness {:.2e}",
                    rep.max_unbiasedness_deviation,
                    rep.max_orthonormality_deviation,
                    rep.completeness_residual
                ),
            ));
            // a corrupted phase must be caught
            let bad = build_mub_family(d).map(|f| f.with_corrupted_phase(1, 0, d - 1, 0.3));
            let caught = bad.map(|f| !f.verify().passes()).unwrap_or(false);
            out.push(check(&format!("mub d={d} fault injection"), caught, "corrupted phase detected".into()));
        }
        Err(e) => out.push(check(&format!("mub d={d}"), false, e.to_string())),
    }
    out
}

fn isometry_check(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst: f64 = 0.0;
    for d in [2usize, 4, 8] {
        for _ in 0..20 {
            let (Ok(a), Ok(b)) = (random_mixed(d, 2.min(d), rng), random_pure(d, rng)) else {
                return check("isometry", false, "state generation failed".into());
            };
            let (Ok(p), Ok(q), Ok(dist)) = (single_image(&a), single_image(&b), l2_distance(&a, &b)) else {
                return check("isometry", false, "channel failed".into());
            };
            worst = worst.max(((d as f64 + 1.0) * l2_diff(&p, &q) - dist).abs());
            let bound = 2f64.sqrt() / (d as f64 + 1.0);
            worst = worst.max((l2_norm(&q) - bound).abs());
        }
    }
    check("isometry", worst <= 1e-8, format!("max deviation {worst:.2e}"))
}

fn local_check(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst: f64 = 0.0;
    for dims in [vec![2, 2], vec![2, 4]] {
        let layout = SystemLayout::new(dims.clone()).expect("valid dims");
        let Ok(povm) = LocalMubPovm::new(&layout) else {
            return check("local channel", false, "povm failed".into());
        };
        for _ in 0..20 {
            let Ok(s) = random_mixed(layout.total_dim(), 2, rng) else {
                return check("local channel", false, "state generation failed".into());
            };
            let (Ok(p), Ok(r1), Ok(r2)) = (povm.image(&s), partial_trace(&s, &layout, &[0]), partial_trace(&s, &layout, &[1])) else {
                return check("local channel", false, "channel failed".into());
            };
            let prod = crate::mub::outer(&povm.marginal(&p, &[0]), &povm.marginal(&p, &[1]));
            let lhs = povm.scale() * l2_diff(&p, &prod);
            let rhs = l2_distance(&s, &tensor(&r1, &r2)).unwrap_or(f64::NAN);
            worst = worst.max((lhs - rhs).abs());
        }
    }
    check("local channel", worst <= 1e-8, format!("max deviation {worst:.2e}"))
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Each estimator's Monte Carlo mean against its exact mean, within `z` SEs.
pub fn estimator_checks(reps: usize, z: f64, seed: u64) -> Vec<CheckResult> {
    let mut rng = RngStream::new(seed, 0, role_tag("estimators"));
    let mut out = Vec::new();
    let mut push = |name: &str, v: Vec<f64>, exact: f64| {
        let (m, se) = mean_se(&v);
        let ok = (m - exact).abs() <= z * se.max(1e-12);
        out.push(check(name, ok, format!("mean {m:.5} exact {exact:.5} se {se:.1e}")));
    };
    let p = [0.4, 0.3, 0.2, 0.1];
    let q = [0.25, 0.25, 0.25, 0.25];
    let m = 20.0;
    let v = (0..reps)
        .map(|_| {
            let x = poissonized_counts(&p, m, &mut rng).expect("valid p");
            let y = poissonized_counts(&q, m, &mut rng).expect("valid q");
            cdvv_statistic(&x, &y).expect("same support")
        })
        .collect();
    push("cdvv", v, m * m * exact_l2(&p, &q).expect("same support"));

    let joint = [0.4, 0.1, 0.15, 0.35];
    let v = (0..reps)
        .map(|_| {
            let c = sample_counts(&joint, 12, &mut rng).expect("valid joint");
            let pairs = c
                .tallies
                .iter()
                .enumerate()
                .flat_map(|(i, &k)| std::iter::repeat_n((i / 2, i % 2), k as usize))
                .collect();
            independence_l2_ustat(&BivariateSamples::new(pairs, 2, 2).expect("in support")).expect("n ≥ 4")
        })
        .collect();
    push("independence ustat", v, exact_independence_l2(&joint, 2, 2).expect("2x2"));

    let layout = SystemLayout::new(vec![2, 2]).expect("valid");
    let state = crate::qstate::interpolate_toward(
        &DensityMatrix::maximally_mixed(4),
        &DensityMatrix::maximally_entangled(2),
        0.7,
    )
    .expect("valid lambda");
    let exact = swap_difference(&state, &layout).expect("bipartite");
    let v = (0..reps)
        .map(|_| swap_batch_estimate(&state, &layout, 40, &mut rng).expect("enough copies"))
        .collect();
    push("swap batch", v, exact);

    let params = CollectiveOracleParams::default();
    let v = (0..reps)
        .map(|_| collective_independence_oracle(&state, &layout, 40, &mut rng, &params).expect("valid"))
        .collect();
    push("collective independence oracle", v, exact);

    let sigma = DensityMatrix::maximally_mixed(4);
    let exact = l2_distance(&state, &sigma).expect("same dims").powi(2);
    let v = (0..reps)
        .map(|_| collective_l2_identity_oracle(&state, &sigma, 40, &mut rng, &params).expect("valid"))
        .collect();
    push("collective identity oracle", v, exact);
    out
}

/// Appendix bound, Poisson-truncation constant and the ξ hand value.
pub fn appendix_checks() -> Vec<CheckResult> {
    let mut worst = f64::INFINITY;
    for i in 0..200 {
        let x = 10f64.powf(-3.0 + 5.0 * i as f64 / 199.0);
        let f = truncated_poisson_mean(x).unwrap_or(f64::NAN);
        worst = worst.min(f - gamma() * x.min(x.powi(4)));
    }
    let xi = condindep_xi(1000.0, 0.5, 2, 2, 4);
    let grid: Vec<f64> = (0..400).map(|i| 0.01 * 5000f64.powf(i as f64 / 399.0)).collect();
    let r = crate::testers::poisson_truncation_constant(&grid).unwrap_or(f64::NAN);
    vec![
        check("f(x) ≥ γ·min(x, x⁴)", worst >= -1e-12, format!("min margin {worst:.2e}")),
        check("xi hand value", (xi - 0.6273).abs() < 1e-4, format!("xi = {xi:.6}")),
        check("poisson truncation", r.is_finite() && r < 4.22, format!("R = {r:.5}")),
    ]
}

/// Every check suite; `mub_k` restricts the MUB suite to one dimension.
pub fn selftest(mub_k: Option<u32>) -> Vec<CheckResult> {
    let mut out = Vec::new();
    match mub_k {
        Some(k) => return mub_checks(k),
        None => {
            for k in 1..=4 {
                out.extend(mub_checks(k));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    out.push(isometry_check(&mut rng));
    out.push(local_check(&mut rng));
    out.extend(estimator_checks(4000, 4.0, 17));
    out.extend(appendix_checks());
    let povm_residual = mub_family(2).map(|f| MubPovm::new(f).completeness_residual());
    out.push(check(
        "povm completeness d=2",
        matches!(povm_residual, Ok(r) if r <= 1e-9),
        format!("{povm_residual:?}"),
    ));
    out
}

//! Yes/No property testers.
//!
//! Every tester draws copies through a [`StateSource`], which owns a copy
//! counter. A [`Verdict`] reports both the copies actually drawn and the
//! closed-form `budget` a run that never exits early would consume.

use std::cell::{Cell, OnceCell};
use std::rc::Rc;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classical::{
    closeness_budget, closeness_from_counts, ustat_from_table, Answer, ClassicalError,
};
use crate::mub::{single_image, LocalMubPovm, MubError};
use crate::qstate::{
    partial_trace, product_of_marginals, tensor, DensityMatrix, QStateError,
    SystemLayout, VALIDATION_TOL,
};
use crate::sampling::{
    collective_independence_oracle, collective_l2_identity_oracle, multinomial_counts,
    poissonize, poissonized_counts, CollectiveOracleParams, SamplingError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TesterError {
    #[error(transparent)]
    State(#[from] QStateError),
    #[error(transparent)]
    Mub(#[from] MubError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Classical(#[from] ClassicalError),
    #[error("distance parameter must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("bad weights: {0}")]
    BadWeights(String),
    #[error("bad tester constants: {0}")]
    BadConfig(String),
    #[error("input must be non-negative, got {0}")]
    NegativeInput(f64),
    #[error("setting {setting} is not available for {tester}")]
    Unsupported { tester: &'static str, setting: Setting },
}

/// Measurement model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Independent,
    Collective,
    Local,
    Swap,
}

impl Setting {
    pub const ALL: [Setting; 4] =
        [Setting::Independent, Setting::Collective, Setting::Local, Setting::Swap];

    pub fn name(self) -> &'static str {
        match self {
            Setting::Independent => "independent",
            Setting::Collective => "collective",
            Setting::Local => "local",
            Setting::Swap => "swap",
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Setting::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown setting {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub answer: Answer,
    pub statistic: f64,
    pub threshold: f64,
    pub copies_used: u64,
    /// Copies a full run consumes; the Poisson mean where sizes are Poissonized.
    pub budget: u64,
    pub setting: Setting,
}

/// Constants of the testers. `c` scales every single-shot budget, `l` the
/// outer loops of the collection and conditional-independence testers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TesterConfig {
    pub c: f64,
    pub l: f64,
    pub c_swap: f64,
    /// Majority votes use ⌈rep_c·(k ln 6 + 2 ln L)⌉ repetitions at level k.
    pub rep_c: f64,
    pub mpartite_reps: u32,
    pub oracle: CollectiveOracleParams,
}

impl Default for TesterConfig {
    fn default() -> Self {
        TesterConfig {
            c: 4.0,
            l: 2.0,
            c_swap: 200.0,
            rep_c: 4.0,
            mpartite_reps: 40,
            oracle: CollectiveOracleParams::default(),
        }
    }
}

impl TesterConfig {
    pub fn validate(&self) -> Result<(), TesterError> {
        for (name, v) in [("C", self.c), ("L", self.l), ("c_swap", self.c_swap), ("rep_c", self.rep_c)]
        {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TesterError::BadConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.mpartite_reps == 0 {
            return Err(TesterError::BadConfig("mpartite_reps must be at least 1".into()));
        }
        self.oracle.validate()?;
        Ok(())
    }
}

fn check_eps(eps: f64) -> Result<(), TesterError> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(TesterError::BadEpsilon(eps))
    }
}

fn padded(d: usize) -> usize {
    d.next_power_of_two()
}

/// Copies of one state, drawn against a shared counter.
///
/// `cost` is how many copies of the underlying physical state one draw
/// consumes: a copy of ρ₁⊗ρ₂ built from marginals costs two copies of ρ.
#[derive(Debug, Clone)]
pub struct StateSource {
    state: Rc<DensityMatrix>,
    layout: SystemLayout,
    counter: Rc<Cell<u64>>,
    cost: u64,
    single: Rc<OnceCell<Vec<f64>>>,
    local: Rc<OnceCell<Vec<f64>>>,
}

impl StateSource {
    pub fn new(state: DensityMatrix, layout: SystemLayout) -> Result<Self, TesterError> {
        layout.check(&state)?;
        Ok(StateSource {
            state: Rc::new(state),
            layout,
            counter: Rc::new(Cell::new(0)),
            cost: 1,
            single: Rc::default(),
            local: Rc::default(),
        })
    }

    pub fn single(state: DensityMatrix) -> Result<Self, TesterError> {
        let layout = SystemLayout::single(state.dim())?;
        Self::new(state, layout)
    }

    fn derived(&self, state: DensityMatrix, layout: SystemLayout, cost: u64) -> Self {
        StateSource {
            state: Rc::new(state),
            layout,
            counter: Rc::clone(&self.counter),
            cost,
            single: Rc::default(),
            local: Rc::default(),
        }
    }

    pub fn state(&self) -> &DensityMatrix {
        &self.state
    }

    pub fn layout(&self) -> &SystemLayout {
        &self.layout
    }

    pub fn cost(&self) -> u64 {
        self.cost
    }

    /// Copies drawn so far on this source's counter.
    pub fn copies(&self) -> u64 {
        self.counter.get()
    }

    pub fn shares_counter(&self, other: &StateSource) -> bool {
        Rc::ptr_eq(&self.counter, &other.counter)
    }

    fn debit(&self, draws: u64) {
        self.counter.set(self.counter.get() + draws * self.cost);
    }

    /// Product of the single-party marginals; one draw costs one copy per party.
    pub fn product_source(&self) -> Result<Self, TesterError> {
        let prod = product_of_marginals(&self.state, &self.layout)?;
        Ok(self.derived(prod, self.layout.clone(), self.cost * self.layout.parties() as u64))
    }

    /// Marginal on `keep`; one draw costs one copy.
    pub fn marginal(&self, keep: &[usize]) -> Result<Self, TesterError> {
        let state = partial_trace(&self.state, &self.layout, keep)?;
        let layout = self.layout.sub(keep)?;
        Ok(self.derived(state, layout, self.cost))
    }

    /// Same state under a coarser party grouping.
    pub fn regrouped(&self, layout: SystemLayout) -> Result<Self, TesterError> {
        layout.check(&self.state)?;
        let mut s = self.derived((*self.state).clone(), layout, self.cost);
        s.single = Rc::clone(&self.single);
        Ok(s)
    }

    /// Image under the MUB channel of the whole (padded) system.
    pub fn single_image(&self) -> Result<&[f64], TesterError> {
        if self.single.get().is_none() {
            let _ = self.single.set(single_image(&self.state)?);
        }
        Ok(self.single.get().expect("just set"))
    }

    /// Image under the local MUB channel of `layout`.
    pub fn local_image(&self) -> Result<&[f64], TesterError> {
        if self.local.get().is_none() {
            let _ = self.local.set(LocalMubPovm::new(&self.layout)?.image(&self.state)?);
        }
        Ok(self.local.get().expect("just set"))
    }
}

/// Counter snapshot over a set of sources; distinct counters are counted once.
struct Meter {
    start: Vec<(Rc<Cell<u64>>, u64)>,
}

impl Meter {
    fn new(sources: &[&StateSource]) -> Self {
        let mut start: Vec<(Rc<Cell<u64>>, u64)> = Vec::new();
        for s in sources {
            if !start.iter().any(|(c, _)| Rc::ptr_eq(c, &s.counter)) {
                start.push((Rc::clone(&s.counter), s.counter.get()));
            }
        }
        Meter { start }
    }

    fn used(&self) -> u64 {
        self.start.iter().map(|(c, v)| c.get() - v).sum()
    }
}

fn same_dims(a: &StateSource, b: &StateSource) -> Result<(), TesterError> {
    if a.state.dim() != b.state.dim() {
        return Err(QStateError::DimMismatch { left: a.state.dim(), right: b.state.dim() }.into());
    }
    Ok(())
}

fn closeness_on_images<R: Rng + ?Sized>(
    (rho, p): (&StateSource, &[f64]),
    (sigma, q): (&StateSource, &[f64]),
    eps_img: f64,
    b: f64,
    setting: Setting,
    cfg: &TesterConfig,
    rng: &mut R,
) -> Result<Verdict, TesterError> {
    let m = closeness_budget(eps_img, b, cfg.c)?;
    let meter = Meter::new(&[rho, sigma]);
    let x = poissonized_counts(p, m as f64, rng)?;
    rho.debit(x.total);
    let y = poissonized_counts(q, m as f64, rng)?;
    sigma.debit(y.total);
    let rep = closeness_from_counts(&x, &y, m, eps_img)?;
    Ok(Verdict {
        answer: rep.verdict,
        statistic: rep.statistic,
        threshold: rep.threshold,
        copies_used: meter.used(),
        budget: m * (rho.cost + sigma.cost),
        setting,
    })
}

// ---------------------------------------------------------------------------
// per-source budgets

fn l2_independent_m(d: usize, eps2: f64, cfg: &TesterConfig) -> Result<u64, TesterError> {
    let dp = padded(d) as f64;
    Ok(closeness_budget(eps2 / (dp + 1.0), 2f64.sqrt() / (dp + 1.0), cfg.c)?)
}

fn collective_n(d: usize, eps: f64, cfg: &TesterConfig) -> u64 {
    ((cfg.c * d as f64 / (eps * eps)).ceil() as u64).max(4)
}

fn swap_draws(eps2: f64, cfg: &TesterConfig) -> u64 {
    ((cfg.c_swap / eps2.powi(4)).ceil() as u64).max(1)
}

fn local_params(layout: &SystemLayout, eps: f64) -> (f64, f64) {
    let p = layout.padded();
    let dims = p.dims();
    let prod_d: f64 = dims.iter().map(|&d| d as f64).product();
    let prod_d1: f64 = dims.iter().map(|&d| d as f64 + 1.0).product();
    let eps_img = eps / (prod_d.sqrt() * prod_d1);
    let b = 2f64.powf(dims.len() as f64 / 2.0) / prod_d1;
    (eps_img, b)
}

/// Copies per source for one ℓ1 identity test in `setting` at distance `eps`.
pub fn identity_per_source(
    setting: Setting,
    layout: &SystemLayout,
    eps: f64,
    cfg: &TesterConfig,
) -> Result<u64, TesterError> {
    check_eps(eps)?;
    let d = layout.total_dim();
    Ok(match setting {
        Setting::Independent => l2_independent_m(d, eps / (padded(d) as f64).sqrt(), cfg)?,
        Setting::Collective => collective_n(d, eps, cfg),
        Setting::Local => {
            let (eps_img, b) = local_params(layout, eps);
            closeness_budget(eps_img, b, cfg.c)?
        }
        Setting::Swap => 2 * swap_draws(eps / (d as f64).sqrt(), cfg),
    })
}

/// Full-run copies of [`bipartite_independence`] on a unit-cost source.
pub fn bipartite_budget(
    setting: Setting,
    layout: &SystemLayout,
    eps: f64,
    cfg: &TesterConfig,
) -> Result<u64, TesterError> {
    Ok(3 * identity_per_source(setting, layout, eps / 3.0, cfg)?)
}

/// Full-run copies of [`mpartite_independence`] on a unit-cost source.
pub fn independence_budget(
    setting: Setting,
    layout: &SystemLayout,
    eps: f64,
    cfg: &TesterConfig,
) -> Result<u64, TesterError> {
    let m = layout.parties();
    match m {
        1 => Ok(0),
        2 => bipartite_budget(setting, layout, eps, cfg),
        _ => {
            let (s1, s2, grouped) = halves(layout)?;
            let r = cfg.mpartite_reps as u64;
            let e = eps / 5.0;
            Ok(r * bipartite_budget(setting, &grouped, e, cfg)?
                + r * independence_budget(setting, &layout.sub(&s1)?, e, cfg)?
                + r * independence_budget(setting, &layout.sub(&s2)?, e, cfg)?)
        }
    }
}

// ---------------------------------------------------------------------------
// identity

/// ℓ2 identity test through the MUB channel of the whole system.
pub fn identity_l2_independent<R: Rng + ?Sized>(
    rho: &StateSource,
    sigma: &StateSource,
    eps2: f64,
    cfg: &TesterConfig,
    rng: &mut R,
) -> Result<Verdict, TesterError> {
    check_eps(eps2)?;
    same_dims(rho, sigma)?;
    let dp = padded(rho.state.dim()) as f64;
    closeness_on_images(
        (rho, rho.single_image()?),
        (sigma, sigma.single_image()?),
        eps2 / (dp + 1.0),
        2f64.sqrt() / (dp + 1.0),
        Setting::Independent,
        cfg,
        rng,
    )
}

/// ℓ1 identity test with independent measurements: ℓ2 test at ε/√d′.
pub fn identity_l1_independent<R: Rng + ?Sized>(
    rho: &StateSource,
    sigma: &StateSource,
    eps: f64,
    cfg: &TesterConfig,
    rng: &mut R,
) -> Result<Verdict, TesterError> {
    check_eps(eps)?;
    let dp = padded(rho.state.dim()) as f64;
    identity_l2_independent(rho, sigma, eps / dp.sqrt(), cfg, rng)
}

/// ℓ1 identity test with one simulated collective ℓ2 estimate.
pub fn identity_l1_collective<R: Rng + ?Sized>(
    rho: &StateSource,
    sigma: &StateSource,
    eps: f64,
    cfg: &TesterConfig,
    rng: &mut R,
) -> Result<Verdict, TesterError> {
    check_eps(eps)?;
    same_dims(rho, sigma)?;
    let d = rho.state.dim();
    let n = collective_n(d, eps, cfg);
    let meter = Meter::new(&[rho, sigma]);
    rho.debit(n);
    sigma.debit(n);
    let statistic = collective_l2_identity_oracle(&rho.state, &sigma.state, n, rng, &cfg.oracle)?;
    // ‖ρ−σ‖₁ > ε forces ‖ρ−σ‖₂² > ε²/d
    let threshold = eps * eps / (2.0 * d as f64);
    Ok(Verdict {
        answer: if statistic <= threshold { Answer::Yes } else { Answer::No },
        statistic,
        threshold,
        copies_used: meter.used(),
        budget: n * (rho.cost + sigma.cost),
        setting: Setting::Collective,
    })
}

/// Swap-test baseline. Each draw measures ρ⊗ρ⊗σ⊗σ and succeeds with
/// probability 1/2 + ‖ρ−σ‖₂²/20; No iff the mean exceeds 1/2 + ε₂²/40.
pub fn swap_test_identity<R: Rng + ?Sized>(
    rho: &StateSource,
    sigma: &StateSource,
    eps2: f64,
    cfg: &TesterConfig,
    rng: &mut R,
) -> Result<Verdict, TesterError> {
    check_eps(eps2)?;
    same_dims(rho, sigma)?;
    let n = swap_draws(eps2, cfg);
    let dist2 = crate::qstate::l2_distance(&rho.state, &sigma.state)?.powi(2);
    let p = (0.5 + dist2 / 20.0).clamp(0.0, 1.0);
    let meter = Meter::new(&[rho, sigma]);
    let mut ones = 0u64;
    for _ in 0..n {
        rho.debit(2);
        sigma.debit(2);
        if rng.random_bool(p) {
            ones += 1;
        }
    }
    let statistic = ones as f64 / n as f64 - 0.5;
    let threshold = eps2 * eps2 / 40.0;
    Ok(Verdict {
        answer: if statistic <= threshold { Answer::Yes } else { Answer::No },
        statistic,
        threshold,
        copies_used: meter.used(),
        budget: 2 * n * (rho.cost + sigma.cost),
        setting: Setting::Swap,
    })
}

/// Closed form of [`swap_test_identity`]'s budget on unit-cost sources.
pub fn swap_budget(eps2: f64, cfg: &TesterConfig) -> Result<u64, TesterError> {
    check_eps(eps2)?;
    Ok(4 * swap_draws(eps2, cfg))
}

/// Closed form of [`identity_l2_independent`]'s budget on unit-cost sources.
pub fn l2_independent_budget(d: usize, eps2: f64, cfg: &TesterConfig) -> Result<u64, TesterError> {
    check_eps(eps2)?;
    Ok(2 * l2_independent_m(d, eps2, cfg)?)
}

/// ℓ1 identity test in the requested setting.
pub fn identity_test<R: Rng + ?Sized>(
    rho: &StateSource,
    sigma: &StateSource,
    eps: f64,
    setting: Setting,
    cfg: &TesterConfig,
    rng: &mut R,
) -> Result<Verdict, TesterError> {
    match setting {
        Setting::Independent => identity_l1_independent(rho, sigma, eps, cfg, rng),
        Setting::Collective => identity_l1_collective(rho, sigma, eps, cfg, rng),
        Setting::Local => local_identity(rho, sigma, eps, cfg, rng),
        Setting::Swap => {
            let d = rho.state.dim() as f64;
            swap_test_identity(rho, sigma, eps / d.sqrt(), cfg, rng)
        }
    }
}

/// Identity to I/d. The uniform side is sampled for free.
pub fn mixedness_independent<R: Rng + ?Sized>(
    rho: &StateSource,
    eps: f64,
    cfg: &TesterConfig,
    rng: &mut R,
) -> Result<Verdict, TesterError> {
    check_eps(eps)?;
    let d = rho.state.dim();
    let dp = padded(d) as f64;
    let uniform = single_image(&DensityMatrix::maximally_mixed(d))?;
    let eps_img = eps / dp.sqrt() / (dp + 1.0);
    let m = closeness_budget(eps_img, 2f64.sqrt() / (dp + 1.0), cfg.c)?;
    let meter = Meter::new(&[rho]);
    let x = poissonized_counts(rho.single_image()?, m as f64, rng)?;
    rho.debit(x.total);
    let y = poissonized_counts(&uniform, m as f64, rng)?;
    let rep = closeness_from_counts(&x, &y, m, eps_img)?;
    Ok(Verdict {
        answer: rep.verdict,
        statistic: rep.statistic,
        threshold: rep.threshold,
        copies_used: meter.used(),
        budget: m * rho.cost,
        setting: Setting::Independent,
    })
}

// ---------------------------------------------------------------------------
// local measurements

/// Identity test through the local MUB channel of `rho`'s layout.
pub fn local_identity<R: Rng + ?Sized>(
    rho: &StateSource,
    sigma: &StateSource,
    eps: f64,
    cfg: &TesterConfig,
    rng: &mut R,
) -> Result<Verdict, TesterError> {
    check_eps(eps)?;
    same_dims(rho, sigma)?;
    if rho.layout != sigma.layout {
        return Err(QStateError::LayoutMismatch(format!(
            "{} vs {}",
            rho.layout, sigma.layout
        ))
        .into());
    }
    let (eps_img, b) = local_params(&rho.layout, eps);
    closeness_on_images(
        (rho, rho.local_image()?),
        (sigma, sigma.local_image()?),
        eps_img,
        b,
        Setting::Local,
        cfg,
        rng,
    )
}

/// Local identity test between ρ and the product of its marginals.
pub fn local_independence<R: Rng + ?Sized>(
    rho: &StateSource,
    eps: f64,
    cfg: &TesterConfig,
    rng: &mut R,
) -> Result<Verdict, TesterError> {
    let prod = rho.product_source()?;
    local_identity(rho, &prod, eps, cfg, rng)
}

// ---------------------------------------------------------------------------
// independence

/// Identity test between ρ and ρ₁⊗ρ₂ at ε/3.
pub fn bipartite_independence<R: Rng + ?Sized>(
    rho: &StateSource,
    eps: f64,
    setting: Setting,
    cfg: &TesterConfig,
    rng: &mut R,
) -> Result<Verdict, TesterError> {
    check_eps(eps)?;
    if rho.layout.parties() != 2 {
        return Err(QStateError::LayoutMismatch(format!(
            "bipartite layout required, got {}",
            rho.layout
        ))
        .into());
    }
    let prod = rho.product_source()?;
    identity_test(rho, &prod, eps / 3.0, setting, cfg, rng)
}

fn halves(layout: &SystemLayout) -> Result<(Vec<usize>, Vec<usize>, SystemLayout), TesterError> {
    let m = layout.parties();
    let s1: Vec<usize> = (0..m / 2).collect();
    let s2: Vec<usize> = (m / 2..m).collect();
    let d1: usize = s1.iter().map(|&i| layout.dims()[i]).product();
    let d2: usize = s2.iter().map(|&i| layout.dims()[i]).product();
    Ok((s1, s2, SystemLayout::new(vec![d1, d2])?))
}

/// Majority vote over `reps` runs; No wins only on a strict majority.
fn majority<F>(reps: u32, setting: Setting, mut run: F) -> Result<Verdict, TesterError>
where
    F: FnMut() -> Result<Verdict, TesterError>,
{
    let mut no = 0u32;
    let mut copies = 0;
    let mut budget = 0;
    for _ in 0..reps {
        let v = run()?;
        copies += v.copies_used;
        budget += v.budget;
        if v.answer == Answer::No {
            no += 1;
        }
    }
    let threshold = reps as f64 / 2.0;
    Ok(Verdict {
        answer: if no as f64 > threshold { Answer::No } else { Answer::Yes },
        statistic: no as f64,
        threshold,
        copies_used: copies,
        budget,
        setting,
    })
}

/// Recursive-halving independence test over all parties of `rho`.
pub fn mpartite_independence<R: Rng + ?Sized>(
    rho: &StateSource,
    eps: f64,
    setting: Setting,
    cfg: &TesterConfig,
    rng: &mut R,
) -> Result<Verdict, TesterError> {
    check_eps(eps)?;
    let m = rho.layout.parties();
    if m == 1 {
        return Ok(Verdict {
            answer: Answer::Yes,
            statistic: 0.0,
            threshold: 0.0,
            copies_used: 0,
            budget: 0,
            setting,
        });
    }
    if m == 2 {
        return bipartite_independence(rho, eps, setting, cfg, rng);
    }
    let budget = independence_budget(setting, &rho.layout, eps, cfg)?;
    let meter = Meter::new(&[rho]);
    let (s1, s2, grouped) = halves(&rho.layout)?;
    let e = eps / 5.0;
    let reps = cfg.mpartite_reps;
    let cut = rho.regrouped(grouped)?;
    let mut stages = 0.0;
    let mut last = majority(reps, setting, || bipartite_independence(&cut, e, setting, cfg, rng))?;
    if last.answer == Answer::Yes {
        stages += 1.0;
        let left = rho.marginal(&s1)?;
        last = majority(reps, setting, || mpartite_independence(&left, e, setting, cfg, rng))?;
    }
    if last.answer == Answer::Yes {
        stages += 1.0;
        let right = rho.marginal(&s2)?;
        last = majority(reps, setting, || mpartite_independence(&right, e, setting, cfg, rng))?;
    }
    if last.answer == Answer::Yes {
        stages += 1.0;
    }
    Ok(Verdict {
        answer: last.answer,
        statistic: stages,
        threshold: 3.0,
        copies_used: meter.used(),
        budget,
        setting,
    })
}

// ---------------------------------------------------------------------------
// collections

/// Query access to ρ_1..ρ_n, one copy counter per index.
#[derive(Debug, Clone)]
pub struct CollectionOracle {
    sources: Vec<StateSource>,
    layout: SystemLayout,
}

impl CollectionOracle {
    pub fn new(states: Vec<DensityMatrix>, layout: SystemLayout) -> Result<Self, TesterError> {
        let sources = states
            .into_iter()
            .map(|s| StateSource::new(s, layout.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CollectionOracle { sources, layout })
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn layout(&self) -> &SystemLayout {
        &self.layout
    }

    pub fn query(&self, i: usize) -> &StateSource {
        &self.sources[i]
    }

    /// Per-index copy counters.
    pub fn counts(&self) -> Vec<u64> {
        self.sources.iter().map(StateSource::copies).collect()
    }

    pub fn total_copies(&self) -> u64 {
        self.counts().iter().sum()
    }
}

/// A collection with weights c_i > 0 and C₀ ≤ Σc_i ≤ C₁.
#[derive(Debug, Clone)]
pub struct WeightedCollection {
    pub oracle: CollectionOracle,
    weights: Vec<f64>,
}

impl WeightedCollection {
    pub fn new(
        oracle: CollectionOracle,
        weights: Vec<f64>,
        c0: f64,
        c1: f64,
    ) -> Result<Self, TesterError> {
        if weights.len() != oracle.len() {
            return Err(TesterError::BadWeights(format!(
                "{} weights for {} states",
                weights.len(),
                oracle.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(TesterError::BadWeights(format!("weight {w} is not positive")));
        }
        let s: f64 = weights.iter().sum();
        if !(c0 > 0.0 && s >= c0 - VALIDATION_TOL && s <= c1 + VALIDATION_TOL) {
            return Err(TesterError::BadWeights(format!("sum {s} outside [{c0}, {c1}]")));
        }
        Ok(WeightedCollection { oracle, weights })
    }

    /// Weights 1/n.
    pub fn uniform(oracle: CollectionOracle) -> Result<Self, TesterError> {
        let n = oracle.len();
        Self::new(oracle, vec![1.0 / n as f64; n], 1.0, 1.0)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Multiplicities n_i of the virtual uniform collection and the factor
    /// κ = min_i n_i/(N·c_i) by which the distance parameter shrinks.
    pub fn reduction(&self) -> (Vec<u64>, f64) {
        let min = self.weights.iter().cloned().fold(f64::INFINITY, f64::min);
        let q = (2.0 / min).ceil();
        let raw: Vec<u64> = self.weights.iter().map(|c| (c * q).floor() as u64).collect();
        let g = raw.iter().fold(0, |a, &b| gcd(a, b));
        let mult: Vec<u64> = raw.iter().map(|n| n / g).collect();
        let total: u64 = mult.iter().sum();
        let kappa = mult
            .iter()
            .zip(&self.weights)
            .map(|(&n, &c)| n as f64 / (total as f64 * c))
            .fold(f64::INFINITY, f64::min);
        (mult, kappa)
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// One level of a collection tester.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Level {
    pub k: u32,
    pub radius: f64,
    pub draws: u64,
    pub reps: u32,
}

/// Levels k = 0..⌈log₂ N(N−1)⌉ with radius 2^{k−1}ε below 2; larger radii
/// are vacuous for trace distance.
pub fn collection_levels(virtual_n: u64, eps: f64, cfg: &TesterConfig) -> Vec<Level> {
    let nn = (virtual_n * virtual_n.saturating_sub(1)).max(1) as f64;
    let top = nn.log2().ceil() as u32;
    (0..=top)
        .map(|k| Level {
            k,
            radius: 2f64.powi(k as i32 - 1) * eps,
            draws: (2f64.powf(1.5 * k as f64) * cfg.l).ceil() as u64,
            reps: level_reps(k, cfg),
        })
        .filter(|lv| lv.radius < 2.0)
        .collect()
}

fn level_reps(k: u32, cfg: &TesterConfig) -> u32 {
    let r = (cfg.rep_c * (k as f64 * 6f64.ln() + 2.0 * cfg.l.ln())).ceil().max(1.0) as u32;
    r | 1
}

fn virtual_index(mult: &[u64], v: u64) -> usize {
    let mut acc = 0;
    for (i, &n) in mult.iter().enumerate() {
        acc += n;
        if v < acc {
            return i;
        }
    }
    unreachable!("virtual index below total")
}

fn collection_verdict(
    answer: Answer,
    failed: u32,
    copies_used: u64,
    budget: u64,
    setting: Setting,
) -> Verdict {
    Verdict { answer, statistic: failed as f64, threshold: 0.0, copies_used, budget, setting }
}

/// Full-run copies of [`collection_identity`].
pub fn collection_identity_budget(
    wc: &WeightedCollection,
    eps: f64,
    setting: Setting,
    cfg: &TesterConfig,
) -> Result<u64, TesterError> {
    let (mult, kappa) = wc.reduction();
    let total: u64 = mult.iter().sum();
    let mut b = 0;
    for lv in collection_levels(total, kappa * eps, cfg) {
        let per = 2 * identity_per_source(setting, wc.oracle.layout(), lv.radius, cfg)?;
        b += lv.draws * lv.reps as u64 * per;
    }
    Ok(b)
}

/// Full-run copies of [`collection_independence`].
pub fn collection_independence_budget(
    wc: &WeightedCollection,
    eps: f64,
    setting: Setting,
    cfg: &TesterConfig,
) -> Result<u64, TesterError> {
    let (mult, kappa) = wc.reduction();
    let total: u64 = mult.iter().sum();
    let mut b = 0;
    for lv in collection_levels(total, kappa * eps, cfg) {
        let per = independence_budget(setting, wc.oracle.layout(), lv.radius, cfg)?;
        b += lv.draws * lv.reps as u64 * per;
    }
    Ok(b)
}

/// Are all states of the collection equal, or is it ε-far from that?
pub fn collection_identity<R: Rng + ?Sized>(
    wc: &WeightedCollection,
    eps: f64,
    setting: Setting,
    cfg: &TesterConfig,
    rng: &mut R,
) -> Result<Verdict, TesterError> {
    check_eps(eps)?;
    if wc.oracle.len() < 2 {
        return Err(TesterError::BadWeights("need at least two states".into()));
    }
    let budget = collection_identity_budget(wc, eps, setting, cfg)?;
    let (mult, kappa) = wc.reduction();
    let total: u64 = mult.iter().sum();
    let sources: Vec<&StateSource> = wc.oracle.sources.iter().collect();
    let meter = Meter::new(&sources);
    for lv in collection_levels(total, kappa * eps, cfg) {
        for _ in 0..lv.draws {
            let a = rng.random_range(0..total);
            let mut b = rng.random_range(0..total - 1);
            if b >= a {
                b += 1;
            }
            let (i, j) = (virtual_index(&mult, a), virtual_index(&mult, b));
            let (si, sj) = (wc.oracle.query(i), wc.oracle.query(j));
            let v = majority(lv.reps, setting, || identity_test(si, sj, lv.radius, setting, cfg, rng))?;
            if v.answer == Answer::No {
                return Ok(collection_verdict(Answer::No, 1, meter.used(), budget, setting));
            }
        }
    }
    Ok(collection_verdict(Answer::Yes, 0, meter.used(), budget, setting))
}

/// Is every state of the collection a product over `layout`, or is the
/// collection ε-far from that?
pub fn collection_independence<R: Rng + ?Sized>(
    wc: &WeightedCollection,
    eps: f64,
    setting: Setting,
    cfg: &TesterConfig,
    rng: &mut R,
) -> Result<Verdict, TesterError> {
    check_eps(eps)?;
    if wc.oracle.is_empty() {
        return Err(TesterError::BadWeights("empty collection".into()));
    }
    let budget = collection_independence_budget(wc, eps, setting, cfg)?;
    let sources: Vec<&StateSource> = wc.oracle.sources.iter().collect();
    let meter = Meter::new(&sources);
    if wc.oracle.layout().parties() == 1 {
        return Ok(collection_verdict(Answer::Yes, 0, 0, budget, setting));
    }
    let (mult, kappa) = wc.reduction();
    let total: u64 = mult.iter().sum();
    for lv in collection_levels(total, kappa * eps, cfg) {
        for _ in 0..lv.draws {
            let i = virtual_index(&mult, rng.random_range(0..total));
            let si = wc.oracle.query(i);
            let v = majority(lv.reps, setting, || mpartite_independence(si, lv.radius, setting, cfg, rng))?;
            if v.answer == Answer::No {
                return Ok(collection_verdict(Answer::No, 1, meter.used(), budget, setting));
            }
        }
    }
    Ok(collection_verdict(Answer::Yes, 0, meter.used(), budget, setting))
}

/// Identical and product at once: both sub-testers at ε/3.
pub fn collection_identity_independence<R: Rng + ?Sized>(
    wc: &WeightedCollection,
    eps: f64,
    setting: Setting,
    cfg: &TesterConfig,
    rng: &mut R,
) -> Result<Verdict, TesterError> {
    check_eps(eps)?;
    let budget = collection_identity_budget(wc, eps / 3.0, setting, cfg)?
        + collection_independence_budget(wc, eps / 3.0, setting, cfg)?;
    let a = collection_identity(wc, eps / 3.0, setting, cfg, rng)?;
    let mut copies = a.copies_used;
    let mut failed = a.statistic as u32;
    if a.answer == Answer::Yes {
        let b = collection_independence(wc, eps / 3.0, setting, cfg, rng)?;
        copies += b.copies_used;
        failed += b.statistic as u32;
    }
    let answer = if failed == 0 { Answer::Yes } else { Answer::No };
    Ok(collection_verdict(answer, failed, copies, budget, setting))
}

// ---------------------------------------------------------------------------
// conditional independence

/// Σ_c p_c ρ^c_AB ⊗ |c⟩⟨c|.
#[derive(Debug)]
pub struct CqqState {
    weights: Vec<f64>,
    blocks: Vec<DensityMatrix>,
    layout: SystemLayout,
    images: OnceLock<Vec<Vec<f64>>>,
}

impl Clone for CqqState {
    fn clone(&self) -> Self {
        CqqState {
            weights: self.weights.clone(),
            blocks: self.blocks.clone(),
            layout: self.layout.clone(),
            images: OnceLock::new(),
        }
    }
}

impl CqqState {
    pub fn new(
        weights: Vec<f64>,
        blocks: Vec<DensityMatrix>,
        layout: SystemLayout,
    ) -> Result<Self, TesterError> {
        if layout.parties() != 2 {
            return Err(QStateError::LayoutMismatch(format!(
                "blocks must be bipartite, got {layout}"
            ))
            .into());
        }
        if weights.is_empty() || weights.len() != blocks.len() {
            return Err(TesterError::BadWeights(format!(
                "{} weights for {} blocks",
                weights.len(),
                blocks.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(TesterError::BadWeights(format!("weight {w} is negative")));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > VALIDATION_TOL {
            return Err(TesterError::BadWeights(format!("weights sum to {s}")));
        }
        for b in &blocks {
            layout.check(b)?;
        }
        Ok(CqqState { weights, blocks, layout, images: OnceLock::new() })
    }

    pub fn labels(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn blocks(&self) -> &[DensityMatrix] {
        &self.blocks
    }

    pub fn layout(&self) -> &SystemLayout {
        &self.layout
    }

    /// Σ_c ‖p_c ρ^c − q_c σ^c‖₁.
    pub fn l1_distance(&self, other: &CqqState) -> Result<f64, TesterError> {
        if self.labels() != other.labels() {
            return Err(TesterError::BadWeights("label sets differ".into()));
        }
        let mut s = 0.0;
        for c in 0..self.labels() {
            let a = self.blocks[c].matrix().scale(self.weights[c]);
            let b = other.blocks[c].matrix().scale(other.weights[c]);
            s += crate::qstate::trace_norm(&(a - b));
        }
        Ok(s)
    }

    /// Σ_c p_c ρ^c_A ⊗ ρ^c_B ⊗ |c⟩⟨c|.
    pub fn conditional_product(&self) -> Result<CqqState, TesterError> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| product_of_marginals(b, &self.layout))
            .collect::<Result<Vec<_>, _>>()?;
        CqqState::new(self.weights.clone(), blocks, self.layout.clone())
    }

    /// ‖ρ^c − ρ^c_A⊗ρ^c_B‖₂² per label.
    pub fn block_l2_gaps(&self) -> Result<Vec<f64>, TesterError> {
        self.blocks
            .iter()
            .map(|b| {
                let prod = tensor(
                    &partial_trace(b, &self.layout, &[0])?,
                    &partial_trace(b, &self.layout, &[1])?,
                );
                Ok(crate::qstate::l2_distance(b, &prod)?.powi(2))
            })
            .collect()
    }

    fn local_images(&self) -> Result<&[Vec<f64>], TesterError> {
        if self.images.get().is_none() {
            let povm = LocalMubPovm::new(&self.layout)?;
            let imgs = self
                .blocks
                .iter()
                .map(|b| povm.image(b))
                .collect::<Result<Vec<_>, _>>()?;
            let _ = self.images.set(imgs);
        }
        Ok(self.images.get().expect("just set"))
    }
}

/// γ = f(1) = 1 − 5/(2e).
pub fn gamma() -> f64 {
    1.0 - 5.0 / (2.0 * std::f64::consts::E)
}

/// (m, ξ): Poisson mean of the sample size and the rejection threshold.
pub fn condindep_budget(
    n: usize,
    d1: usize,
    d2: usize,
    eps: f64,
    setting: Setting,
    cfg: &TesterConfig,
) -> Result<(f64, f64), TesterError> {
    check_eps(eps)?;
    if n == 0 || d1 == 0 || d2 == 0 {
        return Err(TesterError::BadConfig("n, d1, d2 must be positive".into()));
    }
    let (nf, dd) = (n as f64, (d1 * d2) as f64);
    let m = match setting {
        Setting::Collective => {
            let a = nf.sqrt() * dd / (eps * eps);
            let b = dd.powf(4.0 / 7.0) * nf.powf(6.0 / 7.0) / eps.powf(8.0 / 7.0);
            let c = dd.sqrt() * nf.powf(7.0 / 8.0) / eps;
            cfg.l * a.max(b.min(c))
        }
        Setting::Independent => {
            let a = nf.sqrt() * dd * dd / (eps * eps);
            let b = dd.powf(0.75) * nf.powf(7.0 / 8.0) / eps;
            let c = dd.powf(6.0 / 7.0) * nf.powf(6.0 / 7.0) / eps.powf(8.0 / 7.0);
            cfg.l * a.max(b.min(c))
        }
        s => return Err(TesterError::Unsupported { tester: "condindep", setting: s }),
    };
    Ok((m, condindep_xi(m, eps, d1, d2, n)))
}

/// ξ = (γ/2)·min{mε²/(4d₁d₂), m⁴ε⁴/(32d₁²d₂²n³)}.
pub fn condindep_xi(m: f64, eps: f64, d1: usize, d2: usize, n: usize) -> f64 {
    let dd = (d1 * d2) as f64;
    let a = m * eps * eps / (4.0 * dd);
    let b = m.powi(4) * eps.powi(4) / (32.0 * dd * dd * (n as f64).powi(3));
    gamma() / 2.0 * a.min(b)
}

fn cond_indep<R, F>(
    cqq: &CqqState,
    eps: f64,
    setting: Setting,
    dims: (usize, usize),
    cfg: &TesterConfig,
    rng: &mut R,
    mut bucket: F,
) -> Result<Verdict, TesterError>
where
    R: Rng + ?Sized,
    F: FnMut(usize, u64, &mut R) -> Result<f64, TesterError>,
{
    let (m, xi) = condindep_budget(cqq.labels(), dims.0, dims.1, eps, setting, cfg)?;
    let total = poissonize(m, rng);
    let sizes = multinomial_counts(&cqq.weights, total, rng)?;
    let mut a = 0.0;
    for (c, &ac) in sizes.tallies.iter().enumerate() {
        if ac >= 4 {
            a += ac as f64 * bucket(c, ac, rng)?;
        }
    }
    Ok(Verdict {
        answer: if a > xi { Answer::No } else { Answer::Yes },
        statistic: a,
        threshold: xi,
        copies_used: total,
        budget: m.ceil() as u64,
        setting,
    })
}

/// Conditional independence with a simulated collective estimator per label.
pub fn cond_indep_collective<R: Rng + ?Sized>(
    cqq: &CqqState,
    eps: f64,
    cfg: &TesterConfig,
    rng: &mut R,
) -> Result<Verdict, TesterError> {
    let dims = (cqq.layout.dims()[0], cqq.layout.dims()[1]);
    cond_indep(cqq, eps, Setting::Collective, dims, cfg, rng, |c, ac, rng| {
        Ok(collective_independence_oracle(&cqq.blocks[c], &cqq.layout, ac, rng, &cfg.oracle)?)
    })
}

/// Conditional independence from local MUB outcomes and the independence
/// U-statistic, rescaled by the channel factor (d₁′+1)²(d₂′+1)².
pub fn cond_indep_independent<R: Rng + ?Sized>(
    cqq: &CqqState,
    eps: f64,
    cfg: &TesterConfig,
    rng: &mut R,
) -> Result<Verdict, TesterError> {
    let p = cqq.layout.padded();
    let (d1, d2) = (p.dims()[0], p.dims()[1]);
    let (na, nb) = (d1 * (d1 + 1), d2 * (d2 + 1));
    let scale2 = ((d1 + 1) * (d2 + 1)) as f64;
    let scale2 = scale2 * scale2;
    let images = cqq.local_images()?;
    cond_indep(cqq, eps, Setting::Independent, (d1, d2), cfg, rng, |c, ac, rng| {
        let counts = multinomial_counts(&images[c], ac, rng)?;
        Ok(scale2 * ustat_from_table(&counts.tallies, na, nb)?)
    })
}

// ---------------------------------------------------------------------------
// Poisson truncation

/// f(x) = E[N·1{N≥4}] for N ~ Poisson(x), i.e. x − e^{−x}(x + x² + x³/2).
pub fn truncated_poisson_mean(x: f64) -> Result<f64, TesterError> {
    if x < 0.0 || x.is_nan() {
        return Err(TesterError::NegativeInput(x));
    }
    // x·P(N ≥ 3); the tail series avoids cancellation for small x
    let tail = if x < 1.0 {
        let mut term = x * x * x / 6.0;
        let mut s = 0.0;
        let mut k = 3.0;
        while term > 1e-300 && k < 200.0 {
            s += term;
            k += 1.0;
            term *= x / k;
        }
        (-x).exp() * s
    } else {
        1.0 - (-x).exp() * (1.0 + x + x * x / 2.0)
    };
    Ok(x * tail)
}

/// (E, Var) of N·1{N≥4}, N ~ Poisson(λ), by pmf summation.
pub fn truncated_poisson_moments(lambda: f64) -> Result<(f64, f64), TesterError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(TesterError::NegativeInput(lambda));
    }
    let kmax = (lambda + 40.0 * lambda.sqrt() + 60.0).ceil() as u64;
    let mut log_pmf = -lambda;
    let (mut m1, mut m2) = (0.0, 0.0);
    for k in 0..=kmax {
        if k > 0 {
            log_pmf += lambda.ln() - (k as f64).ln();
        }
        if k >= 4 {
            let p = log_pmf.exp();
            let kf = k as f64;
            m1 += kf * p;
            m2 += kf * kf * p;
        }
    }
    Ok((m1, m2 - m1 * m1))
}

/// max over `lambdas` of Var[N·1{N≥4}] / E[N·1{N≥4}].
pub fn poisson_truncation_constant(lambdas: &[f64]) -> Result<f64, TesterError> {
    let mut r: f64 = 0.0;
    for &l in lambdas {
        let (m, v) = truncated_poisson_moments(l)?;
        if m > 0.0 {
            r = r.max(v / m);
        }
    }
    Ok(r)
}

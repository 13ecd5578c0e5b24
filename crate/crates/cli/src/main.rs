use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qpt_core::harness::{
    self, calibrate, emit, run_experiment, CheckResult, ConfigFile, ExperimentSpec, Format,
    HarnessError, TesterId,
};
use qpt_core::qstate::StateFile;
use qpt_core::sampling::{role_tag, RngStream};
use qpt_core::testers::{
    identity_test, mixedness_independent, mpartite_independence, Setting, StateSource,
    TesterConfig, Verdict,
};
use qpt_core::SystemLayout;

const EXIT_INVALID: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "qpt", version, about = "Property testers for quantum states")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Is ρ equal to σ or ε-far from it?
    Identity(StatesArgs),
    /// Is ρ maximally mixed or ε-far from it?
    Mixedness(StatesArgs),
    /// Is ρ a product over the layout or ε-far from every product?
    Independence(StatesArgs),
    /// Properties of a weighted collection of states (fixtures only)
    Collection(CollectionArgs),
    /// Conditional independence of a classical-quantum-quantum state (fixtures only)
    Condindep(SizedArgs),
    /// Monte Carlo sweep of one tester over an ε grid
    Sweep(SweepArgs),
    /// Smallest constant giving 2/3 success on an ε grid
    Calibrate(CalibrateArgs),
    /// Built-in numerical checks
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Independent,
    Collective,
    Local,
    Swap,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::Independent => Setting::Independent,
            SettingArg::Collective => Setting::Collective,
            SettingArg::Local => Setting::Local,
            SettingArg::Swap => Setting::Swap,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum CollectionMode {
    Identity,
    Independence,
    IdentityIndependence,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long, value_enum, default_value = "independent")]
    setting: SettingArg,
    /// Trials per instance kind
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Local dimensions, most significant party first
    #[arg(long, value_delimiter = ',')]
    layout: Option<Vec<usize>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    #[arg(long = "const-C")]
    const_c: Option<f64>,
    #[arg(long = "const-L")]
    const_l: Option<f64>,
    /// TOML file with run settings and constants
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct StatesArgs {
    #[arg(long, default_value_t = 0.5)]
    epsilon: f64,
    /// JSON state file; with it the tester runs once on the given state
    #[arg(long)]
    state_a: Option<PathBuf>,
    #[arg(long)]
    state_b: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SizedArgs {
    #[arg(long, default_value_t = 0.5)]
    epsilon: f64,
    /// Collection size or number of classical labels
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CollectionArgs {
    #[arg(long, value_enum, default_value = "identity")]
    mode: CollectionMode,
    #[command(flatten)]
    sized: SizedArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    tester: TesterId,
    /// Comma-separated ε grid
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.5,0.25")]
    epsilon: Vec<f64>,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    /// First rung of the doubling ladder
    #[arg(long, default_value_t = 0.25)]
    start: f64,
    #[arg(long, default_value_t = 12)]
    steps: u32,
}

#[derive(Args)]
struct SelftestArgs {
    #[command(subcommand)]
    only: Option<SelftestOnly>,
}

#[derive(Subcommand)]
enum SelftestOnly {
    /// Check the MUB family of dimension 2^K
    Mub {
        #[arg(long)]
        k: u32,
    },
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Check(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::CalibrationFailed(_) => Failure::Check(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

impl From<qpt_core::testers::TesterError> for Failure {
    fn from(e: qpt_core::testers::TesterError) -> Self {
        Failure::Invalid(e.to_string())
    }
}

impl From<qpt_core::qstate::QStateError> for Failure {
    fn from(e: qpt_core::qstate::QStateError) -> Self {
        Failure::Invalid(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

struct Resolved {
    setting: Setting,
    trials: u64,
    seed: u64,
    config: TesterConfig,
}

impl Common {
    /// Flags win over the config file, which wins over built-in defaults.
    fn resolve(&self, tester: TesterId) -> Result<Resolved, Failure> {
        let file = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let setting = Setting::from(self.setting);
        let mut config = file.resolve(tester, setting);
        if let Some(c) = self.const_c {
            config.c = c;
        }
        if let Some(l) = self.const_l {
            config.l = l;
        }
        config.validate()?;
        Ok(Resolved {
            setting,
            trials: self.trials.or(file.trials).unwrap_or(400),
            seed: self.seed.or(file.seed).unwrap_or(1),
            config,
        })
    }

    fn writer(&self) -> Result<Box<dyn Write>, Failure> {
        Ok(match &self.out {
            Some(p) => Box::new(File::create(p)?),
            None => Box::new(io::stdout().lock()),
        })
    }

    fn format(&self) -> Format {
        match self.format {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }
    }

    fn spec(&self, tester: TesterId, epsilons: Vec<f64>, n: usize, default_layout: &[usize]) -> Result<ExperimentSpec, Failure> {
        let r = self.resolve(tester)?;
        Ok(ExperimentSpec {
            tester,
            setting: r.setting,
            layout: self.layout.clone().unwrap_or_else(|| default_layout.to_vec()),
            epsilons,
            trials: r.trials,
            seed: r.seed,
            n,
            config: r.config,
        })
    }
}

fn default_layout(tester: TesterId) -> &'static [usize] {
    match tester {
        TesterId::Identity | TesterId::Mixedness | TesterId::CollectionIdentity => &[2],
        _ => &[2, 2],
    }
}

fn experiment(common: &Common, spec: &ExperimentSpec) -> Result<(), Failure> {
    let report = run_experiment(spec)?;
    emit(&report, common.format(), common.writer()?)?;
    Ok(())
}

fn load_state(path: &Path, layout: Option<&Vec<usize>>) -> Result<StateSource, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let (state, file_layout) = StateFile::from_json(&text)
        .and_then(StateFile::into_state)
        .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let layout = match layout {
        Some(dims) => {
            let l = SystemLayout::new(dims.clone())?;
            if l.total_dim() != state.dim() {
                return Err(Failure::Invalid(format!(
                    "layout {l} does not match the {}-dimensional state in {}",
                    state.dim(),
                    path.display()
                )));
            }
            l
        }
        None => file_layout,
    };
    Ok(StateSource::new(state, layout)?)
}

fn print_verdict(
    common: &Common,
    tester: TesterId,
    eps: f64,
    seed: u64,
    v: &Verdict,
) -> Result<(), Failure> {
    let body = serde_json::json!({
        "tester": tester.name(),
        "epsilon": eps,
        "seed": seed,
        "verdict": v,
    });
    let mut w = common.writer()?;
    writeln!(w, "{}", serde_json::to_string_pretty(&body).expect("json values serialize"))?;
    Ok(())
}

fn states_command(tester: TesterId, args: &StatesArgs) -> Result<(), Failure> {
    let common = &args.common;
    let Some(path_a) = &args.state_a else {
        if args.state_b.is_some() {
            return Err(Failure::Invalid("--state-b needs --state-a".into()));
        }
        let spec = common.spec(tester, vec![args.epsilon], 0, default_layout(tester))?;
        return experiment(common, &spec);
    };
    let r = common.resolve(tester)?;
    let a = load_state(path_a, common.layout.as_ref())?;
    let mut rng = RngStream::new(r.seed, 0, role_tag(tester.name()));
    let v = match tester {
        TesterId::Identity => {
            let b = match &args.state_b {
                Some(p) => load_state(p, Some(&a.layout().dims().to_vec()))?,
                None => {
                    return Err(Failure::Invalid("identity needs --state-b with --state-a".into()))
                }
            };
            identity_test(&a, &b, args.epsilon, r.setting, &r.config, &mut rng)?
        }
        TesterId::Mixedness => {
            if r.setting != Setting::Independent {
                return Err(Failure::Invalid("mixedness runs in the independent setting only".into()));
            }
            mixedness_independent(&a, args.epsilon, &r.config, &mut rng)?
        }
        TesterId::Independence => mpartite_independence(&a, args.epsilon, r.setting, &r.config, &mut rng)?,
        _ => unreachable!("only state testers reach here"),
    };
    print_verdict(common, tester, args.epsilon, r.seed, &v)
}

fn report_checks(results: &[CheckResult]) -> Result<(), Failure> {
    let mut failed = 0;
    for r in results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} of {} checks failed", results.len())));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Identity(a) => states_command(TesterId::Identity, &a),
        Command::Mixedness(a) => states_command(TesterId::Mixedness, &a),
        Command::Independence(a) => states_command(TesterId::Independence, &a),
        Command::Collection(a) => {
            let tester = match a.mode {
                CollectionMode::Identity => TesterId::CollectionIdentity,
                CollectionMode::Independence => TesterId::CollectionIndependence,
                CollectionMode::IdentityIndependence => TesterId::CollectionIdentityIndependence,
            };
            let s = &a.sized;
            let spec = s.common.spec(tester, vec![s.epsilon], s.n, default_layout(tester))?;
            experiment(&s.common, &spec)
        }
        Command::Condindep(s) => {
            let spec = s.common.spec(TesterId::Condindep, vec![s.epsilon], s.n, &[2, 2])?;
            experiment(&s.common, &spec)
        }
        Command::Sweep(a) => {
            let spec = a.common.spec(a.tester, a.epsilon.clone(), a.n, default_layout(a.tester))?;
            experiment(&a.common, &spec)
        }
        Command::Calibrate(a) => {
            let s = &a.sweep;
            let spec = s.common.spec(s.tester, s.epsilon.clone(), s.n, default_layout(s.tester))?;
            let cal = calibrate(&spec, a.start, a.steps)?;
            eprintln!(
                "{} ({}): {} = {} with worst rate {:.3}",
                cal.tester, cal.setting, cal.constant, cal.value, cal.worst_rate
            );
            let mut file = ConfigFile::default();
            file.testers.insert(cal.tester.name().into(), cal.overrides());
            write!(s.common.writer()?, "{}", file.to_toml())?;
            Ok(())
        }
        Command::Selftest(a) => match a.only {
            Some(SelftestOnly::Mub { k }) => {
                if !(1..=4).contains(&k) {
                    return Err(Failure::Invalid(format!("--k must lie in 1..=4, got {k}")));
                }
                report_checks(&harness::mub_checks(k))
            }
            None => report_checks(&harness::selftest(None)),
        },
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INVALID)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
    }
}

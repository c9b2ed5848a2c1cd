//! `zeta`: validate knowledge bases, derive parameters, run the service and
//! drive simulations and attacks.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

mod client;

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zeta_core::attacker::{curve_csv, observation_curve, CurveConfig, CurveRow};
use zeta_core::kb::{self, KnowledgeBase};
use zeta_core::secret::{
    balance, generate_secret, GenerationLimits, Negation, SecretFormula, SecretRequest, DEFAULT_ENUMERATION_CAP,
    DEFAULT_SEARCH_BUDGET,
};
use zeta_core::service::{AnswerOutcome, AuthService, EnrollRequest, FileStore, ServiceConfig, SystemClock};
use zeta_core::sim::{run_cohort, CohortConfig, CohortReport, LabelIndex, Responder, SimulatedUser};
use zeta_core::stats::Estimate;
use zeta_core::verifier::{guess_probability, min_challenges, SecurityPolicy};
use zeta_core::derive_seed;

#[derive(Parser)]
#[command(name = "zeta", version, about = "Knowledge-based challenge-response authentication")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Knowledge base utilities.
    Kb {
        #[command(subcommand)]
        command: KbCommand,
    },
    /// Challenge count and exact guessing probability for a policy.
    Params {
        /// Upper bound on a random guesser's acceptance probability.
        #[arg(long)]
        threshold: f64,
        /// Wrong answers tolerated per session.
        #[arg(long, default_value_t = 0)]
        errors: u32,
    },
    /// Run the HTTP service until interrupted.
    Serve(ServeArgs),
    /// Monte Carlo acceptance rates for simulated users.
    Simulate(SimulateArgs),
    /// Observation attack curve as CSV.
    Attack(AttackArgs),
}

#[derive(Subcommand)]
enum KbCommand {
    /// Check a knowledge base file and print its statistics.
    Validate { path: PathBuf },
}

#[derive(Args)]
struct ServeArgs {
    /// Knowledge base file; the bundled one if omitted.
    #[arg(long, env = "ZETA_KB")]
    kb: Option<PathBuf>,
    /// JSON store file, created on first write.
    #[arg(long, env = "ZETA_STORE", default_value = "zeta-store.json")]
    store: PathBuf,
    #[arg(long, env = "ZETA_ADDR", default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Session time-to-live in seconds.
    #[arg(long, env = "ZETA_TTL", default_value_t = 600)]
    ttl: u64,
}

/// Policy given either as a guessing threshold or as an explicit challenge
/// count.
#[derive(Args, Clone, Copy)]
struct PolicyArgs {
    #[arg(long, default_value_t = 1e-6, conflicts_with = "challenges")]
    threshold: f64,
    #[arg(long)]
    challenges: Option<u32>,
    #[arg(long, default_value_t = 1)]
    errors: u32,
    /// Balance tolerance for generated secrets.
    #[arg(long, default_value_t = 0.05)]
    tolerance: f64,
}

impl PolicyArgs {
    fn policy(&self) -> Result<SecurityPolicy, Failure> {
        let policy = match self.challenges {
            Some(n) => SecurityPolicy::from_counts(n, self.errors, self.tolerance),
            None => SecurityPolicy::derive(self.threshold, self.errors, self.tolerance),
        };
        policy.map_err(|e| Failure::Usage(e.to_string()))
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    users: usize,
    /// Sessions per user.
    #[arg(long, default_value_t = 100)]
    sessions: usize,
    /// Per-challenge probability that an honest user answers wrong.
    #[arg(long, default_value_t = 0.0)]
    error_rate: f64,
    /// Simulate random guessers instead of honest users.
    #[arg(long)]
    random: bool,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rerun a small sample over HTTP against an in-process server and check
    /// it matches the in-process result.
    #[arg(long)]
    wire: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum NegationArg {
    None,
    Literal,
    Any,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Secret under attack; generated from the seed if omitted.
    #[arg(long)]
    secret: Option<String>,
    #[arg(long, default_value_t = 2)]
    min_leaves: usize,
    #[arg(long, default_value_t = 3)]
    max_leaves: usize,
    #[arg(long, default_value_t = 3)]
    max_depth: usize,
    #[arg(long, value_enum, default_value_t = NegationArg::Literal)]
    negation: NegationArg,
    #[arg(long)]
    no_and: bool,
    #[arg(long)]
    no_or: bool,
    /// Largest hypothesis space to enumerate.
    #[arg(long, default_value_t = DEFAULT_ENUMERATION_CAP)]
    cap: u128,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long, default_value_t = 10)]
    max_observations: usize,
    /// Mismatches tolerated before a hypothesis is discarded.
    #[arg(long, default_value_t = 0)]
    slack: usize,
    /// Error rate of the observed user.
    #[arg(long, default_value_t = 0.0)]
    error_rate: f64,
    /// Impersonation trials per row.
    #[arg(long, default_value_t = 10_000)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; standard output if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Domain(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self::Domain(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Kb { command: KbCommand::Validate { path } } => kb_validate(&path),
        Command::Params { threshold, errors } => params(threshold, errors),
        Command::Serve(args) => serve(args),
        Command::Simulate(args) => simulate(args),
        Command::Attack(args) => attack(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_kb(path: Option<&Path>) -> anyhow::Result<KnowledgeBase> {
    match path {
        None => Ok(kb::bundled()),
        Some(p) => {
            let file = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            KnowledgeBase::load(std::io::BufReader::new(file)).with_context(|| format!("loading {}", p.display()))
        }
    }
}

fn kb_validate(path: &Path) -> Result<(), Failure> {
    let kb = load_kb(Some(path))?;
    println!("attributes {}", kb.attribute_count());
    println!("concepts   {}", kb.concept_count());
    println!("relations  {}", kb.relations().len());
    if kb.concept_count() > 0 {
        println!();
        println!("{:<20} {:>7} {:>9}", "concept", "related", "fraction");
    }
    for c in kb.concepts() {
        let related = kb.related_attribute_set(&c.id)?.len();
        let fraction = if kb.is_empty() { 0.0 } else { related as f64 / kb.attribute_count() as f64 };
        println!("{:<20} {:>7} {:>9.3}", c.id, related, fraction);
    }
    if kb.concept_count() >= 2 && !kb.is_empty() {
        let request = SecretRequest::new(0.05, 0);
        match generate_secret(&kb, &request, 0) {
            Ok(s) => {
                let report = balance(&kb, &s)?;
                println!();
                println!("balanced secret found: {s} ({}/{} yes)", report.yes_count, kb.attribute_count());
            }
            Err(e) => println!("\nno balanced secret at tolerance 0.05: {e}"),
        }
    }
    Ok(())
}

fn params(threshold: f64, errors: u32) -> Result<(), Failure> {
    let n = min_challenges(threshold, errors).map_err(|e| Failure::Usage(e.to_string()))?;
    let p = guess_probability(n, errors).map_err(|e| Failure::Usage(e.to_string()))?;
    let reduced = p.reduced();
    println!("threshold          {threshold:e}");
    println!("allowed errors     {errors}");
    println!("challenges         {n}");
    println!("guess probability  {:e}", p.to_f64());
    println!("exact              {p} = {}/2^{}", p.numerator, p.exponent);
    if reduced != p {
        println!("reduced            {reduced}");
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), Failure> {
    let kb = load_kb(args.kb.as_deref())?;
    let config = ServiceConfig { session_ttl: Duration::from_secs(args.ttl), ..ServiceConfig::default() };
    let store = FileStore::new(&args.store);
    let service = AuthService::open(kb, config, Box::new(store), Box::new(SystemClock))
        .with_context(|| format!("opening store {}", args.store.display()))?;
    let service = Arc::new(service);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener =
            tokio::net::TcpListener::bind(args.addr).await.with_context(|| format!("binding {}", args.addr))?;
        let local = listener.local_addr()?;
        let mut out = std::io::stdout();
        let _ = writeln!(out, "listening on http://{local}").and_then(|()| out.flush());
        zeta_server::serve(listener, service, zeta_server::shutdown_signal()).await?;
        let _ = writeln!(std::io::stdout(), "store flushed to {}", args.store.display());
        Ok(())
    })
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&args.error_rate) {
        return Err(Failure::Usage(format!("--error-rate {} outside [0, 1]", args.error_rate)));
    }
    if args.random && args.error_rate != 0.0 {
        return Err(Failure::Usage("--random and --error-rate are exclusive".into()));
    }
    if args.users == 0 || args.sessions == 0 {
        return Err(Failure::Usage("--users and --sessions must be at least 1".into()));
    }
    let policy = args.policy.policy()?;
    let kb = load_kb(args.kb.as_deref())?;
    let responder = if args.random { Responder::Random } else { Responder::Honest { error_rate: args.error_rate } };
    let config = CohortConfig {
        responder,
        users: args.users,
        sessions_per_user: args.sessions,
        policy,
        seed: args.seed,
        user_prefix: "sim-".into(),
    };
    let service = AuthService::in_memory(kb.clone(), ServiceConfig::default());
    let report = run_cohort(&service, &config)?;
    print_reports(&[&report]);

    if args.wire {
        let sample = CohortConfig { users: args.users.min(3), sessions_per_user: args.sessions.min(5), ..config };
        let local = run_cohort(&AuthService::in_memory(kb.clone(), ServiceConfig::default()), &sample)?;
        let wire = run_wire_cohort(kb, &sample)?;
        println!();
        println!(
            "wire sample: {} sessions, {} accepted over HTTP, {} in process",
            wire.trials, wire.successes, local.accepted.successes
        );
        if wire.successes != local.accepted.successes {
            return Err(Failure::Domain(anyhow!("wire and in-process results differ")));
        }
        println!("wire parity: ok");
    }
    Ok(())
}

fn print_reports(reports: &[&CohortReport]) {
    println!(
        "{:<16} {:>3} {:>3} {:>9} {:>9} {:>10} {:>23} {:>10} {:>7}",
        "cohort", "n", "e", "sessions", "accepted", "rate", "95% CI", "expected", "z"
    );
    for r in reports {
        let a = &r.accepted;
        println!(
            "{:<16} {:>3} {:>3} {:>9} {:>9} {:>10.6} {:>23} {:>10.6} {:>7.2}",
            r.cohort,
            r.challenge_count,
            r.allowed_errors,
            a.trials,
            a.successes,
            a.estimate,
            format!("[{:.6}, {:.6}]", a.ci_low, a.ci_high),
            r.expected_rate,
            r.z_score()
        );
    }
}

/// Same users, seeds and answers as [`run_cohort`], driven over HTTP.
fn run_wire_cohort(kb: KnowledgeBase, config: &CohortConfig) -> anyhow::Result<Estimate> {
    let runtime = tokio::runtime::Runtime::new()?;
    let service = Arc::new(AuthService::in_memory(kb.clone(), ServiceConfig::default()));
    let listener = runtime.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let addr = listener.local_addr()?;
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = runtime.spawn(zeta_server::serve(listener, service, async {
        let _ = stopped.await;
    }));

    let client = client::Client::new(format!("http://{addr}"));
    let labels = LabelIndex::new(&kb)?;
    let mut accepted = 0u64;
    let mut total = 0u64;
    for u in 0..config.users {
        let user_seed = derive_seed(config.seed, u as u64);
        let enrollment = client.enroll(&EnrollRequest {
            user_id: format!("{}{u}", config.user_prefix),
            threshold: config.policy.guessing_threshold,
            allowed_errors: config.policy.allowed_errors,
            tolerance: config.policy.tolerance,
            seed: Some(user_seed),
        })?;
        let secret: SecretFormula = enrollment.secret_text.parse()?;
        let user = SimulatedUser::new(&kb, &labels, secret, config.responder);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(user_seed, 0xA11CE));
        for _ in 0..config.sessions_per_user {
            let start = client.start_session(&enrollment.user_id)?;
            let mut challenge = start.challenge;
            let verdict = loop {
                let response = user.respond(&challenge, &mut rng)?;
                match client.answer(&start.session_id, challenge.index, response)? {
                    AnswerOutcome::Challenge(next) => challenge = next,
                    AnswerOutcome::Verdict(v) => break v,
                }
            };
            total += 1;
            accepted += u64::from(verdict.accepted);
        }
    }
    let _ = stop.send(());
    runtime.block_on(server)??;
    Ok(Estimate::from_counts(accepted, total))
}

fn attack(args: AttackArgs) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&args.error_rate) {
        return Err(Failure::Usage(format!("--error-rate {} outside [0, 1]", args.error_rate)));
    }
    if args.min_leaves == 0 || args.min_leaves > args.max_leaves {
        return Err(Failure::Usage("need 1 <= --min-leaves <= --max-leaves".into()));
    }
    if args.no_and && args.no_or {
        return Err(Failure::Usage("--no-and and --no-or leave no connective".into()));
    }
    if args.trials == 0 {
        return Err(Failure::Usage("--trials must be at least 1".into()));
    }
    let policy = args.policy.policy()?;
    let kb = load_kb(args.kb.as_deref())?;
    let limits = GenerationLimits {
        min_leaves: args.min_leaves,
        max_leaves: args.max_leaves,
        max_depth: args.max_depth,
        allow_and: !args.no_and,
        allow_or: !args.no_or,
        negation: match args.negation {
            NegationArg::None => Negation::None,
            NegationArg::Literal => Negation::Literal,
            NegationArg::Any => Negation::Any,
        },
    };
    let secret: SecretFormula = match &args.secret {
        Some(text) => {
            let s: SecretFormula = text.parse().map_err(|e| Failure::Usage(format!("--secret: {e}")))?;
            s.validate(&kb)?;
            s
        }
        None => {
            let request = SecretRequest {
                limits,
                tolerance: policy.tolerance,
                min_each: 0,
                search_budget: DEFAULT_SEARCH_BUDGET,
            };
            generate_secret(&kb, &request, derive_seed(args.seed, 0))?
        }
    };
    let config = CurveConfig {
        limits,
        enumeration_cap: args.cap,
        max_observations: args.max_observations,
        slack: args.slack,
        user_error_rate: args.error_rate,
        trials: args.trials,
        seed: args.seed,
    };
    let rows = observation_curve(&kb, &secret, &policy, &config)?;
    let csv = curve_csv(&rows);
    match &args.out {
        None => print!("{csv}"),
        Some(path) => {
            fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
            print_curve(&secret, &policy, &rows);
            println!("csv written to {}", path.display());
        }
    }
    Ok(())
}

fn print_curve(secret: &SecretFormula, policy: &SecurityPolicy, rows: &[CurveRow]) {
    println!("secret {secret}, {} challenges, {} errors allowed", policy.challenge_count, policy.allowed_errors);
    println!(
        "{:>12} {:>10} {:>6} {:>10} {:>23}",
        "observations", "surviving", "truth", "estimate", "95% CI"
    );
    for r in rows {
        println!(
            "{:>12} {:>10} {:>6} {:>10.6} {:>23}",
            r.observations,
            r.surviving,
            if r.truth_survives { "yes" } else { "no" },
            r.estimate.estimate,
            format!("[{:.6}, {:.6}]", r.estimate.ci_low, r.estimate.ci_high)
        );
    }
}

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evauth::crypto::{Block, SecretKey};
use evauth::registry::{write_atomic, NotifyChannel, ReplayPolicy};
use evauth::report::write_run_outputs;
use evauth::scenario::{self, RunOptions, Scenario};
use evauth::suite::{self, run_attack_suite};
use evauth::{MacCheck, Registry, Tariff};

// Writes to stdout, ignoring a closed pipe.
macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = write!(io::stdout().lock(), $($arg)*);
    }};
}

macro_rules! outln {
    ($($arg:tt)*) => {{
        let _ = writeln!(io::stdout().lock(), $($arg)*);
    }};
}

const EXIT_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "evauth",
    version,
    about = "EV charging authentication simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a registry file from a vehicle spec file.
    ///
    /// Spec lines: `<id-hex> <key-hex> <balance> <sms|email> <contact>`.
    /// Blank lines and `#` comments are ignored. An existing registry file
    /// is extended.
    Provision {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        spec: PathBuf,
    },
    /// Run one scenario file (or the name of a bundled scenario).
    Run {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Price per minute in currency minor units.
        #[arg(long)]
        tariff: Option<u64>,
        /// Use a provisioned registry instead of the scenario's vehicles.
        #[arg(long)]
        registry: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
        #[command(flatten)]
        test: TestArgs,
    },
    /// Run the bundled attack scenarios.
    AttackSuite {
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArgs,
        #[command(flatten)]
        test: TestArgs,
    },
    /// List the bundled scenarios, or print one.
    Scenarios { name: Option<String> },
}

#[derive(Args)]
struct OutArgs {
    #[arg(long, env = "EVAUTH_OUT_DIR", default_value = "evauth-out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TestArgs {
    /// Accept every MAC. Test builds only.
    #[cfg(feature = "negative-control")]
    #[arg(long, hide = true)]
    skip_mac_checks: bool,
}

impl TestArgs {
    fn mac_check(&self) -> MacCheck {
        #[cfg(feature = "negative-control")]
        if self.skip_mac_checks {
            return MacCheck::Skip;
        }
        MacCheck::Enforce
    }
}

struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Provision { registry, spec } => provision(&registry, &spec),
        Command::Run {
            scenario,
            seed,
            tariff,
            registry,
            out,
            test,
        } => run(
            &scenario,
            seed,
            tariff,
            registry.as_deref(),
            &out.out_dir,
            test.mac_check(),
        ),
        Command::AttackSuite { seed, out, test } => {
            attack_suite(seed, &out.out_dir, test.mac_check())
        }
        Command::Scenarios { name } => scenarios(name.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("evauth: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}

fn provision(registry_path: &Path, spec_path: &Path) -> Result<(), Failure> {
    let registry = if registry_path.exists() {
        Registry::load(registry_path, ReplayPolicy::default()).map_err(|e| usage(e.to_string()))?
    } else {
        Registry::new()
    };
    let text = fs::read_to_string(spec_path)
        .map_err(|e| usage(format!("{}: {e}", spec_path.display())))?;
    let mut added = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |msg: String| usage(format!("{}:{}: {msg}", spec_path.display(), i + 1));
        let mut words = line.splitn(5, char::is_whitespace).map(str::trim);
        let (Some(id), Some(key), Some(balance), Some(channel), Some(contact)) = (
            words.next(),
            words.next(),
            words.next(),
            words.next(),
            words.next(),
        ) else {
            return Err(at(
                "expected `<id-hex> <key-hex> <balance> <sms|email> <contact>`".into(),
            ));
        };
        let id_a = Block::from_hex(id).map_err(|e| at(format!("id: {e}")))?;
        let k_a = SecretKey::from_hex(key).map_err(|e| at(format!("key: {e}")))?;
        let balance: u64 = balance
            .parse()
            .map_err(|_| at(format!("balance: not a number: {balance:?}")))?;
        let channel: NotifyChannel = channel.parse().map_err(at)?;
        if k_a == SecretKey::ZERO {
            eprintln!(
                "evauth: warning: {}:{}: vehicle {id_a} has an all-zero key",
                spec_path.display(),
                i + 1
            );
        }
        let record = registry
            .register_vehicle(id_a, k_a, balance, contact, channel)
            .map_err(|e| at(e.to_string()))?;
        outln!("vehicle {} pseudonym {}", record.id_a, record.pseudonym);
        added += 1;
    }
    write_atomic(registry_path, &registry.render_registry())
        .map_err(|e| usage(format!("{}: {e}", registry_path.display())))?;
    outln!(
        "provisioned {added} vehicle(s); {} total in {}",
        registry.records().len(),
        registry_path.display()
    );
    Ok(())
}

fn load_scenario(arg: &str) -> Result<Scenario, Failure> {
    let path = Path::new(arg);
    let (origin, text) = if path.exists() {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("{arg}: {e}")))?;
        (arg.to_string(), text)
    } else if let Some(src) = suite::bundled(arg.trim_end_matches(".scn")) {
        (format!("bundled:{arg}"), src.to_string())
    } else {
        return Err(usage(format!("{arg}: no such file or bundled scenario")));
    };
    scenario::parse(&text).map_err(|e| usage(format!("{origin}: {e}")))
}

fn run(
    scenario_arg: &str,
    seed: Option<u64>,
    tariff: Option<u64>,
    registry: Option<&Path>,
    out_dir: &Path,
    mac_check: MacCheck,
) -> Result<(), Failure> {
    let sc = load_scenario(scenario_arg)?;
    let registry = registry
        .map(|p| Registry::load(p, sc.replay_policy))
        .transpose()
        .map_err(|e| usage(e.to_string()))?;
    let mut outcome = scenario::run_scenario(
        &sc,
        RunOptions {
            seed,
            tariff: tariff.map(Tariff),
            mac_check,
            registry,
        },
    )
    .map_err(|e| usage(format!("{scenario_arg}: {e}")))?;
    write_run_outputs(out_dir, &mut outcome)
        .map_err(|e| usage(format!("{}: {e}", out_dir.display())))?;
    out!("{}", outcome.report.render_text());
    outln!("{}", outcome.report.to_json());
    if outcome.report.passed {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_FAIL,
            message: String::new(),
        })
    }
}

fn attack_suite(seed: Option<u64>, out_dir: &Path, mac_check: MacCheck) -> Result<(), Failure> {
    let report =
        run_attack_suite(Some(out_dir), seed, mac_check).map_err(|e| usage(e.to_string()))?;
    out!("{}", report.render_text());
    outln!(
        "{}",
        serde_json::to_string(&report).expect("report serializes")
    );
    if report.passed {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_FAIL,
            message: String::new(),
        })
    }
}

fn scenarios(name: Option<&str>) -> Result<(), Failure> {
    match name {
        None => {
            for (n, _) in suite::BUNDLED {
                outln!("{n}");
            }
            Ok(())
        }
        Some(n) => {
            let src = suite::bundled(n.trim_end_matches(".scn"))
                .ok_or_else(|| usage(format!("no bundled scenario {n:?}")))?;
            out!("{src}");
            Ok(())
        }
    }
}

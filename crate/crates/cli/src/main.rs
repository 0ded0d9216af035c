//! `ncindex`: runs scenario configs and acceptance suites.

mod scenario;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ncindex_core::acceptance::{run_suite, SEED};
use ncindex_core::forms::write_csv;
use ncindex_core::linalg::configure_parallelism;

use crate::scenario::{prepare, run, Artifacts, Scenario, ScenarioReport};

const BUNDLED: [(&str, &str); 4] = [
    ("classical_rr_c1.json", include_str!("../scenarios/classical_rr_c1.json")),
    ("flat_z3_cover.json", include_str!("../scenarios/flat_z3_cover.json")),
    ("m2c_center_valued.json", include_str!("../scenarios/m2c_center_valued.json")),
    ("bloch_retraction.json", include_str!("../scenarios/bloch_retraction.json")),
];

#[derive(Parser)]
#[command(name = "ncindex", version, about = "Twisted index computations over finite-dimensional C*-algebras")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario config (a path, or the name of a bundled scenario).
    Run {
        #[arg(long)]
        scenario: String,
        /// Report path; overrides the config's `output.report`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for CSV exports of the Chern form and curvature.
        #[arg(long)]
        csv_dir: Option<PathBuf>,
    },
    /// Run an acceptance group: all, chern, index, cover or modules.
    Suite {
        name: String,
        #[arg(long, default_value_t = SEED)]
        seed: u64,
    },
    /// List the bundled scenarios.
    List,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_parallelism();
    match cli.command {
        Command::List => {
            for (name, text) in BUNDLED {
                let desc = Scenario::parse(text).map(|s| s.description).unwrap_or_default();
                println!("{name:<26} {desc}");
            }
            ExitCode::SUCCESS
        }
        Command::Suite { name, seed } => suite(&name, seed),
        Command::Run { scenario, out, csv_dir } => match run_scenario(&scenario, out, csv_dir) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::from(1),
            Err(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(2)
            }
        },
    }
}

fn suite(name: &str, seed: u64) -> ExitCode {
    let results = match run_suite(name, seed) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    println!("{:<4} {:<28} {:>6} {:>9}  result", "id", "criterion", "cases", "seconds");
    for r in &results {
        println!("{:<4} {:<28} {:>6} {:>9.1}  {}", r.id, r.name, r.cases, r.seconds, if r.passed { "PASS" } else { "FAIL" });
        for m in &r.metrics {
            println!("       {:<40} {:.3e} (limit {:.0e})", m.name, m.worst, m.limit);
        }
        for f in &r.failures {
            println!("       failure: {f}");
        }
    }
    if results.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn load(spec: &str) -> Result<(String, String), String> {
    let path = Path::new(spec);
    if path.exists() {
        return fs::read_to_string(path).map(|t| (spec.to_string(), t)).map_err(|e| format!("{spec}: {e}"));
    }
    let key = if spec.ends_with(".json") { spec.to_string() } else { format!("{spec}.json") };
    BUNDLED
        .iter()
        .find(|(n, _)| *n == key)
        .map(|(n, t)| (format!("bundled:{n}"), t.to_string()))
        .ok_or_else(|| format!("{spec}: no such file or bundled scenario"))
}

fn run_scenario(spec: &str, out: Option<PathBuf>, csv_dir: Option<PathBuf>) -> Result<bool, String> {
    let (origin, text) = load(spec)?;
    let s = Scenario::parse(&text).map_err(|e| format!("{origin}: {e}"))?;
    let prepared = prepare(&s).map_err(|e| format!("{origin}: {e}"))?;
    let (report, artifacts) = run(&s, prepared);
    let out = out
        .or_else(|| s.output.report.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(format!("{}.report.json", s.name)));
    write_report(&out, &report)?;
    if let Some(dir) = csv_dir.or_else(|| s.output.csv_dir.as_ref().map(PathBuf::from)) {
        write_csvs(&dir, &s.name, &artifacts)?;
    }
    summarize(&report, &out);
    Ok(report.passed)
}

fn write_report(path: &Path, report: &ScenarioReport) -> Result<(), String> {
    let mut json = serde_json::to_string_pretty(report).map_err(|e| e.to_string())?;
    json.push('\n');
    fs::write(path, json).map_err(|e| format!("{}: {e}", path.display()))
}

fn write_csvs(dir: &Path, name: &str, a: &Artifacts) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let open = |file: String| {
        let p = dir.join(file);
        fs::File::create(&p).map(BufWriter::new).map_err(|e| format!("{}: {e}", p.display()))
    };
    if let Some(c) = &a.chern {
        c.write_csv(open(format!("{name}_chern.csv"))?).map_err(|e| e.to_string())?;
    }
    if let Some(om) = &a.curvature {
        write_csv(om, open(format!("{name}_curvature.csv"))?).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn summarize(r: &ScenarioReport, out: &Path) {
    println!("scenario {} over {} (N = {}, seed {})", r.scenario, r.algebra, r.grid_n, r.seed);
    if let Some(i) = &r.index {
        println!("  analytic index    {}", i.analytic_index);
        println!("  topological index {}", i.topological_index);
    }
    if let Some(c) = &r.cover {
        println!("  cover k = {}: cover index {}, L2 index {:.6}, twisted index {:.6}", c.k, c.cover_index, c.l2_index, c.flat_twist_index);
    }
    for e in &r.expectations {
        let actual = e.actual.as_ref().map(|a| a.to_string()).unwrap_or_else(|| "unavailable".into());
        println!(
            "  {} {:<28} expected {} got {} (tol {:.0e}; {})",
            if e.passed { "PASS" } else { "FAIL" },
            e.quantity,
            e.expected,
            actual,
            e.tol,
            e.provenance
        );
    }
    for err in &r.errors {
        println!("  ERROR {err}");
    }
    println!("report written to {}", out.display());
}

//! `hsdirscope` — derive descriptor IDs, simulate the directory system,
//! run the tracking detector, and resolve request logs into rankings.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use hsdirscope::consensus::{ArchiveError, ConsensusArchive};
use hsdirscope::detector::{detect, DetectorConfig, Severity, TimeRange};
use hsdirscope::hs_protocol::{descriptor_id, time_period, OnionAddress};
use hsdirscope::popularity::{build_index, read_onion_list, read_request_log, resolve};
use hsdirscope::sim::{run_simulation, SimConfig, SimError};

const EXIT_USAGE: u8 = 64;
const EXIT_VALIDATION: u8 = 65;
const EXIT_FILE: u8 = 66;

const DETECTOR_DEFAULTS: &str = "\
Detector thresholds (overridable via --config, JSON or TOML):
  z_threshold                 3.0        frequency alarm at mu + z*sigma
  ratio_warn                  100        avg_dist/distance NOTE threshold
  ratio_alarm                 10000      avg_dist/distance ALARM threshold
  preposition_min_occurrences 2          occurrences per identity for SUSPICIOUS
  change_lookback             604800     seconds before a period start (7 days)
  fresh_window                82800..97200  first-seen window around 25h
  switch_count_threshold      3          fingerprint switches for SUSPICIOUS
  switch_window               2592000    sliding window seconds (30 days)
  consecutive_min_run         3          run length for SUSPICIOUS (2 is a NOTE)";

#[derive(Parser)]
#[command(
    name = "hsdirscope",
    version,
    about = "Hidden-service directory forensics: descriptor math, simulation, detection, popularity"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print both replica descriptor IDs for an onion address on a date
    Derive(DeriveArgs),
    /// Run the directory simulator and write its output files
    Simulate(SimulateArgs),
    /// Run the five-rule tracking detector over a consensus archive
    Detect(DetectArgs),
    /// Resolve a descriptor-request log into a popularity ranking
    Resolve(ResolveArgs),
    /// Merge a detection report and popularity table into one summary
    Report(ReportArgs),
}

#[derive(Args)]
struct DeriveArgs {
    /// 16-character base32 onion address (without .onion)
    #[arg(long)]
    onion: String,
    /// UTC date, YYYY-MM-DD
    #[arg(long)]
    date: String,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation config, JSON or TOML
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// RNG seed; all simulation randomness flows from this value
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
#[command(after_help = DETECTOR_DEFAULTS)]
struct DetectArgs {
    /// Consensus archive, JSONL (one snapshot per line)
    #[arg(long)]
    archive: PathBuf,
    /// Onion address under analysis
    #[arg(long)]
    onion: String,
    /// Window start, YYYY-MM-DD (inclusive)
    #[arg(long)]
    from: String,
    /// Window end, YYYY-MM-DD (inclusive)
    #[arg(long)]
    to: String,
    /// Detector threshold overrides, JSON or TOML
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for report.json and report.txt
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ResolveArgs {
    /// Request log CSV with desc_id_base32 and count columns
    #[arg(long)]
    log: PathBuf,
    /// Onion list, one 16-char base32 address per line
    #[arg(long)]
    onions: PathBuf,
    /// Window start, YYYY-MM-DD (inclusive)
    #[arg(long)]
    from: String,
    /// Window end, YYYY-MM-DD (inclusive)
    #[arg(long)]
    to: String,
    /// Directory for popularity.csv and popularity.json
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json produced by `detect`
    #[arg(long)]
    detect: PathBuf,
    /// popularity.json produced by `resolve`
    #[arg(long)]
    popularity: PathBuf,
    /// Directory for summary.json, findings_by_rule.csv, ratio_histogram.csv
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        CliError { code: EXIT_VALIDATION, message: message.into() }
    }
    fn file(message: impl Into<String>) -> Self {
        CliError { code: EXIT_FILE, message: message.into() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::file(e.to_string())
    }
}

fn file_ctx(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::file(format!("{}: {e}", path.display()))
}

fn archive_error(path: &Path, e: ArchiveError) -> CliError {
    match e {
        ArchiveError::Io(inner) => file_ctx(path, inner),
        other => CliError::validation(format!("{}: {other}", path.display())),
    }
}

fn parse_date(text: &str) -> Result<u64, CliError> {
    let date = NaiveDate::parse_from_str(text, "%Y-%m-%d")
        .map_err(|_| CliError::validation(format!("invalid date {text:?}, expected YYYY-MM-DD")))?;
    Ok(date.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc().timestamp() as u64)
}

/// Inclusive date pair → half-open unix range covering both full days.
fn parse_range(from: &str, to: &str) -> Result<(u64, u64), CliError> {
    let from_ts = parse_date(from)?;
    let to_ts = parse_date(to)? + 86_400;
    if from_ts >= to_ts {
        return Err(CliError::validation(format!("--from {from} is after --to {to}")));
    }
    Ok((from_ts, to_ts))
}

fn parse_onion(text: &str) -> Result<OnionAddress, CliError> {
    OnionAddress::parse(&text.to_ascii_lowercase())
        .map_err(|e| CliError::validation(e.to_string()))
}

fn read_to_string(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| file_ctx(path, e))
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| file_ctx(path, e))
}

fn create(path: &Path) -> Result<File, CliError> {
    File::create(path).map_err(|e| file_ctx(path, e))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    return ExitCode::SUCCESS;
                }
                _ => EXIT_USAGE,
            };
            eprint!("{e}");
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Derive(args) => cmd_derive(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Detect(args) => cmd_detect(args),
        Command::Resolve(args) => cmd_resolve(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn cmd_derive(args: DeriveArgs) -> Result<u8, CliError> {
    let onion = parse_onion(&args.onion)?;
    let ts = parse_date(&args.date)?;
    let period = time_period(ts, &onion);
    for replica in 0..2u8 {
        let id = descriptor_id(&onion, period, replica)
            .map_err(|e| CliError::validation(e.to_string()))?;
        println!("replica {replica}: {id}");
    }
    Ok(0)
}

fn cmd_simulate(args: SimulateArgs) -> Result<u8, CliError> {
    let text = read_to_string(&args.config)?;
    let mut config = SimConfig::from_str_auto(&text)
        .map_err(|e| CliError::validation(format!("{}: {e}", args.config.display())))?;
    config.seed = args.seed;
    let output = run_simulation(&config).map_err(|e| match e {
        SimError::Validation(problems) => CliError::validation(problems.join("; ")),
        other => CliError::validation(other.to_string()),
    })?;

    std::fs::create_dir_all(&args.out).map_err(|e| file_ctx(&args.out, e))?;
    let path = |name: &str| args.out.join(name);
    output
        .write_archive(create(&path("archive.jsonl"))?)
        .map_err(|e| CliError::file(e.to_string()))?;
    output
        .write_request_log_csv(create(&path("requests.csv"))?)
        .map_err(|e| CliError::file(e.to_string()))?;
    output
        .write_ground_truth_json(create(&path("ground_truth.json"))?)
        .map_err(|e| CliError::file(e.to_string()))?;
    serde_json::to_writer_pretty(create(&path("config.json"))?, &config)
        .map_err(|e| CliError::file(e.to_string()))?;
    serde_json::to_writer_pretty(create(&path("deanon_events.json"))?, &output.deanon_events)
        .map_err(|e| CliError::file(e.to_string()))?;

    println!(
        "simulated {} hours: {} snapshots, {} requests, {} deanonymisation events",
        config.duration_hours,
        output.archive.snapshots().len(),
        output.request_log.len(),
        output.deanon_events.len()
    );
    println!("wrote archive.jsonl, requests.csv, ground_truth.json, config.json, deanon_events.json to {}", args.out.display());
    Ok(0)
}

fn load_detector_config(path: Option<&Path>) -> Result<DetectorConfig, CliError> {
    let Some(path) = path else {
        return Ok(DetectorConfig::default());
    };
    let text = read_to_string(path)?;
    let config: DetectorConfig = serde_json::from_str(&text)
        .or_else(|_| toml::from_str(&text))
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    config.validate().map_err(CliError::validation)?;
    Ok(config)
}

fn cmd_detect(args: DetectArgs) -> Result<u8, CliError> {
    let onion = parse_onion(&args.onion)?;
    let (from, to) = parse_range(&args.from, &args.to)?;
    let config = load_detector_config(args.config.as_deref())?;
    let archive =
        ConsensusArchive::load(open(&args.archive)?).map_err(|e| archive_error(&args.archive, e))?;

    let report = detect(&archive, &onion, TimeRange { from, to }, &config)
        .map_err(|e| CliError::validation(e.to_string()))?;

    std::fs::create_dir_all(&args.out).map_err(|e| file_ctx(&args.out, e))?;
    let json_path = args.out.join("report.json");
    let text_path = args.out.join("report.txt");
    create(&json_path)?.write_all(report.to_json().as_bytes())?;
    create(&text_path)?.write_all(report.to_text().as_bytes())?;
    print!("{}", report.to_text());

    Ok(match report.max_severity() {
        Some(Severity::Alarm) => 2,
        Some(Severity::Suspicious) => 1,
        _ => 0,
    })
}

fn cmd_resolve(args: ResolveArgs) -> Result<u8, CliError> {
    let (from, to) = parse_range(&args.from, &args.to)?;
    let onions = read_onion_list(open(&args.onions)?)
        .map_err(|e| CliError::validation(format!("{}: {e}", args.onions.display())))?;
    let log = read_request_log(open(&args.log)?)
        .map_err(|e| CliError::validation(format!("{}: {e}", args.log.display())))?;
    let index =
        build_index(&onions, from, to).map_err(|e| CliError::validation(e.to_string()))?;
    let table = resolve(&log, &index);

    std::fs::create_dir_all(&args.out).map_err(|e| file_ctx(&args.out, e))?;
    table
        .write_csv(create(&args.out.join("popularity.csv"))?)
        .map_err(|e| CliError::file(e.to_string()))?;
    create(&args.out.join("popularity.json"))?.write_all(table.to_json().as_bytes())?;

    println!(
        "resolved {} requests to {} services; {} unresolved, {} ambiguous",
        table.resolved(),
        table.rows.len(),
        table.unresolved,
        table.ambiguous
    );
    for row in table.rows.iter().take(10) {
        println!("{:>4}  {:>8}  {}", row.rank, row.count, row.onion);
    }
    Ok(0)
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    serde_json::from_str(&read_to_string(path)?)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

/// log10 bucket label for a distance-ratio value; "inf" stays its own bucket.
fn ratio_bucket(ratio: &str) -> String {
    if ratio == "inf" {
        return "inf".to_string();
    }
    let digits = ratio.len() as u32; // decimal integer string
    let lo = 10u64.saturating_pow(digits - 1);
    let hi = 10u64.saturating_pow(digits);
    format!("{lo}-{hi}")
}

fn cmd_report(args: ReportArgs) -> Result<u8, CliError> {
    let detect_report = read_json(&args.detect)?;
    let popularity = read_json(&args.popularity)?;

    let findings = detect_report
        .get("findings")
        .and_then(Value::as_array)
        .cloned()
        .unwrap_or_default();

    let mut by_rule: BTreeMap<(String, String), u64> = BTreeMap::new();
    let mut ratio_buckets: BTreeMap<String, u64> = BTreeMap::new();
    for finding in &findings {
        let rule = finding.get("rule").and_then(Value::as_str).unwrap_or("?").to_string();
        let severity = finding.get("severity").and_then(Value::as_str).unwrap_or("?").to_string();
        *by_rule.entry((rule, severity)).or_default() += 1;
        if let Some(ratio) =
            finding.pointer("/evidence/ratio").and_then(Value::as_str)
        {
            *ratio_buckets.entry(ratio_bucket(ratio)).or_default() += 1;
        }
    }

    std::fs::create_dir_all(&args.out).map_err(|e| file_ctx(&args.out, e))?;

    let mut rule_csv = String::from("rule,severity,count\n");
    for ((rule, severity), count) in &by_rule {
        rule_csv.push_str(&format!("{rule},{severity},{count}\n"));
    }
    create(&args.out.join("findings_by_rule.csv"))?.write_all(rule_csv.as_bytes())?;

    let mut ratio_csv = String::from("ratio_bucket,count\n");
    for (bucket, count) in &ratio_buckets {
        ratio_csv.push_str(&format!("{bucket},{count}\n"));
    }
    create(&args.out.join("ratio_histogram.csv"))?.write_all(ratio_csv.as_bytes())?;

    let top: Vec<&Value> = popularity
        .get("rows")
        .and_then(Value::as_array)
        .map(|rows| rows.iter().take(10).collect())
        .unwrap_or_default();
    let summary = json!({
        "onion": detect_report.get("onion"),
        "window": { "from": detect_report.get("from"), "to": detect_report.get("to") },
        "finding_count": findings.len(),
        "findings_by_rule": by_rule
            .iter()
            .map(|((rule, severity), count)| json!({
                "rule": rule, "severity": severity, "count": count
            }))
            .collect::<Vec<_>>(),
        "relay_scores": detect_report.get("relay_scores"),
        "popularity_top": top,
        "unresolved_requests": popularity.get("unresolved"),
    });
    create(&args.out.join("summary.json"))?
        .write_all(serde_json::to_string_pretty(&summary).expect("serializes").as_bytes())?;

    println!(
        "summary: {} findings across {} rule/severity buckets; wrote summary.json, findings_by_rule.csv, ratio_histogram.csv to {}",
        findings.len(),
        by_rule.len(),
        args.out.display()
    );
    Ok(0)
}

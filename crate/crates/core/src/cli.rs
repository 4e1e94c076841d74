//! Command-line experiment runner: `run`, `compare`, `preset`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::federation::{
    comm_savings, run_federation, shared_tensors, CommReport, ExperimentRecord, FederationConfig, SavingsMode,
};
use crate::presets::preset;
use crate::tensorio::{encode_checkpoint, NamedTensor};

#[derive(Debug, Parser)]
#[command(name = "geofed", version, about = "Federated multimodal alignment simulator")]
pub struct Cli {
    /// Override the global seed of every config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for `run`; must not exist yet.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a federation from a TOML config and write its artifacts.
    Run { config: PathBuf },
    /// Compare the summaries of two completed runs.
    Compare { a: PathBuf, b: PathBuf },
    /// Print or write the configs of a named scenario.
    Preset {
        name: String,
        /// Directory to write one `<name>_<label>.toml` per config.
        #[arg(long)]
        emit: Option<PathBuf>,
    },
}

#[derive(Debug, Serialize)]
pub struct ExperimentManifest {
    pub config_source: String,
    pub config_sha256: String,
    pub binary_sha256: String,
    pub seed: u64,
    pub node_seeds: Vec<u64>,
    pub output_dir: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// SHA-256 of every other file in the run directory.
    pub files: Vec<(String, String)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Parses arguments and runs; errors become a message on stderr and a
/// nonzero exit code (2 for config errors, 3 for training failures).
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Training { .. } | Error::Node { .. } => 3,
                _ => 1,
            })
        }
    }
}

/// Runs one parsed command and returns what it would print.
pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Run { config } => {
            let out = cli
                .out
                .clone()
                .ok_or_else(|| Error::Config("run needs --out DIR".into()))?;
            let text = std::fs::read_to_string(config)?;
            let mut cfg = FederationConfig::from_toml(&text)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let source = config.display().to_string();
            run_to_dir(&cfg, &out, &source)
        }
        Command::Compare { a, b } => compare(a, b),
        Command::Preset { name, emit } => {
            let mut p = preset(name)?;
            if let Some(seed) = cli.seed {
                p = p.with_seed(seed);
            }
            let mut text = String::new();
            match emit {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    for (label, cfg) in &p.configs {
                        let path = dir.join(format!("{}_{label}.toml", p.name));
                        if path.exists() {
                            return Err(Error::Config(format!("{} already exists", path.display())));
                        }
                        std::fs::write(&path, cfg.to_toml()?)?;
                        writeln!(text, "{}", path.display()).expect("write to String");
                    }
                }
                None => {
                    for (label, cfg) in &p.configs {
                        writeln!(text, "# --- {}_{label} ---\n{}", p.name, cfg.to_toml()?).expect("write to String");
                    }
                }
            }
            Ok(text)
        }
    }
}

/// Runs `cfg` and writes `config.toml`, `metrics.jsonl`, `summary.json`,
/// `checkpoint.bin` and `manifest.json` into a fresh directory.
pub fn run_to_dir(cfg: &FederationConfig, out: &Path, config_source: &str) -> Result<String> {
    cfg.validate()?;
    if out.exists() {
        return Err(Error::Config(format!(
            "output directory {} already exists; runs never overwrite",
            out.display()
        )));
    }
    let started = unix_now();
    let config_text = cfg.to_toml()?;
    let mut files: Vec<(String, Vec<u8>)> = vec![("config.toml".into(), config_text.clone().into_bytes())];
    let report;
    if cfg.analytic_only {
        let comm = CommReport::for_config(cfg)?;
        report = format_analytic(cfg, &comm)?;
        let summary = serde_json::json!({
            "analytic_only": true,
            "d_model": cfg.model.d_model,
            "lora_rank": cfg.model.lora_rank,
            "per_matrix_savings_b_only": comm_savings(cfg.model.d_model, cfg.model.lora_rank, SavingsMode::BOnly)?,
            "per_matrix_savings_b_and_a": comm_savings(cfg.model.d_model, cfg.model.lora_rank, SavingsMode::BAndA)?,
            "comm": comm,
        });
        files.push(("metrics.jsonl".into(), Vec::new()));
        files.push(("summary.json".into(), pretty(&summary)?.into_bytes()));
    } else {
        let rec = run_federation(cfg)?;
        report = format_record(&rec);
        files.push(("metrics.jsonl".into(), rec.metrics_jsonl()?.into_bytes()));
        files.push(("summary.json".into(), rec.summary_json()?.into_bytes()));
        files.push(("checkpoint.bin".into(), checkpoint(&rec)?));
    }
    std::fs::create_dir_all(out)?;
    for (name, bytes) in &files {
        std::fs::write(out.join(name), bytes)?;
    }
    let exe = std::env::current_exe().and_then(std::fs::read).unwrap_or_default();
    let manifest = ExperimentManifest {
        config_source: config_source.to_string(),
        config_sha256: sha256_hex(config_text.as_bytes()),
        binary_sha256: sha256_hex(&exe),
        seed: cfg.seed,
        node_seeds: (0..cfg.k()).map(|i| cfg.node_seed(i)).collect(),
        output_dir: out.display().to_string(),
        started_unix: started,
        finished_unix: unix_now(),
        files: files.iter().map(|(n, b)| (n.clone(), sha256_hex(b))).collect(),
    };
    std::fs::write(out.join("manifest.json"), pretty(&manifest)?)?;
    Ok(report)
}

fn pretty<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Evaluation(e.to_string()))
}

/// Materialized transformer, shared adapter state and each node's local adapter.
fn checkpoint(rec: &ExperimentRecord) -> Result<Vec<u8>> {
    let dense = rec.server.materialize()?;
    let mut tensors: Vec<NamedTensor> = dense
        .theta()
        .into_iter()
        .map(|(n, p)| NamedTensor::from_matrix(format!("materialized.{n}"), &p.value))
        .collect();
    tensors.extend(shared_tensors(&rec.server.model));
    for n in &rec.nodes {
        tensors.push(NamedTensor::from_matrix(
            format!("adapter.node{}", n.id),
            &n.adapter.w.value,
        ));
    }
    Ok(encode_checkpoint(&tensors))
}

fn format_record(rec: &ExperimentRecord) -> String {
    let mut s = String::new();
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    writeln!(s, "{:<28}{:>12}{:>12}", "metric", "init", "final").unwrap();
    writeln!(
        s,
        "{:<28}{:>12}{:>12}",
        "cross-modal CKA",
        fmt(rec.init.mean_cross_modal_cka),
        fmt(rec.final_eval.mean_cross_modal_cka)
    )
    .unwrap();
    writeln!(
        s,
        "{:<28}{:>12.4}{:>12.4}",
        "task accuracy", rec.init.mean_accuracy, rec.final_eval.mean_accuracy
    )
    .unwrap();
    writeln!(
        s,
        "{:<28}{:>12}{:>12}",
        "anchor retrieval top-1",
        fmt(rec.init.retrieval_top1),
        fmt(rec.final_eval.retrieval_top1)
    )
    .unwrap();
    writeln!(s, "uplink bytes   {}", rec.ledger.total_uplink).unwrap();
    writeln!(s, "downlink bytes {}", rec.ledger.total_downlink).unwrap();
    s
}

fn format_analytic(cfg: &FederationConfig, comm: &CommReport) -> Result<String> {
    let mut s = String::new();
    let (d, r) = (cfg.model.d_model, cfg.model.lora_rank);
    writeln!(s, "d_model={d} r={r}").unwrap();
    writeln!(
        s,
        "per-matrix savings, B only:  {:.4}%",
        100.0 * comm_savings(d, r, SavingsMode::BOnly)?
    )
    .unwrap();
    writeln!(
        s,
        "per-matrix savings, B and A: {:.4}%",
        100.0 * comm_savings(d, r, SavingsMode::BAndA)?
    )
    .unwrap();
    writeln!(s, "update message bytes:      {}", comm.update_bytes).unwrap();
    writeln!(s, "full-model update bytes:   {}", comm.full_update_bytes).unwrap();
    writeln!(s, "whole-message savings:     {:.4}%", 100.0 * comm.message_savings).unwrap();
    Ok(s)
}

fn read_run(dir: &Path) -> Result<(FederationConfig, Value)> {
    let cfg_text = std::fs::read_to_string(dir.join("config.toml"))?;
    let cfg: FederationConfig = toml::from_str(&cfg_text).map_err(|e| Error::Comparison(e.to_string()))?;
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json"))?)
        .map_err(|e| Error::Comparison(e.to_string()))?;
    if summary.get("analytic_only").is_some() {
        return Err(Error::Comparison(format!("{} is an analytic-only run", dir.display())));
    }
    Ok((cfg, summary))
}

fn number(v: &Value, path: &[&str]) -> Option<f64> {
    path.iter().try_fold(v, |v, k| v.get(k))?.as_f64()
}

/// Per-metric deltas `b − a` between two completed runs.
pub fn compare(a: &Path, b: &Path) -> Result<String> {
    let (ca, sa) = read_run(a)?;
    let (cb, sb) = read_run(b)?;
    let shape = |c: &FederationConfig| {
        (
            c.nodes.iter().map(|n| n.modality).collect::<Vec<_>>(),
            c.model.n_classes,
            c.model.d_model,
            c.model.seq_len,
            c.anchor_count(),
        )
    };
    if shape(&ca) != shape(&cb) {
        return Err(Error::Comparison(
            "runs differ in node modalities, model width, classes or anchor count".into(),
        ));
    }
    let rows: [(&str, &[&str]); 6] = [
        ("final cross-modal CKA", &["final", "mean_cross_modal_cka"]),
        ("final task accuracy", &["final", "mean_accuracy"]),
        ("final anchor retrieval", &["final", "retrieval_top1"]),
        ("total uplink bytes", &["total_uplink_bytes"]),
        ("total downlink bytes", &["total_downlink_bytes"]),
        ("update message bytes", &["comm", "update_bytes"]),
    ];
    let mut s = String::new();
    writeln!(s, "{:<26}{:>16}{:>16}{:>16}", "metric", "a", "b", "b - a").unwrap();
    for (name, path) in rows {
        match (number(&sa, path), number(&sb, path)) {
            (Some(x), Some(y)) => writeln!(s, "{name:<26}{x:>16.6}{y:>16.6}{:>16.6}", y - x).unwrap(),
            _ => writeln!(s, "{name:<26}{:>16}{:>16}{:>16}", "n/a", "n/a", "n/a").unwrap(),
        }
    }
    if let (Some(ua), Some(ub), Some(ma), Some(mb)) = (
        number(&sa, &["total_uplink_bytes"]),
        number(&sb, &["total_uplink_bytes"]),
        number(&sa, &["comm", "update_bytes"]),
        number(&sb, &["comm", "update_bytes"]),
    ) {
        if ua > 0.0 && ma > 0.0 {
            writeln!(s, "uplink ratio b/a: ledger {:.6}, analytic {:.6}", ub / ua, mb / ma).unwrap();
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_preset_is_a_config_error() {
        let cli = Cli::try_parse_from(["geofed", "preset", "bogus"]).unwrap();
        assert!(matches!(execute(&cli), Err(Error::Config(_))));
    }

    #[test]
    fn run_requires_out() {
        let cli = Cli::try_parse_from(["geofed", "run", "x.toml"]).unwrap();
        assert!(execute(&cli).is_err());
    }

    #[test]
    fn global_flags_parse_after_subcommand() {
        let cli = Cli::try_parse_from(["geofed", "preset", "comm_audit", "--seed", "9", "--emit", "d"]).unwrap();
        assert_eq!(cli.seed, Some(9));
        assert!(matches!(cli.command, Command::Preset { .. }));
    }
}

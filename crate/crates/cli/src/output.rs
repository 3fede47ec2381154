//! Writing experiment outputs. Every file carries the config hash and seed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use bnprepair::rng::RNG_NAME;
use serde_json::json;

use crate::error::CliError;
use crate::experiments::{ExperimentOutput, Series};

pub const LOG_BASE: &str = "e";

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::file(path, e))
}

pub fn to_json_pretty<T: serde::Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

/// CSV with `# key=value` provenance lines before the header.
pub fn csv_bytes(provenance: &[(&str, String)], headers: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    for (k, v) in provenance {
        writeln!(buf, "# {k}={v}").expect("write to memory");
    }
    let mut w = csv::Writer::from_writer(buf);
    let io = |e: csv::Error| CliError::Core(e.into());
    w.write_record(headers).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.into_inner().map_err(|e| CliError::Usage(format!("csv flush failed: {e}")))
}

fn series_bytes(out: &ExperimentOutput, s: &Series) -> Result<Vec<u8>, CliError> {
    let prov = provenance(out);
    csv_bytes(&prov, &s.headers, &s.rows)
}

fn provenance(out: &ExperimentOutput) -> Vec<(&'static str, String)> {
    vec![
        ("experiment", out.config.experiment.to_string()),
        ("config_hash", out.config_hash.clone()),
        ("seed", out.config.seed.to_string()),
    ]
}

fn summary_csv(out: &ExperimentOutput) -> Result<Vec<u8>, CliError> {
    let headers: Vec<String> =
        ["group", "variant", "point", "metric", "n", "mean", "std", "median", "min", "max", "trials_ok", "trials_failed"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    let mut rows = Vec::new();
    for r in &out.summary.rows {
        for (metric, st) in &r.stats {
            rows.push(vec![
                r.group.clone().unwrap_or_default(),
                r.variant.clone(),
                r.point.map_or(String::new(), |p| p.to_string()),
                metric.clone(),
                st.n.to_string(),
                st.mean.to_string(),
                st.std.to_string(),
                st.median.to_string(),
                st.min.to_string(),
                st.max.to_string(),
                r.trials_ok.to_string(),
                r.trials_failed.to_string(),
            ]);
        }
    }
    csv_bytes(&provenance(out), &headers, &rows)
}

/// Writes `config.json`, `records.jsonl`, `summary.json`, `summary.csv`
/// and one CSV per series into `dir`.
pub fn write_experiment(dir: &Path, out: &ExperimentOutput) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<(), CliError> {
        let p = dir.join(name);
        write_file(&p, &bytes)?;
        written.push(p);
        Ok(())
    };
    let mut cfg = out.config.clone();
    cfg.out = None;
    let h = cfg.pipeline.histogram;
    put(
        "config.json",
        to_json_pretty(&json!({
            "config_hash": out.config_hash,
            "seed": out.config.seed,
            "rng": RNG_NAME,
            "log_base": LOG_BASE,
            "estimator": { "kind": "histogram", "bins": h.bins, "smoothing": h.smoothing },
            "version": env!("CARGO_PKG_VERSION"),
            "config": cfg,
        }))?,
    )?;
    let mut jsonl = Vec::new();
    for r in &out.records {
        serde_json::to_writer(&mut jsonl, r)?;
        jsonl.push(b'\n');
    }
    put("records.jsonl", jsonl)?;
    put(
        "summary.json",
        to_json_pretty(&json!({
            "experiment": out.config.experiment,
            "config_hash": out.config_hash,
            "seed": out.config.seed,
            "log_base": LOG_BASE,
            "summary": out.summary,
        }))?,
    )?;
    put("summary.csv", summary_csv(out)?)?;
    for s in &out.series {
        put(&format!("{}.csv", s.name), series_bytes(out, s)?)?;
    }
    Ok(written)
}

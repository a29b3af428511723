//! Trace persistence, run comparison and plot-ready series.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{ControllerRecord, CycleRecord, RecomputeRecord, SimSummary, SimTrace};
use crate::error::{Error, Result};
use crate::model::{read_json, write_file};

pub const TRACE_FILE: &str = "trace.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONTROLLER_FILE: &str = "controller.jsonl";
pub const RECOMPUTE_FILE: &str = "recompute.jsonl";
pub const SERIES_FILE: &str = "series.csv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e.to_string()))?;
        out.push(item);
    }
    Ok(out)
}

/// Pretty JSON with a trailing newline, so reruns are byte-identical.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("plain data serializes");
    bytes.push(b'\n');
    bytes
}

/// Writes the per-cycle trace, summary, controller log, recompute log and
/// the plot series into `dir`.
pub fn write_trace(dir: &Path, trace: &SimTrace) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_jsonl(&dir.join(TRACE_FILE), &trace.records)?;
    write_file(&dir.join(SUMMARY_FILE), &to_json_bytes(&trace.summary))?;
    write_jsonl(&dir.join(CONTROLLER_FILE), &trace.controller_log)?;
    write_jsonl(&dir.join(RECOMPUTE_FILE), &trace.recomputes)?;
    write_file(&dir.join(SERIES_FILE), series_csv(trace)?.as_bytes())
}

/// Reads a directory written by [`write_trace`]. Missing logs read as empty.
pub fn read_trace(dir: &Path) -> Result<SimTrace> {
    let records: Vec<CycleRecord> = read_jsonl(&dir.join(TRACE_FILE))?;
    let summary: SimSummary = read_json(&dir.join(SUMMARY_FILE))?;
    let optional = |name: &str| dir.join(name).exists().then(|| dir.join(name));
    let controller_log: Vec<ControllerRecord> = match optional(CONTROLLER_FILE) {
        Some(p) => read_jsonl(&p)?,
        None => Vec::new(),
    };
    let recomputes: Vec<RecomputeRecord> = match optional(RECOMPUTE_FILE) {
        Some(p) => read_jsonl(&p)?,
        None => Vec::new(),
    };
    if records.len() as u64 != summary.total_cycles {
        return Err(Error::validation(format!(
            "{}: {} records but summary reports {} cycles",
            dir.display(),
            records.len(),
            summary.total_cycles
        )));
    }
    Ok(SimTrace {
        records,
        summary,
        controller_log,
        recomputes,
    })
}

/// Nearest-rank percentiles of the per-cycle worst IR-drop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
}

pub fn ir_drop_percentiles(trace: &SimTrace) -> Percentiles {
    let mut v: Vec<f64> = trace.records.iter().map(|r| r.max_ir_drop).collect();
    v.sort_by(f64::total_cmp);
    let rank = |p: f64| {
        if v.is_empty() {
            0.0
        } else {
            let i = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
            v[i]
        }
    };
    Percentiles {
        p50: rank(0.50),
        p95: rank(0.95),
        p99: rank(0.99),
        max: rank(1.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub total_cycles: u64,
    pub wall_time: f64,
    pub energy: f64,
    pub effective_tops: f64,
    pub failure_count: u64,
    pub ir_drop: Percentiles,
}

impl RunStats {
    pub fn of(trace: &SimTrace) -> Self {
        let s = &trace.summary;
        Self {
            total_cycles: s.total_cycles,
            wall_time: s.wall_time,
            energy: s.energy,
            effective_tops: s.effective_tops,
            failure_count: s.failure_count,
            ir_drop: ir_drop_percentiles(trace),
        }
    }
}

/// Differences `b - a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub ir_drop_p50: f64,
    pub ir_drop_p95: f64,
    pub ir_drop_p99: f64,
    pub ir_drop_max: f64,
    pub energy: f64,
    pub effective_tops: f64,
    pub wall_time: f64,
    pub total_cycles: i64,
    pub failure_count: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub workload: String,
    pub a: RunStats,
    pub b: RunStats,
    pub delta: Deltas,
}

/// Compares two runs of the same workload.
pub fn compare_runs(a: &SimTrace, b: &SimTrace) -> Result<RunComparison> {
    if a.summary.workload != b.summary.workload {
        return Err(Error::validation(format!(
            "workload mismatch: {} vs {}",
            a.summary.workload, b.summary.workload
        )));
    }
    let (sa, sb) = (RunStats::of(a), RunStats::of(b));
    Ok(RunComparison {
        workload: a.summary.workload.clone(),
        a: sa,
        b: sb,
        delta: Deltas {
            ir_drop_p50: sb.ir_drop.p50 - sa.ir_drop.p50,
            ir_drop_p95: sb.ir_drop.p95 - sa.ir_drop.p95,
            ir_drop_p99: sb.ir_drop.p99 - sa.ir_drop.p99,
            ir_drop_max: sb.ir_drop.max - sa.ir_drop.max,
            energy: sb.energy - sa.energy,
            effective_tops: sb.effective_tops - sa.effective_tops,
            wall_time: sb.wall_time - sa.wall_time,
            total_cycles: sb.total_cycles as i64 - sa.total_cycles as i64,
            failure_count: sb.failure_count as i64 - sa.failure_count as i64,
        },
    })
}

fn csv_string(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).map_err(|e| Error::validation(format!("csv: {e}")))?;
    let bytes = w.into_inner().map_err(|e| Error::validation(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub const SERIES_HEADER: [&str; 10] = [
    "cycle",
    "period",
    "min_voltage",
    "min_supply",
    "max_ir_drop",
    "mean_rtog",
    "max_rtog",
    "current_proxy",
    "energy",
    "failures",
];

/// One row per cycle. `current_proxy` is the summed toggle rate over all
/// macros, which scales with the switching current. An empty trace yields
/// the header alone.
pub fn series_csv(trace: &SimTrace) -> Result<String> {
    csv_string(|w| {
        w.write_record(SERIES_HEADER)?;
        for r in &trace.records {
            let n = r.rtog.len().max(1) as f64;
            let sum: f64 = r.rtog.iter().sum();
            let fmin = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::INFINITY, f64::min);
            w.write_record([
                r.cycle.to_string(),
                r.period.to_string(),
                fmin(&mut r.groups.iter().map(|g| g.voltage)).to_string(),
                fmin(&mut r.supply.iter().copied()).to_string(),
                r.max_ir_drop.to_string(),
                (sum / n).to_string(),
                r.rtog.iter().copied().fold(0.0, f64::max).to_string(),
                sum.to_string(),
                r.energy.to_string(),
                r.failures.len().to_string(),
            ])?;
        }
        Ok(())
    })
}

/// Per-cycle ablation series of two runs joined on the cycle number. Cycles
/// past the end of the shorter run leave its columns blank.
pub fn ablation_csv(a: &SimTrace, b: &SimTrace) -> Result<String> {
    let n = a.records.len().max(b.records.len());
    csv_string(|w| {
        w.write_record([
            "cycle",
            "a_max_ir_drop",
            "b_max_ir_drop",
            "delta_max_ir_drop",
            "a_energy",
            "b_energy",
            "delta_energy",
        ])?;
        for i in 0..n {
            let (ra, rb) = (a.records.get(i), b.records.get(i));
            let cell = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            let drop = |r: Option<&CycleRecord>| r.map(|r| r.max_ir_drop);
            let energy = |r: Option<&CycleRecord>| r.map(|r| r.energy);
            let diff = |x: Option<f64>, y: Option<f64>| x.zip(y).map(|(x, y)| y - x);
            w.write_record([
                i.to_string(),
                cell(drop(ra)),
                cell(drop(rb)),
                cell(diff(drop(ra), drop(rb))),
                cell(energy(ra)),
                cell(energy(rb)),
                cell(diff(energy(ra), energy(rb))),
            ])?;
        }
        Ok(())
    })
}

/// `metric,a,b,delta` rows of a comparison.
pub fn comparison_csv(c: &RunComparison) -> Result<String> {
    let rows: [(&str, f64, f64, f64); 9] = [
        ("ir_drop_p50", c.a.ir_drop.p50, c.b.ir_drop.p50, c.delta.ir_drop_p50),
        ("ir_drop_p95", c.a.ir_drop.p95, c.b.ir_drop.p95, c.delta.ir_drop_p95),
        ("ir_drop_p99", c.a.ir_drop.p99, c.b.ir_drop.p99, c.delta.ir_drop_p99),
        ("ir_drop_max", c.a.ir_drop.max, c.b.ir_drop.max, c.delta.ir_drop_max),
        ("energy", c.a.energy, c.b.energy, c.delta.energy),
        ("effective_tops", c.a.effective_tops, c.b.effective_tops, c.delta.effective_tops),
        ("wall_time", c.a.wall_time, c.b.wall_time, c.delta.wall_time),
        ("total_cycles", c.a.total_cycles as f64, c.b.total_cycles as f64, c.delta.total_cycles as f64),
        ("failure_count", c.a.failure_count as f64, c.b.failure_count as f64, c.delta.failure_count as f64),
    ];
    csv_string(|w| {
        w.write_record(["metric", "a", "b", "delta"])?;
        for (name, a, b, d) in rows {
            w.write_record([name.to_string(), a.to_string(), b.to_string(), d.to_string()])?;
        }
        Ok(())
    })
}

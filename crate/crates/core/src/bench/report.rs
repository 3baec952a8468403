//! Report files: a CSV table, the full JSON report and the JSONL trace log.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::metrics::{SuiteReport, TraceEvent};

pub const CSV_FILE: &str = "report.csv";
pub const JSON_FILE: &str = "report.json";
pub const TRACE_FILE: &str = "traces.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
    Traces,
}

/// One CSV row per condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub condition: String,
    pub grid: String,
    pub method: String,
    pub speed: String,
    pub speed_m_min: f64,
    pub variant: String,
    pub delta: f64,
    pub k: usize,
    pub pf: usize,
    pub fb: bool,
    pub trials: usize,
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "Lat_ms")]
    pub lat_ms: f64,
    pub per_action_ms: f64,
    #[serde(rename = "FR")]
    pub fr: f64,
    #[serde(rename = "Acc")]
    pub acc: f64,
    pub speedup: f64,
}

pub const CSV_HEADER: [&str; 17] = [
    "condition",
    "grid",
    "method",
    "speed",
    "speed_m_min",
    "variant",
    "delta",
    "k",
    "pf",
    "fb",
    "trials",
    "SR",
    "Lat_ms",
    "per_action_ms",
    "FR",
    "Acc",
    "speedup",
];

pub fn csv_rows(report: &SuiteReport) -> Vec<CsvRow> {
    report
        .conditions
        .iter()
        .map(|c| CsvRow {
            condition: c.spec.name.clone(),
            grid: c.spec.grid.clone(),
            method: c.spec.method.label(),
            speed: c.spec.speed_name.clone(),
            speed_m_min: c.spec.speed,
            variant: c.spec.variant.name().to_string(),
            delta: c.spec.policy.verifier.delta,
            k: c.spec.policy.verifier.timesteps.len(),
            pf: c.spec.policy.refresh_every,
            fb: c.spec.policy.phase_fallback,
            trials: c.trials,
            sr: c.sr,
            lat_ms: c.lat_ms,
            per_action_ms: c.per_action_ms,
            fr: c.fr,
            acc: c.acc,
            speedup: c.speedup,
        })
        .collect()
}

pub fn write_csv(report: &SuiteReport, w: impl Write) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(CSV_HEADER)?;
    for row in csv_rows(report) {
        wr.serialize(row)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv(r: impl std::io::Read) -> Result<Vec<CsvRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::invalid("report CSV", format!("unexpected header {header:?}")));
    }
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_traces(events: &[TraceEvent], w: impl Write) -> Result<()> {
    let mut w = BufWriter::new(w);
    for ev in events {
        serde_json::to_writer(&mut w, ev)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_traces(r: impl std::io::Read) -> Result<Vec<TraceEvent>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str(&line)
            .map_err(|e| Error::invalid("trace log", format!("line {}: {e}", i + 1)))?;
        out.push(ev);
    }
    Ok(out)
}

pub fn read_json(path: &Path) -> Result<SuiteReport> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Writes the requested files into `dir` and returns their paths.
pub fn emit_report(report: &SuiteReport, traces: &[TraceEvent], dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for f in formats {
        let path = dir.join(match f {
            Format::Csv => CSV_FILE,
            Format::Json => JSON_FILE,
            Format::Traces => TRACE_FILE,
        });
        let file = File::create(&path)?;
        match f {
            Format::Csv => write_csv(report, file)?,
            Format::Json => {
                let mut w = BufWriter::new(file);
                serde_json::to_writer_pretty(&mut w, report)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
            Format::Traces => write_traces(traces, file)?,
        }
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::config::{Config, MethodSpec};
    use crate::bench::harness::condition;
    use crate::bench::metrics::{ConditionReport, SuiteHeader};
    use crate::envsim::{ObjectVariant, Outcome};
    use crate::runtime::{EpisodeStats, RoundPath, RoundRecord, RuntimePolicy};

    fn header() -> SuiteHeader {
        SuiteHeader {
            fingerprint: Config::default().fingerprint(),
            code_version: "test".into(),
            seeds: vec![1, 2],
            baseline: "full_only/torch".into(),
            baseline_lat_ms: 58.0,
        }
    }

    fn rec(round: usize, path: RoundPath, n: usize, ms: f64) -> RoundRecord {
        RoundRecord {
            round,
            tick: round as u64 * 13,
            path,
            executed_prefix: n,
            latency_ms: ms,
            stall_ticks: 1,
            velocity_evals: 2,
            cache_round: 0,
            verifier: None,
        }
    }

    fn sample() -> (SuiteReport, Vec<TraceEvent>) {
        let m = MethodSpec::parse("flash/flash_triton").unwrap();
        let spec = condition("table5", "c0".into(), &m, "demo", 6.0, ObjectVariant::Small, RuntimePolicy::default());
        let t1 = vec![rec(0, RoundPath::Full, 12, 39.7), rec(1, RoundPath::FlashAccepted, 7, 7.8)];
        let t2 = vec![rec(0, RoundPath::Full, 12, 39.7), rec(1, RoundPath::FlashRejectedFallback, 12, 47.5)];
        let e1 = EpisodeStats::from_trace(1, Outcome::Success, 30, &t1, 12);
        let e2 = EpisodeStats::from_trace(2, Outcome::MissedGrasp, 40, &t2, 12);
        let report = SuiteReport {
            header: header(),
            conditions: vec![ConditionReport::aggregate(spec.clone(), vec![e1, e2], 58.0)],
        };
        let mut ev = vec![TraceEvent::Suite(header()), TraceEvent::Condition { index: 0, spec }];
        for (seed, t, o, ticks) in [(1, &t1, Outcome::Success, 30), (2, &t2, Outcome::MissedGrasp, 40)] {
            ev.extend(t.iter().map(|r| TraceEvent::Round { condition: 0, seed, record: r.clone() }));
            ev.push(TraceEvent::Episode { condition: 0, seed, outcome: o, ticks });
        }
        (report, ev)
    }

    #[test]
    fn aggregates_and_speedup() {
        let (r, _) = sample();
        let c = &r.conditions[0];
        assert_eq!(c.sr, 50.0);
        assert_eq!(c.fr, 0.25);
        assert!((c.lat_ms - (39.7 * 2.0 + 7.8 + 47.5) / 4.0).abs() < 1e-12);
        assert!((c.speedup - 58.0 / c.lat_ms).abs() < 1e-12);
        assert!((c.acc - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn empty_report_gives_header_only_csv_and_empty_json_array() {
        let r = SuiteReport { header: header(), conditions: vec![] };
        let mut buf = Vec::new();
        write_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.trim_end(), CSV_HEADER.join(","));
        assert!(read_csv(text.as_bytes()).unwrap().is_empty());
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["conditions"], serde_json::json!([]));
    }

    #[test]
    fn csv_round_trip() {
        let (r, _) = sample();
        let mut buf = Vec::new();
        write_csv(&r, &mut buf).unwrap();
        let rows = read_csv(buf.as_slice()).unwrap();
        let want = csv_rows(&r);
        assert_eq!(rows.len(), 1);
        for (a, b) in rows.iter().zip(&want) {
            for (x, y) in [(a.sr, b.sr), (a.lat_ms, b.lat_ms), (a.per_action_ms, b.per_action_ms), (a.fr, b.fr), (a.acc, b.acc), (a.speedup, b.speedup)] {
                assert!((x - y).abs() <= 1e-9);
            }
            assert_eq!(a.condition, b.condition);
        }
    }

    #[test]
    fn traces_reaggregate_exactly() {
        let (r, ev) = sample();
        let mut buf = Vec::new();
        write_traces(&ev, &mut buf).unwrap();
        let back = read_traces(buf.as_slice()).unwrap();
        assert_eq!(back, ev);
        let re = crate::bench::metrics::reaggregate(&back).unwrap();
        assert_eq!(re, r);
    }

    #[test]
    fn emit_writes_requested_files() {
        let (r, ev) = sample();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&r, &ev, dir.path(), &[Format::Csv, Format::Json, Format::Traces]).unwrap();
        assert_eq!(files.len(), 3);
        assert_eq!(read_json(&dir.path().join(JSON_FILE)).unwrap(), r);
    }

    #[test]
    fn orphan_rounds_are_rejected() {
        let (_, mut ev) = sample();
        ev.pop();
        assert!(crate::bench::metrics::reaggregate(&ev).is_err());
    }
}

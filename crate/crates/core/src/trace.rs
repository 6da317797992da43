//! Simulation traces and their CSV / JSON-lines encodings.
//!
//! Column order and field names are frozen in `schema/trace_v1.toml`.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::Result;

pub const SCHEMA_VERSION: u32 = 1;
pub const SCHEMA: &str = include_str!("../schema/trace_v1.toml");

/// One recorded sample.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub t: f64,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub qddot: Vec<f64>,
    pub f: Vec<f64>,
    pub u: Vec<f64>,
    pub fc: Vec<f64>,
    pub kinetic: f64,
    pub potential: f64,
    pub total: f64,
    pub lyapunov: Option<f64>,
    pub rank: usize,
    pub cond: f64,
    pub mu: f64,
    /// `‖A q̇‖`.
    pub drift_velocity: f64,
    /// `‖Φ(q)‖`, when the system has a position residual.
    pub drift_position: Option<f64>,
}

impl TraceRecord {
    pub fn q_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.q)
    }

    pub fn qdot_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.qdot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankEventCause {
    /// A scheduled change of the active constraint set.
    Topology,
    /// The rank of `A` changed along the motion (singular configuration).
    Configuration,
}

/// A change in `rank(A)` or in the active constraint set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RankEvent {
    pub t: f64,
    pub step: usize,
    pub cause: RankEventCause,
    pub rank_before: usize,
    pub rank_after: usize,
    /// Total energy lost at the event (inelastic capture); zero for configuration events.
    pub energy_drop: f64,
    /// Virtual mass in effect after the event.
    pub mu: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SimulationTrace {
    pub system: String,
    pub dof: usize,
    pub inputs: usize,
    pub records: Vec<TraceRecord>,
    pub events: Vec<RankEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Csv,
    JsonLines,
}

impl std::str::FromStr for TraceFormat {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TraceFormat::Csv),
            "jsonl" | "json-lines" => Ok(TraceFormat::JsonLines),
            other => Err(crate::Error::InvalidParameter(format!("unknown trace format {other:?}"))),
        }
    }
}

/// CSV header for `n` coordinates and `k` inputs.
pub fn csv_columns(n: usize, k: usize) -> Vec<String> {
    let mut cols = vec!["step".to_string(), "t".to_string()];
    for prefix in ["q", "qdot", "qddot", "f"] {
        cols.extend((0..n).map(|i| format!("{prefix}{i}")));
    }
    cols.extend((0..k).map(|j| format!("u{j}")));
    cols.extend((0..n).map(|i| format!("fc{i}")));
    for c in [
        "kinetic",
        "potential",
        "total",
        "lyapunov",
        "rank",
        "cond",
        "mu",
        "drift_velocity",
        "drift_position",
    ] {
        cols.push(c.to_string());
    }
    cols
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

impl SimulationTrace {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", csv_columns(self.dof, self.inputs).join(","))?;
        for r in &self.records {
            let mut fields = vec![r.step.to_string(), num(r.t)];
            for v in [&r.q, &r.qdot, &r.qddot, &r.f, &r.u, &r.fc] {
                fields.extend(v.iter().copied().map(num));
            }
            fields.extend([
                num(r.kinetic),
                num(r.potential),
                num(r.total),
                opt(r.lyapunov),
                r.rank.to_string(),
                num(r.cond),
                num(r.mu),
                num(r.drift_velocity),
                opt(r.drift_position),
            ]);
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| crate::Error::Parse(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, format: TraceFormat, out: W) -> Result<()> {
        match format {
            TraceFormat::Csv => self.write_csv(out),
            TraceFormat::JsonLines => self.write_jsonl(out),
        }
    }

    pub fn first(&self) -> Option<&TraceRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// `max |E(t) − E(0)| / |E(0)|`.
    pub fn relative_energy_drift(&self) -> f64 {
        let Some(e0) = self.first().map(|r| r.total) else {
            return 0.0;
        };
        let scale = e0.abs().max(f64::MIN_POSITIVE);
        self.records.iter().map(|r| (r.total - e0).abs() / scale).fold(0.0, f64::max)
    }

    /// Largest per-record increase of the Lyapunov function, if recorded.
    pub fn max_lyapunov_increase(&self) -> Option<f64> {
        let vs: Vec<f64> = self.records.iter().filter_map(|r| r.lyapunov).collect();
        if vs.len() != self.records.len() || vs.is_empty() {
            return None;
        }
        Some(vs.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max))
    }

    /// Largest state-wise difference against another trace of the same length.
    pub fn max_state_difference(&self, other: &SimulationTrace) -> f64 {
        self.records
            .iter()
            .zip(&other.records)
            .flat_map(|(a, b)| {
                a.q.iter()
                    .zip(&b.q)
                    .chain(a.qdot.iter().zip(&b.qdot))
                    .map(|(x, y)| (x - y).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }
}

//! Allocation results and their CSV serialization.

use crate::error::{Error, Result};
use crate::grid::GridSystem;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// How an allocation was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    KernelShap,
    SurroShap,
    Stratified,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Exact => "exact",
            Method::KernelShap => "kernelshap",
            Method::SurroShap => "surroshap",
            Method::Stratified => "stratified",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Method::Exact),
            "kernelshap" => Ok(Method::KernelShap),
            "surroshap" => Ok(Method::SurroShap),
            "stratified" => Ok(Method::Stratified),
            other => Err(Error::Argument(format!(
                "unknown method {other:?}; expected exact, kernelshap, surroshap or stratified"
            ))),
        }
    }
}

/// Emission responsibility of every entity for one period, tCO2eq.
///
/// `x[i]` is entity `i`'s share; the shares of a full allocation sum to the
/// grand-coalition emissions up to `efficiency_residual`, which exact and
/// kernel-weighted methods keep at numerical zero while the stratified
/// baseline only reports it.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationResult {
    pub x: Vec<f64>,
    pub method: Method,
    /// 1-based period index; 0 for allocations outside any horizon.
    pub t: usize,
    /// Coalition samples drawn; 0 for exact enumeration.
    pub samples: u64,
    pub seed: u64,
    /// Emissions of the grand coalition in this period, tCO2eq.
    pub grand_emissions: f64,
    pub efficiency_residual: f64,
}

impl AllocationResult {
    pub fn with_period(mut self, t: usize) -> Self {
        self.t = t;
        self
    }
}

const ALLOCATION_HEADER: [&str; 7] = ["t", "entity_id", "kind", "x_tCO2eq", "method", "M", "seed"];

/// One row per (period, entity), in period order then entity order.
pub fn allocations_to_csv(system: &GridSystem, allocations: &[AllocationResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ALLOCATION_HEADER).expect("in-memory write");
    for a in allocations {
        for (i, x) in a.x.iter().enumerate() {
            w.write_record([
                &a.t.to_string(),
                &i.to_string(),
                &system.kind_of(i).to_string(),
                &x.to_string(),
                &a.method.to_string(),
                &a.samples.to_string(),
                &a.seed.to_string(),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv is utf-8")
}

pub fn save_allocations(
    system: &GridSystem,
    allocations: &[AllocationResult],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, allocations_to_csv(system, allocations))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// A parsed allocation row, used by comparison tooling.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationRow {
    pub t: usize,
    pub entity_id: usize,
    pub kind: String,
    pub x: f64,
    pub method: String,
    pub samples: u64,
    pub seed: u64,
}

pub fn load_allocation_rows(path: impl AsRef<Path>) -> Result<Vec<AllocationRow>> {
    let path = path.as_ref();
    let parse_err = |message: String| Error::Parse {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
    {
        let headers = reader.headers().map_err(|e| parse_err(e.to_string()))?;
        if headers.iter().collect::<Vec<_>>() != ALLOCATION_HEADER {
            return Err(parse_err(format!(
                "expected header {ALLOCATION_HEADER:?}, found {headers:?}"
            )));
        }
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        let line = i + 2;
        let field = |k: usize| record[k].to_string();
        rows.push(AllocationRow {
            t: record[0]
                .parse()
                .map_err(|_| parse_err(format!("line {line}: bad t {:?}", field(0))))?,
            entity_id: record[1]
                .parse()
                .map_err(|_| parse_err(format!("line {line}: bad entity_id {:?}", field(1))))?,
            kind: field(2),
            x: record[3]
                .parse()
                .map_err(|_| parse_err(format!("line {line}: bad x_tCO2eq {:?}", field(3))))?,
            method: field(4),
            samples: record[5]
                .parse()
                .map_err(|_| parse_err(format!("line {line}: bad M {:?}", field(5))))?,
            seed: record[6]
                .parse()
                .map_err(|_| parse_err(format!("line {line}: bad seed {:?}", field(6))))?,
        });
    }
    Ok(rows)
}

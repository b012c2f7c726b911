//! File formats for systems (JSON) and scenarios (CSV).

use crate::error::{Error, Result};
use crate::grid::{
    Branch, Entity, EntityKind, GridSystem, OperatingConditions, Scenario, DEFAULT_VOLL,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct SystemFile {
    buses: usize,
    slack_bus: usize,
    branches: Vec<BranchFile>,
    entities: Vec<EntityFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ptdf: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct BranchFile {
    from: usize,
    to: usize,
    x: f64,
    capacity_mw: f64,
}

#[derive(Serialize, Deserialize)]
struct EntityFile {
    id: usize,
    kind: EntityKind,
    bus: usize,
    beta: f64,
    p_max: f64,
    base_offer: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p_min: Option<f64>,
}

/// A loaded system together with anything worth telling the user about the
/// file, such as clamped fields.
#[derive(Debug)]
pub struct LoadReport {
    pub system: GridSystem,
    pub warnings: Vec<String>,
}

/// Reads and validates a system file.
///
/// Generators with a nonzero `p_min` are clamped to zero with a warning: the
/// dispatch model needs free shutdown so that leaving a coalition is always
/// feasible.
pub fn load_system(path: impl AsRef<Path>) -> Result<LoadReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let file: SystemFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    system_from_file(file)
}

fn system_from_file(file: SystemFile) -> Result<LoadReport> {
    let mut warnings = Vec::new();
    let branches: Vec<Branch> = file
        .branches
        .into_iter()
        .map(|b| Branch {
            from: b.from,
            to: b.to,
            x: b.x,
            capacity_mw: b.capacity_mw,
        })
        .collect();
    let entities: Vec<Entity> = file
        .entities
        .into_iter()
        .map(|e| {
            if let Some(p_min) = e.p_min {
                if p_min != 0.0 {
                    warnings.push(format!(
                        "entity {}: p_min {} clamped to 0 (coalition dispatch requires free shutdown)",
                        e.id, p_min
                    ));
                }
            }
            Entity {
                id: e.id,
                kind: e.kind,
                bus: e.bus,
                beta: e.beta,
                p_max: e.p_max,
                base_offer: e.base_offer,
            }
        })
        .collect();
    let system = match file.ptdf {
        Some(rows) => {
            let n_br = branches.len();
            let n_bus = file.buses;
            if rows.len() != n_br || rows.iter().any(|r| r.len() != n_bus) {
                return Err(Error::Validation(vec![format!(
                    "ptdf must be {n_br} rows of {n_bus} columns"
                )]));
            }
            let ptdf = nalgebra::DMatrix::from_fn(n_br, n_bus, |f, b| rows[f][b]);
            GridSystem::with_ptdf(file.buses, file.slack_bus, branches, entities, ptdf)?
        }
        None => GridSystem::new(file.buses, file.slack_bus, branches, entities)?,
    };
    Ok(LoadReport { system, warnings })
}

/// Canonical JSON serialization of a system, PTDF included.
pub fn system_to_json(system: &GridSystem) -> String {
    let net = &system.network;
    let file = SystemFile {
        buses: net.n_bus,
        slack_bus: net.slack_bus,
        branches: net
            .branches
            .iter()
            .map(|b| BranchFile {
                from: b.from,
                to: b.to,
                x: b.x,
                capacity_mw: b.capacity_mw,
            })
            .collect(),
        entities: system
            .entities
            .iter()
            .map(|e| EntityFile {
                id: e.id,
                kind: e.kind,
                bus: e.bus,
                beta: e.beta,
                p_max: e.p_max,
                base_offer: e.base_offer,
                p_min: None,
            })
            .collect(),
        ptdf: Some(
            (0..net.ptdf.nrows())
                .map(|f| (0..net.ptdf.ncols()).map(|b| net.ptdf[(f, b)]).collect())
                .collect(),
        ),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("system serialization is total");
    text.push('\n');
    text
}

pub fn save_system(system: &GridSystem, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, system_to_json(system))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Hex SHA-256 of the canonical system serialization. Identifies the system
/// in manifests and model metadata.
pub fn system_hash(system: &GridSystem) -> String {
    let digest = Sha256::digest(system_to_json(system).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

const SCENARIO_HEADER: [&str; 4] = ["t", "entity_id", "value_type", "value"];

/// Serializes a scenario as long-format CSV rows
/// `(t, entity_id, value_type, value)` with value types `offer`, `r_max`,
/// `d_max` and one `voll` row per period (empty entity id).
pub fn scenario_to_csv(system: &GridSystem, scenario: &Scenario) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SCENARIO_HEADER).expect("in-memory write");
    let counts = system.counts();
    for p in &scenario.periods {
        for (g, v) in p.offers.iter().enumerate() {
            write_row(&mut w, p.t, &g.to_string(), "offer", *v);
        }
        for (r, v) in p.r_max.iter().enumerate() {
            write_row(&mut w, p.t, &(counts.thermal + r).to_string(), "r_max", *v);
        }
        for (d, v) in p.d_max.iter().enumerate() {
            let id = counts.thermal + counts.renewable + d;
            write_row(&mut w, p.t, &id.to_string(), "d_max", *v);
        }
        write_row(&mut w, p.t, "", "voll", p.voll);
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv is utf-8")
}

fn write_row(w: &mut csv::Writer<Vec<u8>>, t: usize, entity: &str, kind: &str, value: f64) {
    w.write_record([&t.to_string(), entity, kind, &value.to_string()])
        .expect("in-memory write");
}

pub fn save_scenario(
    system: &GridSystem,
    scenario: &Scenario,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, scenario_to_csv(system, scenario))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a scenario CSV back, checking that every period carries a complete
/// set of values for `system`.
pub fn load_scenario(system: &GridSystem, path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let parse_err = |message: String| Error::Parse {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| parse_err(e.to_string()))?;
    {
        let headers = reader.headers().map_err(|e| parse_err(e.to_string()))?;
        if headers.iter().collect::<Vec<_>>() != SCENARIO_HEADER {
            return Err(parse_err(format!(
                "expected header {SCENARIO_HEADER:?}, found {headers:?}"
            )));
        }
    }
    let counts = system.counts();
    let mut by_period: std::collections::BTreeMap<usize, PeriodDraft> = Default::default();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        let line = i + 2;
        let t: usize = record[0]
            .parse()
            .map_err(|_| parse_err(format!("line {line}: bad period index {:?}", &record[0])))?;
        let value: f64 = record[3]
            .parse()
            .map_err(|_| parse_err(format!("line {line}: bad value {:?}", &record[3])))?;
        let draft = by_period.entry(t).or_insert_with(|| PeriodDraft::new(counts));
        match &record[2] {
            "voll" => draft.voll = Some(value),
            kind @ ("offer" | "r_max" | "d_max") => {
                let id: usize = record[1].parse().map_err(|_| {
                    parse_err(format!("line {line}: bad entity id {:?}", &record[1]))
                })?;
                draft
                    .set(system, kind, id, value)
                    .map_err(|msg| parse_err(format!("line {line}: {msg}")))?;
            }
            other => {
                return Err(parse_err(format!(
                    "line {line}: unknown value_type {other:?}"
                )))
            }
        }
    }
    let mut periods = Vec::with_capacity(by_period.len());
    let mut failures = Vec::new();
    for (k, (t, draft)) in by_period.into_iter().enumerate() {
        if t != k + 1 {
            failures.push(format!("periods must be contiguous from 1; found t = {t}"));
        }
        match draft.finish(t) {
            Ok(p) => periods.push(p),
            Err(mut msgs) => failures.append(&mut msgs),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Validation(failures));
    }
    let scenario = Scenario {
        periods,
        seed: None,
    };
    scenario.validate(system)?;
    Ok(scenario)
}

struct PeriodDraft {
    offers: Vec<Option<f64>>,
    r_max: Vec<Option<f64>>,
    d_max: Vec<Option<f64>>,
    voll: Option<f64>,
}

impl PeriodDraft {
    fn new(counts: crate::grid::EntityCounts) -> Self {
        PeriodDraft {
            offers: vec![None; counts.thermal],
            r_max: vec![None; counts.renewable],
            d_max: vec![None; counts.load],
            voll: None,
        }
    }

    fn set(
        &mut self,
        system: &GridSystem,
        kind: &str,
        id: usize,
        value: f64,
    ) -> std::result::Result<(), String> {
        if id >= system.n_entities() {
            return Err(format!("entity id {id} out of range"));
        }
        let slot = match (kind, system.kind_of(id)) {
            ("offer", EntityKind::Thermal) => &mut self.offers[id],
            ("r_max", EntityKind::Renewable) => &mut self.r_max[system.renewable_local(id)],
            ("d_max", EntityKind::Load) => &mut self.d_max[system.load_local(id)],
            (kind, actual) => {
                return Err(format!("value_type {kind} does not apply to {actual} {id}"))
            }
        };
        if slot.is_some() {
            return Err(format!("duplicate {kind} for entity {id}"));
        }
        *slot = Some(value);
        Ok(())
    }

    fn finish(self, t: usize) -> std::result::Result<OperatingConditions, Vec<String>> {
        let mut missing = Vec::new();
        let unwrap_all = |values: Vec<Option<f64>>, what: &str, missing: &mut Vec<String>| {
            values
                .into_iter()
                .enumerate()
                .map(|(i, v)| {
                    v.unwrap_or_else(|| {
                        missing.push(format!("period {t}: missing {what} entry {i}"));
                        f64::NAN
                    })
                })
                .collect::<Vec<f64>>()
        };
        let offers = unwrap_all(self.offers, "offer", &mut missing);
        let r_max = unwrap_all(self.r_max, "r_max", &mut missing);
        let d_max = unwrap_all(self.d_max, "d_max", &mut missing);
        let voll = self.voll.unwrap_or(DEFAULT_VOLL);
        if missing.is_empty() {
            Ok(OperatingConditions {
                t,
                offers,
                r_max,
                d_max,
                voll,
            })
        } else {
            Err(missing)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{generate_scenario, synthesize_system};
    use tempfile::tempdir;

    #[test]
    fn system_round_trip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let sys = synthesize_system(3, 2, 4, 6, 42).unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        save_system(&sys, &p1).unwrap();
        let loaded = load_system(&p1).unwrap();
        assert!(loaded.warnings.is_empty());
        assert_eq!(loaded.system, sys);
        save_system(&loaded.system, &p2).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            "save-load-save must be byte identical"
        );
    }

    #[test]
    fn nonzero_p_min_is_clamped_with_warning() {
        let dir = tempdir().unwrap();
        let text = r#"{
            "buses": 1, "slack_bus": 0, "branches": [],
            "entities": [
                {"id": 0, "kind": "thermal", "bus": 0, "beta": 0.44, "p_max": 50.0, "base_offer": 25.0, "p_min": 5.0},
                {"id": 1, "kind": "load", "bus": 0, "beta": 0.0, "p_max": 30.0, "base_offer": 0.0}
            ]
        }"#;
        let path = dir.path().join("sys.json");
        std::fs::write(&path, text).unwrap();
        let report = load_system(&path).unwrap();
        assert_eq!(report.warnings.len(), 1);
        assert!(report.warnings[0].contains("p_min"));
    }

    #[test]
    fn parse_error_names_the_field() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("broken.json");
        std::fs::write(
            &path,
            r#"{"buses": 1, "slack_bus": 0, "branches": [{"from": 0, "to": 1, "x": 0.1}], "entities": []}"#,
        )
        .unwrap();
        let err = load_system(&path).unwrap_err();
        match err {
            Error::Parse { message, .. } => assert!(message.contains("capacity_mw"), "{message}"),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn tampered_ptdf_fails_validation() {
        let dir = tempdir().unwrap();
        let sys = synthesize_system(2, 1, 2, 4, 7).unwrap();
        let path = dir.path().join("sys.json");
        save_system(&sys, &path).unwrap();
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        v["ptdf"][0][0] = serde_json::json!(0.5);
        std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        let err = load_system(&path).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn scenario_round_trip_preserves_values() {
        let dir = tempdir().unwrap();
        let sys = synthesize_system(2, 1, 3, 4, 3).unwrap();
        let sc = generate_scenario(&sys, 5, 9).unwrap();
        let path = dir.path().join("scenario.csv");
        save_scenario(&sys, &sc, &path).unwrap();
        let back = load_scenario(&sys, &path).unwrap();
        assert_eq!(back.periods.len(), 5);
        assert_eq!(back.seed, None);
        for (a, b) in sc.periods.iter().zip(&back.periods) {
            assert_eq!(a, b, "values must survive the text round trip");
        }
    }

    #[test]
    fn scenario_with_gaps_is_rejected() {
        let dir = tempdir().unwrap();
        let sys = synthesize_system(2, 1, 3, 4, 3).unwrap();
        let sc = generate_scenario(&sys, 2, 9).unwrap();
        let path = dir.path().join("scenario.csv");
        let csv = scenario_to_csv(&sys, &sc);
        let truncated: Vec<&str> = csv.lines().filter(|l| !l.starts_with("2,0,offer")).collect();
        std::fs::write(&path, truncated.join("\n")).unwrap();
        let err = load_scenario(&sys, &path).unwrap_err();
        assert!(err.to_string().contains("missing offer"), "{err}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = synthesize_system(2, 1, 2, 4, 1).unwrap();
        let b = synthesize_system(2, 1, 2, 4, 1).unwrap();
        let c = synthesize_system(2, 1, 2, 4, 2).unwrap();
        assert_eq!(system_hash(&a), system_hash(&b));
        assert_ne!(system_hash(&a), system_hash(&c));
        assert_eq!(system_hash(&a).len(), 64);
    }
}

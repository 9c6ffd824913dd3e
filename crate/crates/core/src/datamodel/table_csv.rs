use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Column, ColumnKind, Endpoint, FeatureTable, SurvivalOutcome};
use crate::error::{Error, Result};

pub const RESERVED_COLUMNS: [&str; 4] = ["os_days", "os_event", "dfs_days", "dfs_event"];

/// Both endpoints for one patient; `None` when either cell of the pair is empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PatientOutcomes {
    pub os: Option<SurvivalOutcome>,
    pub dfs: Option<SurvivalOutcome>,
}

impl PatientOutcomes {
    pub fn get(&self, endpoint: Endpoint) -> Option<SurvivalOutcome> {
        match endpoint {
            Endpoint::Os => self.os,
            Endpoint::Dfs => self.dfs,
        }
    }
}

/// Chooses which endpoint's outcome is returned and which patients qualify.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointSelector {
    pub endpoint: Endpoint,
    /// Exclude patients whose *other* endpoint is incomplete as well.
    pub require_both: bool,
}

impl EndpointSelector {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            endpoint,
            require_both: true,
        }
    }

    pub fn select(
        &self,
        outcomes: &BTreeMap<String, PatientOutcomes>,
    ) -> BTreeMap<String, SurvivalOutcome> {
        outcomes
            .iter()
            .filter(|(_, o)| !self.require_both || (o.os.is_some() && o.dfs.is_some()))
            .filter_map(|(id, o)| o.get(self.endpoint).map(|s| (id.clone(), s)))
            .collect()
    }
}

/// Reads a cohort CSV and returns the feature table with the selected endpoint's outcomes.
pub fn parse_cohort_csv(
    path: impl AsRef<Path>,
    selector: &EndpointSelector,
) -> Result<(FeatureTable, BTreeMap<String, SurvivalOutcome>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let (table, outcomes) = read_cohort_csv(file)?;
    Ok((table, selector.select(&outcomes)))
}

/// Reads a modality table: `patient_id` followed by feature columns. Reserved
/// outcome columns are ignored when present.
pub fn parse_feature_csv(path: impl AsRef<Path>) -> Result<FeatureTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_feature_csv(file)
}

pub fn read_cohort_csv<R: Read>(
    reader: R,
) -> Result<(FeatureTable, BTreeMap<String, PatientOutcomes>)> {
    let raw = RawTable::read(reader)?;
    for name in RESERVED_COLUMNS {
        if !raw.header.iter().any(|h| h == name) {
            return Err(Error::Parse(format!("cohort file is missing column {name:?}")));
        }
    }
    let outcomes = raw.outcomes()?;
    Ok((raw.features()?, outcomes))
}

pub fn read_feature_csv<R: Read>(reader: R) -> Result<FeatureTable> {
    RawTable::read(reader)?.features()
}

pub fn write_cohort_csv<W: Write>(
    writer: W,
    table: &FeatureTable,
    outcomes: &BTreeMap<String, PatientOutcomes>,
) -> Result<()> {
    write_table(writer, table, Some(outcomes))
}

pub fn write_feature_csv<W: Write>(writer: W, table: &FeatureTable) -> Result<()> {
    write_table(writer, table, None)
}

fn write_table<W: Write>(
    writer: W,
    table: &FeatureTable,
    outcomes: Option<&BTreeMap<String, PatientOutcomes>>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["patient_id".to_string()];
    if outcomes.is_some() {
        header.extend(RESERVED_COLUMNS.iter().map(|s| s.to_string()));
    }
    header.extend(table.columns().iter().map(|c| c.name.clone()));
    w.write_record(&header)?;

    let fmt_outcome = |o: Option<SurvivalOutcome>| match o {
        Some(o) => [o.time.to_string(), (o.event as u8).to_string()],
        None => [String::new(), String::new()],
    };

    for (i, id) in table.patient_ids().iter().enumerate() {
        let mut row = vec![id.clone()];
        if let Some(map) = outcomes {
            let o = map.get(id).copied().unwrap_or_default();
            row.extend(fmt_outcome(o.os));
            row.extend(fmt_outcome(o.dfs));
        }
        for (j, col) in table.columns().iter().enumerate() {
            if table.missing()[[i, j]] {
                row.push(String::new());
                continue;
            }
            let v = table.values()[[i, j]];
            row.push(match &col.kind {
                ColumnKind::Numeric => v.to_string(),
                ColumnKind::Categorical { levels } => levels[v as usize].clone(),
            });
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

struct RawTable {
    header: Vec<String>,
    /// (line number, cells)
    rows: Vec<(usize, Vec<String>)>,
}

impl RawTable {
    fn read<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header.first().map(String::as_str) != Some("patient_id") {
            return Err(Error::Parse("first column must be `patient_id`".into()));
        }
        let mut rows = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            let cells: Vec<String> = rec.iter().map(str::to_string).collect();
            let id = cells[0].clone();
            if id.is_empty() {
                return Err(Error::Parse(format!("empty patient_id on line {line}")));
            }
            if let Some(&first) = seen.get(&id) {
                return Err(Error::DuplicatePatient {
                    id,
                    first,
                    second: line,
                });
            }
            seen.insert(id, line);
            rows.push((line, cells));
        }
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn outcomes(&self) -> Result<BTreeMap<String, PatientOutcomes>> {
        let idx = |n: &str| self.col(n).expect("reserved column checked by caller");
        let (os_t, os_e, dfs_t, dfs_e) = (
            idx("os_days"),
            idx("os_event"),
            idx("dfs_days"),
            idx("dfs_event"),
        );
        let mut out = BTreeMap::new();
        for (line, cells) in &self.rows {
            let os = parse_outcome(*line, &cells[os_t], &cells[os_e])?;
            let dfs = parse_outcome(*line, &cells[dfs_t], &cells[dfs_e])?;
            out.insert(cells[0].clone(), PatientOutcomes { os, dfs });
        }
        Ok(out)
    }

    fn features(&self) -> Result<FeatureTable> {
        let feature_cols: Vec<usize> = (1..self.header.len())
            .filter(|&j| !RESERVED_COLUMNS.contains(&self.header[j].as_str()))
            .collect();
        let n = self.rows.len();
        let mut values = Array2::from_elem((n, feature_cols.len()), f64::NAN);
        let mut missing = Array2::from_elem((n, feature_cols.len()), false);
        let mut columns = Vec::with_capacity(feature_cols.len());

        for (k, &j) in feature_cols.iter().enumerate() {
            let cells: Vec<&str> = self.rows.iter().map(|(_, c)| c[j].as_str()).collect();
            let numeric: Option<Vec<Option<f64>>> = cells
                .iter()
                .map(|c| {
                    if c.is_empty() {
                        Some(None)
                    } else {
                        c.parse::<f64>().ok().filter(|v| v.is_finite()).map(Some)
                    }
                })
                .collect();
            match numeric {
                Some(parsed) => {
                    for (i, v) in parsed.into_iter().enumerate() {
                        match v {
                            Some(v) => values[[i, k]] = v,
                            None => missing[[i, k]] = true,
                        }
                    }
                    columns.push(Column::numeric(self.header[j].clone()));
                }
                None => {
                    let levels: Vec<String> = cells
                        .iter()
                        .filter(|c| !c.is_empty())
                        .map(|c| c.to_string())
                        .collect::<BTreeSet<_>>()
                        .into_iter()
                        .collect();
                    for (i, c) in cells.iter().enumerate() {
                        if c.is_empty() {
                            missing[[i, k]] = true;
                        } else {
                            let code = levels.binary_search_by(|l| l.as_str().cmp(c)).unwrap();
                            values[[i, k]] = code as f64;
                        }
                    }
                    columns.push(Column::categorical(self.header[j].clone(), levels));
                }
            }
        }
        let ids = self.rows.iter().map(|(_, c)| c[0].clone()).collect();
        FeatureTable::new(ids, columns, values, missing)
    }
}

fn parse_outcome(line: usize, time: &str, event: &str) -> Result<Option<SurvivalOutcome>> {
    if time.is_empty() || event.is_empty() {
        return Ok(None);
    }
    let t: f64 = time.parse().map_err(|_| Error::InvalidOutcome {
        line,
        reason: format!("time {time:?} is not a number"),
    })?;
    if !t.is_finite() || t < 0.0 {
        return Err(Error::InvalidOutcome {
            line,
            reason: format!("time {time} is negative or non-finite"),
        });
    }
    let e = match event {
        "0" => false,
        "1" => true,
        other => {
            return Err(Error::InvalidOutcome {
                line,
                reason: format!("event indicator {other:?} is not 0 or 1"),
            })
        }
    };
    Ok(Some(SurvivalOutcome { time: t, event: e }))
}

#[cfg(test)]
mod tests {
    use super::*;

    const FILE: &str = "\
patient_id,os_days,os_event,dfs_days,dfs_event,age,grade,side
p1,100,1,80,1,61,G2,L
p2,200,0,200,0,55,G3,R
p3,300,1,,,70,,L
";

    #[test]
    fn parses_full_rows_and_missing_cells() {
        let (t, outcomes) = read_cohort_csv(FILE.as_bytes()).unwrap();
        assert_eq!(t.n_rows(), 3);
        assert_eq!(t.column_names(), vec!["age", "grade", "side"]);
        assert!(!t.columns()[0].is_categorical());
        assert!(t.columns()[1].is_categorical());
        let grade = t.column_index("grade").unwrap();
        let n_missing: usize = t.missing().iter().filter(|m| **m).count();
        assert_eq!(n_missing, 1);
        assert!(t.missing()[[2, grade]]);
        assert_eq!(outcomes["p3"].dfs, None);
        assert_eq!(outcomes["p1"].os, Some(SurvivalOutcome { time: 100.0, event: true }));
    }

    #[test]
    fn selector_excludes_incomplete_other_endpoint_by_default() {
        let (_, outcomes) = read_cohort_csv(FILE.as_bytes()).unwrap();
        let strict = EndpointSelector::new(Endpoint::Os).select(&outcomes);
        assert_eq!(strict.len(), 2);
        let lax = EndpointSelector {
            endpoint: Endpoint::Os,
            require_both: false,
        }
        .select(&outcomes);
        assert_eq!(lax.len(), 3);
    }

    #[test]
    fn duplicate_patient_names_both_lines() {
        let f = "patient_id,os_days,os_event,dfs_days,dfs_event,x\na,1,1,1,1,0\nb,1,1,1,1,0\na,2,0,2,0,1\n";
        match read_cohort_csv(f.as_bytes()) {
            Err(Error::DuplicatePatient { id, first, second }) => {
                assert_eq!(id, "a");
                assert_eq!((first, second), (2, 4));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_outcomes() {
        let neg = "patient_id,os_days,os_event,dfs_days,dfs_event\na,-1,1,1,1\n";
        assert!(matches!(
            read_cohort_csv(neg.as_bytes()),
            Err(Error::InvalidOutcome { line: 2, .. })
        ));
        let ev = "patient_id,os_days,os_event,dfs_days,dfs_event\na,1,2,1,1\n";
        assert!(matches!(
            read_cohort_csv(ev.as_bytes()),
            Err(Error::InvalidOutcome { .. })
        ));
    }

    #[test]
    fn feature_csv_round_trips() {
        let (t, outcomes) = read_cohort_csv(FILE.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_cohort_csv(&mut buf, &t, &outcomes).unwrap();
        let (t2, o2) = read_cohort_csv(buf.as_slice()).unwrap();
        assert_eq!(t.patient_ids(), t2.patient_ids());
        assert_eq!(t.columns(), t2.columns());
        assert_eq!(t.missing(), t2.missing());
        assert_eq!(outcomes, o2);
    }
}

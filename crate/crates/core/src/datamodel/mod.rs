//! Domain types shared by every stage of the pipeline, plus file ingestion
//! and cross-modality alignment.

mod align;
mod container;
mod table_csv;

use std::collections::HashSet;
use std::fmt;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use align::{align_modalities, AlignedCohort, Modality, ModalityData};
pub use container::{
    parse_embedding_container, read_embedding_container, write_embedding_container,
    EMBEDDING_MAGIC,
};
pub use table_csv::{
    parse_cohort_csv, parse_feature_csv, read_cohort_csv, read_feature_csv, write_cohort_csv,
    write_feature_csv, EndpointSelector, PatientOutcomes, RESERVED_COLUMNS,
};

/// Time-to-event observation for one patient and one endpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalOutcome {
    /// Follow-up time in days.
    pub time: f64,
    /// `true` when the event (death / recurrence) was observed, `false` when censored.
    pub event: bool,
}

impl SurvivalOutcome {
    pub fn new(time: f64, event: bool) -> Result<Self> {
        if !time.is_finite() || time < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "survival time must be finite and nonnegative, got {time}"
            )));
        }
        Ok(Self { time, event })
    }
}

pub fn count_events(outcomes: &[SurvivalOutcome]) -> usize {
    outcomes.iter().filter(|o| o.event).count()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Os,
    Dfs,
}

impl Endpoint {
    pub const ALL: [Endpoint; 2] = [Endpoint::Os, Endpoint::Dfs];

    pub fn as_str(self) -> &'static str {
        match self {
            Endpoint::Os => "os",
            Endpoint::Dfs => "dfs",
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "os" => Ok(Endpoint::Os),
            "dfs" => Ok(Endpoint::Dfs),
            other => Err(Error::InvalidArgument(format!("unknown endpoint {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    /// Values are stored as indices into `levels`, which are sorted lexicographically.
    Categorical { levels: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

impl Column {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numeric,
        }
    }

    pub fn categorical(name: impl Into<String>, levels: Vec<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical { levels },
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, ColumnKind::Categorical { .. })
    }
}

/// Patient × feature matrix with a missingness mask.
///
/// Missing cells hold `NaN` in `values`; the mask is authoritative.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    patient_ids: Vec<String>,
    columns: Vec<Column>,
    values: Array2<f64>,
    missing: Array2<bool>,
}

impl FeatureTable {
    pub fn new(
        patient_ids: Vec<String>,
        columns: Vec<Column>,
        values: Array2<f64>,
        missing: Array2<bool>,
    ) -> Result<Self> {
        if values.dim() != (patient_ids.len(), columns.len()) {
            return Err(Error::InvalidArgument(format!(
                "values shape {:?} does not match {} patients x {} columns",
                values.dim(),
                patient_ids.len(),
                columns.len()
            )));
        }
        if missing.dim() != values.dim() {
            return Err(Error::InvalidArgument(
                "missingness mask shape differs from values shape".into(),
            ));
        }
        let mut seen = HashSet::new();
        for id in &patient_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate patient id {id:?}")));
            }
        }
        let mut seen = HashSet::new();
        for c in &columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate column name {:?}",
                    c.name
                )));
            }
        }
        Ok(Self {
            patient_ids,
            columns,
            values,
            missing,
        })
    }

    /// Builds a fully-observed numeric table.
    pub fn from_numeric(
        patient_ids: Vec<String>,
        names: Vec<String>,
        values: Array2<f64>,
    ) -> Result<Self> {
        let missing = Array2::from_elem(values.dim(), false);
        let columns = names.into_iter().map(Column::numeric).collect();
        Self::new(patient_ids, columns, values, missing)
    }

    pub fn n_rows(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn patient_ids(&self) -> &[String] {
        &self.patient_ids
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn missing(&self) -> &Array2<bool> {
        &self.missing
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.values.column(j)
    }

    pub fn missing_count(&self, j: usize) -> usize {
        self.missing.column(j).iter().filter(|m| **m).count()
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureTable {
        FeatureTable {
            patient_ids: rows.iter().map(|&i| self.patient_ids[i].clone()).collect(),
            columns: self.columns.clone(),
            values: self.values.select(Axis(0), rows),
            missing: self.missing.select(Axis(0), rows),
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> FeatureTable {
        FeatureTable {
            patient_ids: self.patient_ids.clone(),
            columns: cols.iter().map(|&j| self.columns[j].clone()).collect(),
            values: self.values.select(Axis(1), cols),
            missing: self.missing.select(Axis(1), cols),
        }
    }

    /// Selects columns by name, failing on the first unknown name.
    pub fn select_named(&self, names: &[String]) -> Result<FeatureTable> {
        let idx = names
            .iter()
            .map(|n| {
                self.column_index(n)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown column {n:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select_columns(&idx))
    }

    /// Row indices for the given patient ids, in the given order.
    pub fn row_indices(&self, ids: &[String]) -> Result<Vec<usize>> {
        let lookup: std::collections::HashMap<&str, usize> = self
            .patient_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        ids.iter()
            .map(|id| {
                lookup
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown patient {id:?}")))
            })
            .collect()
    }

    pub fn into_parts(self) -> (Vec<String>, Vec<Column>, Array2<f64>, Array2<bool>) {
        (self.patient_ids, self.columns, self.values, self.missing)
    }
}

/// Variable-size set of tile embeddings for one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBag {
    pub patient_id: String,
    /// `n_tiles × dim`, row-major.
    pub vectors: Array2<f32>,
    pub tile_coords: Option<Vec<[i32; 2]>>,
}

impl EmbeddingBag {
    pub fn new(
        patient_id: impl Into<String>,
        vectors: Array2<f32>,
        tile_coords: Option<Vec<[i32; 2]>>,
    ) -> Result<Self> {
        let patient_id = patient_id.into();
        if vectors.nrows() == 0 || vectors.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "bag for {patient_id:?} must have at least one tile and a positive dim"
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding for {patient_id:?}")));
        }
        if let Some(c) = &tile_coords {
            if c.len() != vectors.nrows() {
                return Err(Error::InvalidArgument(format!(
                    "bag for {patient_id:?} has {} coords for {} tiles",
                    c.len(),
                    vectors.nrows()
                )));
            }
        }
        Ok(Self {
            patient_id,
            vectors,
            tile_coords,
        })
    }

    pub fn n_tiles(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Patient × modality matrix of log-partial-hazard scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskScoreTable {
    pub patient_ids: Vec<String>,
    pub modality_names: Vec<String>,
    pub scores: Array2<f64>,
}

impl RiskScoreTable {
    pub fn new(
        patient_ids: Vec<String>,
        modality_names: Vec<String>,
        scores: Array2<f64>,
    ) -> Result<Self> {
        if modality_names.is_empty() {
            return Err(Error::InvalidArgument("risk table needs at least one modality".into()));
        }
        if scores.dim() != (patient_ids.len(), modality_names.len()) {
            return Err(Error::InvalidArgument(format!(
                "score shape {:?} does not match {} patients x {} modalities",
                scores.dim(),
                patient_ids.len(),
                modality_names.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("risk score table".into()));
        }
        Ok(Self {
            patient_ids,
            modality_names,
            scores,
        })
    }

    pub fn n_modalities(&self) -> usize {
        self.modality_names.len()
    }
}

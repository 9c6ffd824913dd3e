use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{EmbeddingBag, FeatureTable, SurvivalOutcome};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub enum ModalityData {
    Table(FeatureTable),
    Bags(Vec<EmbeddingBag>),
}

#[derive(Clone, Debug)]
pub struct Modality {
    pub name: String,
    pub data: ModalityData,
}

impl Modality {
    pub fn table(name: impl Into<String>, t: FeatureTable) -> Self {
        Self {
            name: name.into(),
            data: ModalityData::Table(t),
        }
    }

    pub fn bags(name: impl Into<String>, b: Vec<EmbeddingBag>) -> Self {
        Self {
            name: name.into(),
            data: ModalityData::Bags(b),
        }
    }

    fn patient_ids(&self) -> Vec<&str> {
        match &self.data {
            ModalityData::Table(t) => t.patient_ids().iter().map(String::as_str).collect(),
            ModalityData::Bags(b) => b.iter().map(|b| b.patient_id.as_str()).collect(),
        }
    }
}

/// Cohort restricted to patients present in every modality with a complete
/// outcome, all structures in lexicographic patient-id order.
#[derive(Clone, Debug)]
pub struct AlignedCohort {
    pub patient_ids: Vec<String>,
    pub modalities: Vec<Modality>,
    pub outcomes: Vec<SurvivalOutcome>,
}

impl AlignedCohort {
    pub fn len(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patient_ids.is_empty()
    }

    /// Sub-cohort at the given row positions (order preserved as given).
    pub fn subset(&self, rows: &[usize]) -> AlignedCohort {
        AlignedCohort {
            patient_ids: rows.iter().map(|&i| self.patient_ids[i].clone()).collect(),
            modalities: self
                .modalities
                .iter()
                .map(|m| Modality {
                    name: m.name.clone(),
                    data: match &m.data {
                        ModalityData::Table(t) => ModalityData::Table(t.select_rows(rows)),
                        ModalityData::Bags(b) => {
                            ModalityData::Bags(rows.iter().map(|&i| b[i].clone()).collect())
                        }
                    },
                })
                .collect(),
            outcomes: rows.iter().map(|&i| self.outcomes[i]).collect(),
        }
    }
}

pub fn align_modalities(
    modalities: Vec<Modality>,
    outcomes: &BTreeMap<String, SurvivalOutcome>,
) -> Result<AlignedCohort> {
    if modalities.is_empty() {
        return Err(Error::InvalidArgument("at least one modality is required".into()));
    }
    let mut keep: BTreeSet<&str> = outcomes.keys().map(String::as_str).collect();
    for m in &modalities {
        let ids: BTreeSet<&str> = m.patient_ids().into_iter().collect();
        keep = keep.intersection(&ids).copied().collect();
    }
    if keep.is_empty() {
        let mut counts: Vec<(String, usize)> = modalities
            .iter()
            .map(|m| (m.name.clone(), m.patient_ids().len()))
            .collect();
        counts.push(("outcomes".into(), outcomes.len()));
        return Err(Error::EmptyIntersection { counts });
    }
    let patient_ids: Vec<String> = keep.iter().map(|s| s.to_string()).collect();

    let aligned = modalities
        .into_iter()
        .map(|m| {
            let data = match m.data {
                ModalityData::Table(t) => {
                    let rows = t.row_indices(&patient_ids)?;
                    ModalityData::Table(t.select_rows(&rows))
                }
                ModalityData::Bags(bags) => {
                    let mut by_id: HashMap<String, EmbeddingBag> = HashMap::new();
                    for b in bags {
                        if by_id.contains_key(&b.patient_id) {
                            return Err(Error::InvalidArgument(format!(
                                "modality {:?} has two bags for patient {:?}",
                                m.name, b.patient_id
                            )));
                        }
                        by_id.insert(b.patient_id.clone(), b);
                    }
                    ModalityData::Bags(
                        patient_ids
                            .iter()
                            .map(|id| by_id.remove(id).expect("id in intersection"))
                            .collect(),
                    )
                }
            };
            Ok(Modality { name: m.name, data })
        })
        .collect::<Result<Vec<_>>>()?;

    let outcomes = patient_ids.iter().map(|id| outcomes[id]).collect();
    Ok(AlignedCohort {
        patient_ids,
        modalities: aligned,
        outcomes,
    })
}

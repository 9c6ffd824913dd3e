use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{cox_nll, cox_nll_and_grad, DeepCoxConfig, DeepCoxModel, TrainNoise};
use crate::datamodel::{count_events, EmbeddingBag, SurvivalOutcome};
use crate::error::{Error, Result};
use crate::metrics::concordance_index;

/// Bags per gradient chunk; chunk sums are added in a fixed order so the
/// result does not depend on the thread count.
const GRAD_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub model: DeepCoxModel,
    pub best_epoch: usize,
    pub val_loss: f64,
    pub val_cindex: f64,
    pub history: Vec<EpochLog>,
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &[Array2<f64>]) -> Self {
        let zeros = || params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            });
        }
    }
}

fn check_cohort(bags: &[EmbeddingBag], outcomes: &[SurvivalOutcome], what: &str) -> Result<()> {
    if bags.len() != outcomes.len() {
        return Err(Error::InvalidArgument(format!(
            "{what}: {} bags for {} outcomes",
            bags.len(),
            outcomes.len()
        )));
    }
    Ok(())
}

/// Full-cohort training: every epoch computes all training risks (one bag
/// at a time, dropout and tile subsampling seeded by epoch and bag), takes
/// the loss gradient with respect to the risks, back-propagates it through
/// each bag's graph and applies one Adam step. The learning rate is scaled
/// by `plateau_gamma` after `plateau_patience` epochs without a decrease in
/// validation loss.
pub fn train_deep_cox(
    bags: &[EmbeddingBag],
    outcomes: &[SurvivalOutcome],
    config: &DeepCoxConfig,
    val_bags: &[EmbeddingBag],
    val_outcomes: &[SurvivalOutcome],
) -> Result<TrainOutcome> {
    check_cohort(bags, outcomes, "training")?;
    check_cohort(val_bags, val_outcomes, "validation")?;
    if count_events(outcomes) < 2 {
        return Err(Error::InvalidArgument("deep training needs at least two events".into()));
    }
    if count_events(val_outcomes) == 0 {
        return Err(Error::InvalidArgument("validation set has no events".into()));
    }
    let input_dim = bags
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training bags".into()))?
        .dim();
    let mut model = DeepCoxModel::new(input_dim, config.clone())?;
    let mut adam = Adam::new(&model.params);
    let mut lr = config.lr;
    let mut best: Option<(usize, f64, Vec<Array2<f64>>)> = None;
    let mut sched_best = f64::INFINITY;
    let mut bad_epochs = 0;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let noise = |i: usize| TrainNoise {
            seed: config.seed,
            epoch: epoch as u64,
            bag: i as u64,
        };
        let risks: Vec<f64> = bags
            .par_iter()
            .enumerate()
            .map(|(i, b)| {
                let (t, _, out) = model.build(b, Some(noise(i)))?;
                Ok(t.value(out)[[0, 0]])
            })
            .collect::<Result<_>>()?;
        let (train_loss, dr) = cox_nll_and_grad(&risks, outcomes)?;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }

        let mut grad: Vec<Array2<f64>> = model.params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        let idx: Vec<usize> = (0..bags.len()).collect();
        for chunk in idx.chunks(GRAD_CHUNK) {
            let parts: Vec<Vec<Array2<f64>>> = chunk
                .par_iter()
                .map(|&i| model.risk_and_grad(&bags[i], Some(noise(i)), dr[i]).map(|r| r.1))
                .collect::<Result<_>>()?;
            for part in parts {
                for (g, p) in grad.iter_mut().zip(part) {
                    *g += &p;
                }
            }
        }
        adam.step(&mut model.params, &grad, lr);
        if model.params.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }

        let val_loss = cox_nll(&model.predict(val_bags)?, val_outcomes)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        history.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:e}");
        if best.as_ref().is_none_or(|b| val_loss < b.1) {
            best = Some((epoch, val_loss, model.params.clone()));
        }
        if val_loss < sched_best {
            sched_best = val_loss;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= config.plateau_patience {
                lr *= config.plateau_gamma;
                bad_epochs = 0;
            }
        }
    }

    let (best_epoch, val_loss, params) = match best {
        Some(b) => b,
        // Zero epochs: the initial model is the result.
        None => (0, cox_nll(&model.predict(val_bags)?, val_outcomes)?, model.params.clone()),
    };
    model.params = params;
    let val_risks = model.predict(val_bags)?;
    let val_cindex = concordance_index(&val_risks, val_outcomes)?;
    Ok(TrainOutcome {
        model,
        best_epoch,
        val_loss,
        val_cindex,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::draw_subsplits;
    use crate::synthgen::{gen_bags, gen_linear_cox_cohort, patient_ids, BagSpec, CohortSpec};
    use rand::seq::SliceRandom;

    struct Data {
        train: (Vec<EmbeddingBag>, Vec<SurvivalOutcome>),
        val: (Vec<EmbeddingBag>, Vec<SurvivalOutcome>),
    }

    fn data(n: usize, seed: u64, permute: bool) -> Data {
        let (t, mut o) = gen_linear_cox_cohort(&CohortSpec {
            n_patients: n,
            beta: vec![3.0],
            baseline_hazard: 0.01,
            censor_max: Some(400.0),
            seed,
        })
        .unwrap();
        if permute {
            o.shuffle(&mut crate::rng::stream_rng(seed, &[77]));
        }
        let spec = BagSpec {
            tiles_min: 8,
            tiles_max: 16,
            dim: 8,
            tile_noise: 0.5,
        };
        let planted = t.column(0).to_vec();
        let bags = gen_bags(&spec, &patient_ids(n), &planted, seed).unwrap();
        let split = &draw_subsplits(&o, 1, 0.25, 100, seed, "os").unwrap()[0];
        let pick = |rows: &[usize]| {
            (
                rows.iter().map(|&i| bags[i].clone()).collect(),
                rows.iter().map(|&i| o[i]).collect(),
            )
        };
        Data {
            train: pick(&split.train),
            val: pick(&split.val),
        }
    }

    fn cfg(lr: f64, epochs: usize) -> DeepCoxConfig {
        DeepCoxConfig {
            proj_dim: 16,
            n_heads: 4,
            n_landmarks: 4,
            lr,
            epochs,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let d = data(24, 1, false);
        let c = cfg(0.0, 3);
        let out = train_deep_cox(&d.train.0, &d.train.1, &c, &d.val.0, &d.val.1).unwrap();
        let init = DeepCoxModel::new(8, c).unwrap();
        assert_eq!(out.model.params, init.params);
    }

    #[test]
    fn planted_signal_is_learned() {
        let d = data(64, 2, false);
        let out = train_deep_cox(&d.train.0, &d.train.1, &cfg(0.001, 50), &d.val.0, &d.val.1).unwrap();
        assert!(out.val_cindex > 0.8, "val C {}", out.val_cindex);
    }

    #[test]
    fn permuted_labels_stay_near_chance() {
        let d = data(64, 4, true);
        let out = train_deep_cox(&d.train.0, &d.train.1, &cfg(0.001, 50), &d.val.0, &d.val.1).unwrap();
        assert!((0.35..=0.65).contains(&out.val_cindex), "val C {}", out.val_cindex);
    }

    #[test]
    fn training_is_reproducible_and_schedules_lr() {
        let d = data(24, 5, false);
        let c = DeepCoxConfig { plateau_patience: 1, ..cfg(0.05, 8) };
        let a = train_deep_cox(&d.train.0, &d.train.1, &c, &d.val.0, &d.val.1).unwrap();
        let b = train_deep_cox(&d.train.0, &d.train.1, &c, &d.val.0, &d.val.1).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.history, b.history);
        let best = a.history.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(a.val_loss, best);
        assert!(a.history.windows(2).all(|w| w[1].lr <= w[0].lr));
    }

    #[test]
    fn too_few_events_rejected() {
        let d = data(24, 6, false);
        let none = vec![SurvivalOutcome { time: 1.0, event: false }; d.train.1.len()];
        assert!(train_deep_cox(&d.train.0, &none, &cfg(0.01, 1), &d.val.0, &d.val.1).is_err());
    }
}

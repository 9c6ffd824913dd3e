use ndarray::Array2;
use rand::Rng;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::attention::attention_on_tape;
use super::tape::{NodeId, Tape};
use crate::coxph::breslow_loglik_scores;
use crate::datamodel::{count_events, EmbeddingBag, SurvivalOutcome};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepCoxConfig {
    pub proj_dim: usize,
    pub n_heads: usize,
    pub n_landmarks: usize,
    pub pinv_iters: usize,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub plateau_patience: usize,
    pub plateau_gamma: f64,
    pub train_bag_cap: usize,
    pub seed: u64,
    /// Skip the attention block (projection → pooling → head only).
    pub bypass_attention: bool,
}

impl Default for DeepCoxConfig {
    fn default() -> Self {
        Self {
            proj_dim: 256,
            n_heads: 8,
            n_landmarks: 64,
            pinv_iters: 6,
            dropout: 0.25,
            lr: 0.001,
            epochs: 100,
            plateau_patience: 5,
            plateau_gamma: 0.1,
            train_bag_cap: 4096,
            seed: 0,
            bypass_attention: false,
        }
    }
}

impl DeepCoxConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.proj_dim == 0 || self.n_heads == 0 || !self.proj_dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "proj_dim ({}) must be a positive multiple of n_heads ({})",
                self.proj_dim, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.n_landmarks == 0 || self.train_bag_cap == 0 {
            return bad("n_landmarks and train_bag_cap must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be >= 0, got {}", self.lr));
        }
        if !(self.plateau_gamma > 0.0 && self.plateau_gamma <= 1.0) {
            return bad(format!("plateau_gamma must lie in (0, 1], got {}", self.plateau_gamma));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward randomness for training mode.
#[derive(Clone, Copy, Debug)]
pub(crate) struct TrainNoise {
    pub seed: u64,
    pub epoch: u64,
    pub bag: u64,
}

pub const PARAM_NAMES: [&str; 9] = [
    "proj.weight",
    "proj.bias",
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "attn.bo",
    "head.weight",
    "head.bias",
];

#[derive(Clone, Debug, PartialEq)]
pub struct DeepCoxModel {
    pub config: DeepCoxConfig,
    pub input_dim: usize,
    /// In the order of [`PARAM_NAMES`].
    pub params: Vec<Array2<f64>>,
}

fn param_shapes(input_dim: usize, p: usize) -> [(usize, usize); 9] {
    [
        (input_dim, p),
        (1, p),
        (p, p),
        (p, p),
        (p, p),
        (p, p),
        (1, p),
        (p, 1),
        (1, 1),
    ]
}

/// Fan-in of each parameter array: the rows of the weight it belongs to.
fn fan_in(input_dim: usize, p: usize) -> [usize; 9] {
    [input_dim, input_dim, p, p, p, p, p, p, p]
}

impl DeepCoxModel {
    /// Uniform ±1/√fan_in initialization, seeded.
    pub fn new(input_dim: usize, config: DeepCoxConfig) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be positive".into()));
        }
        let p = config.proj_dim;
        let mut rng = stream_rng(config.seed, &[0x1417]);
        let params = param_shapes(input_dim, p)
            .iter()
            .zip(fan_in(input_dim, p))
            .map(|(&shape, fan)| {
                let bound = 1.0 / (fan as f64).sqrt();
                Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
            })
            .collect();
        Ok(Self {
            config,
            input_dim,
            params,
        })
    }

    pub fn from_params(input_dim: usize, config: DeepCoxConfig, params: Vec<Array2<f64>>) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(input_dim, config.proj_dim);
        if params.len() != shapes.len() {
            return Err(Error::InvalidArgument(format!("expected {} parameter arrays", shapes.len())));
        }
        for ((p, s), name) in params.iter().zip(shapes).zip(PARAM_NAMES) {
            if p.dim() != s {
                return Err(Error::DimMismatch {
                    patient: name.to_string(),
                    expected: s.0 * s.1,
                    found: p.len(),
                });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name.to_string()));
            }
        }
        Ok(Self {
            config,
            input_dim,
            params,
        })
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(Array2::len).sum()
    }

    /// Risk score of one bag; deterministic in eval mode.
    pub fn forward_bag(&self, bag: &EmbeddingBag, mode: Mode) -> Result<f64> {
        let noise = match mode {
            Mode::Eval => None,
            Mode::Train => Some(TrainNoise {
                seed: self.config.seed,
                epoch: 0,
                bag: 0,
            }),
        };
        let (tape, _, out) = self.build(bag, noise)?;
        Ok(tape.value(out)[[0, 0]])
    }

    /// Canonical tile order: rows sorted lexicographically, so risk does not
    /// depend on the order tiles are stored in. Training mode first draws at
    /// most `train_bag_cap` tiles.
    fn input_matrix(&self, bag: &EmbeddingBag, noise: Option<TrainNoise>) -> Result<Array2<f64>> {
        if bag.dim() != self.input_dim {
            return Err(Error::DimMismatch {
                patient: bag.patient_id.clone(),
                expected: self.input_dim,
                found: bag.dim(),
            });
        }
        let n = bag.n_tiles();
        let mut rows: Vec<usize> = match noise {
            Some(tn) if n > self.config.train_bag_cap => {
                let mut rng = stream_rng(tn.seed, &[1, tn.epoch, tn.bag]);
                sample(&mut rng, n, self.config.train_bag_cap).into_vec()
            }
            _ => (0..n).collect(),
        };
        let v = &bag.vectors;
        rows.sort_by(|&a, &b| {
            v.row(a)
                .iter()
                .zip(v.row(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        Ok(Array2::from_shape_fn((rows.len(), self.input_dim), |(i, j)| v[[rows[i], j]] as f64))
    }

    /// Builds the forward graph; returns the tape, the parameter leaf ids and
    /// the 1×1 risk node.
    pub(crate) fn build(
        &self,
        bag: &EmbeddingBag,
        noise: Option<TrainNoise>,
    ) -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let x = self.input_matrix(bag, noise)?;
        let n = x.nrows();
        let cfg = &self.config;
        let p = cfg.proj_dim;
        let mut t = Tape::new();
        let ids: Vec<NodeId> = self.params.iter().map(|a| t.leaf(a.clone())).collect();
        let [wp, bp, wq, wk, wv, wo, bo, wh, bh] = ids[..] else { unreachable!() };

        let xn = t.leaf(x);
        let proj = t.matmul(xn, wp);
        let proj = t.add_row(proj, bp);
        let mut h = t.relu(proj);
        if let Some(tn) = noise {
            if cfg.dropout > 0.0 {
                let mut rng = stream_rng(tn.seed, &[2, tn.epoch, tn.bag]);
                let keep = 1.0 / (1.0 - cfg.dropout);
                let mask = Array2::from_shape_simple_fn((n, p), || {
                    if rng.random::<f64>() < cfg.dropout {
                        0.0
                    } else {
                        keep
                    }
                });
                h = t.mul_const(h, mask);
            }
        }
        let z = if cfg.bypass_attention {
            h
        } else {
            let q = t.matmul(h, wq);
            let k = t.matmul(h, wk);
            let v = t.matmul(h, wv);
            let dh = p / cfg.n_heads;
            let heads: Vec<NodeId> = (0..cfg.n_heads)
                .map(|i| {
                    let (s0, s1) = (i * dh, (i + 1) * dh);
                    let qh = t.col_slice(q, s0, s1);
                    let kh = t.col_slice(k, s0, s1);
                    let vh = t.col_slice(v, s0, s1);
                    attention_on_tape(&mut t, qh, kh, vh, cfg.n_landmarks, cfg.pinv_iters)
                })
                .collect();
            let cat = if heads.len() == 1 { heads[0] } else { t.concat_cols(heads) };
            let o = t.matmul(cat, wo);
            t.add_row(o, bo)
        };
        let pooled = t.mean_rows(z);
        let r = t.matmul(pooled, wh);
        let out = t.add_row(r, bh);
        if !t.value(out)[[0, 0]].is_finite() {
            return Err(Error::NonFinite(format!("risk for {:?}", bag.patient_id)));
        }
        Ok((t, ids, out))
    }

    /// Risk and `seed · ∂risk/∂θ` for one bag.
    pub(crate) fn risk_and_grad(
        &self,
        bag: &EmbeddingBag,
        noise: Option<TrainNoise>,
        seed: f64,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        let (tape, ids, out) = self.build(bag, noise)?;
        let risk = tape.value(out)[[0, 0]];
        let mut grads = tape.backward(out, Array2::from_elem((1, 1), seed));
        let g = ids
            .iter()
            .zip(&self.params)
            .map(|(&id, p)| grads[id].take().unwrap_or_else(|| Array2::zeros(p.raw_dim())))
            .collect();
        Ok((risk, g))
    }

    pub fn predict(&self, bags: &[EmbeddingBag]) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        bags.par_iter().map(|b| self.forward_bag(b, Mode::Eval)).collect()
    }
}

/// Average negative Breslow log partial likelihood with the risks as the
/// linear predictor: `−ℓ(r) / D`.
pub fn cox_nll(risks: &[f64], outcomes: &[SurvivalOutcome]) -> Result<f64> {
    Ok(cox_nll_and_grad(risks, outcomes)?.0)
}

pub fn cox_nll_and_grad(risks: &[f64], outcomes: &[SurvivalOutcome]) -> Result<(f64, Vec<f64>)> {
    let d = count_events(outcomes);
    if d == 0 {
        return Err(Error::NoEvents);
    }
    let (ll, g) = breslow_loglik_scores(risks, outcomes)?;
    let d = d as f64;
    Ok((-ll / d, g.into_iter().map(|x| -x / d).collect()))
}

/// Eval-mode loss over `bags` and its gradient with respect to every parameter.
pub fn loss_and_gradient(
    model: &DeepCoxModel,
    bags: &[EmbeddingBag],
    outcomes: &[SurvivalOutcome],
) -> Result<(f64, Vec<Array2<f64>>)> {
    let risks = model.predict(bags)?;
    let (loss, dr) = cox_nll_and_grad(&risks, outcomes)?;
    let mut total: Vec<Array2<f64>> = model.params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
    for (b, &g) in bags.iter().zip(&dr) {
        let (_, grads) = model.risk_and_grad(b, None, g)?;
        for (t, g) in total.iter_mut().zip(grads) {
            *t += &g;
        }
    }
    Ok((loss, total))
}

/// Largest relative error, over parameter arrays, between the analytic
/// gradient and central differences (step `h`):
/// `‖g_a − g_fd‖₂ / max(‖g_a‖₂, ‖g_fd‖₂)`. An array whose gradient norms are
/// both below [`FD_ZERO_NORM`] counts as 0: the loss is shift invariant, so
/// the output biases have an exactly zero gradient and their differences are
/// pure rounding noise (about ε/h).
pub const FD_ZERO_NORM: f64 = 1e-8;

pub fn finite_diff_check(
    model: &DeepCoxModel,
    bags: &[EmbeddingBag],
    outcomes: &[SurvivalOutcome],
    h: f64,
) -> Result<f64> {
    let (_, analytic) = loss_and_gradient(model, bags, outcomes)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (k, ga) in analytic.iter().enumerate() {
        let mut fd = Array2::zeros(ga.raw_dim());
        for idx in ndarray::indices(ga.raw_dim()) {
            let orig = model.params[k][idx];
            probe.params[k][idx] = orig + h;
            let up = cox_nll(&probe.predict(bags)?, outcomes)?;
            probe.params[k][idx] = orig - h;
            let down = cox_nll(&probe.predict(bags)?, outcomes)?;
            probe.params[k][idx] = orig;
            fd[idx] = (up - down) / (2.0 * h);
        }
        let na = ga.mapv(|x| x * x).sum().sqrt();
        let nf = fd.mapv(|x| x * x).sum().sqrt();
        let denom = na.max(nf);
        if denom > FD_ZERO_NORM {
            let diff = (ga - &fd).mapv(|x| x * x).sum().sqrt();
            worst = worst.max(diff / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coxph::{log_partial_likelihood, Ties};
    use rand_distr::{Distribution, StandardNormal};

    fn bags(n_bags: usize, tiles: usize, dim: usize, seed: u64) -> Vec<EmbeddingBag> {
        let mut rng = stream_rng(seed, &[]);
        (0..n_bags)
            .map(|i| {
                let v = Array2::from_shape_simple_fn((tiles + i % 2, dim), || {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    x as f32
                });
                EmbeddingBag::new(format!("b{i}"), v, None).unwrap()
            })
            .collect()
    }

    fn small(seed: u64) -> DeepCoxConfig {
        DeepCoxConfig {
            proj_dim: 16,
            n_heads: 4,
            n_landmarks: 3,
            seed,
            ..Default::default()
        }
    }

    fn outs(n: usize) -> Vec<SurvivalOutcome> {
        (0..n)
            .map(|i| SurvivalOutcome { time: (i * 37 % 11) as f64 + i as f64 * 0.01, event: i % 3 != 2 })
            .collect()
    }

    #[test]
    fn eval_forward_is_deterministic_and_permutation_invariant() {
        let m = DeepCoxModel::new(8, small(1)).unwrap();
        let b = &bags(1, 20, 8, 2)[0];
        let r = m.forward_bag(b, Mode::Eval).unwrap();
        assert_eq!(r, m.forward_bag(b, Mode::Eval).unwrap());
        let mut rev = b.vectors.clone();
        rev.invert_axis(ndarray::Axis(0));
        let rb = EmbeddingBag::new("r", rev, None).unwrap();
        assert!((m.forward_bag(&rb, Mode::Eval).unwrap() - r).abs() < 1e-6);
    }

    #[test]
    fn single_tile_attention_passes_values_through() {
        let m = DeepCoxModel::new(8, small(3)).unwrap();
        let b = &bags(1, 1, 8, 4)[0];
        let x = b.vectors.mapv(|v| v as f64);
        let p = &m.params;
        let h = (x.dot(&p[0]) + &p[1]).mapv(|v| v.max(0.0));
        let z = h.dot(&p[4]).dot(&p[5]) + &p[6];
        let expect = (z.dot(&p[7]) + &p[8])[[0, 0]];
        assert!((m.forward_bag(b, Mode::Eval).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = DeepCoxModel::new(8, small(1)).unwrap();
        assert!(matches!(
            m.forward_bag(&bags(1, 3, 5, 1)[0], Mode::Eval),
            Err(Error::DimMismatch { .. })
        ));
        assert!(DeepCoxModel::new(8, DeepCoxConfig { proj_dim: 10, n_heads: 4, ..small(0) }).is_err());
    }

    #[test]
    fn nll_matches_partial_likelihood() {
        let r = [0.3, -1.2, 0.8, 2.0, -0.1];
        let o = outs(5);
        let d = count_events(&o) as f64;
        let x = Array2::from_shape_vec((5, 1), r.to_vec()).unwrap();
        let ll = log_partial_likelihood(&[1.0], x.view(), &o, Ties::Breslow).unwrap();
        assert!((cox_nll(&r, &o).unwrap() + ll / d).abs() < 1e-12);
        let shifted: Vec<f64> = r.iter().map(|v| v + 3.7).collect();
        assert!((cox_nll(&r, &o).unwrap() - cox_nll(&shifted, &o).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn equal_risks_give_mean_log_risk_set_size() {
        let o: Vec<SurvivalOutcome> = (0..4).map(|i| SurvivalOutcome { time: i as f64, event: i != 1 }).collect();
        // Events at t = 0, 2, 3 with risk sets of size 4, 2, 1.
        let expect = (4.0f64.ln() + 2.0f64.ln() + 1.0f64.ln()) / 3.0;
        assert!((cox_nll(&[0.5; 4], &o).unwrap() - expect).abs() < 1e-12);
        let none = vec![SurvivalOutcome { time: 1.0, event: false }; 3];
        assert!(matches!(cox_nll(&[0.0; 3], &none), Err(Error::NoEvents)));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let b = bags(4, 6, 8, 5);
        let o = outs(4);
        let m = DeepCoxModel::new(8, small(6)).unwrap();
        let err = finite_diff_check(&m, &b, &o, 1e-5).unwrap();
        assert!(err < 1e-4, "attention model rel err {err}");
        let lin = DeepCoxModel::new(8, DeepCoxConfig { bypass_attention: true, ..small(6) }).unwrap();
        let err = finite_diff_check(&lin, &b, &o, 1e-5).unwrap();
        assert!(err < 1e-6, "linear model rel err {err}");
        let none = vec![SurvivalOutcome { time: 1.0, event: false }; 4];
        assert!(finite_diff_check(&m, &b, &none, 1e-5).is_err());
    }
}

//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use survfuse::coxph::{fit_cox, log_partial_likelihood, log_partial_likelihood_gradient, CoxFitOptions, Ties};
use survfuse::cvharness::{kfold, run_cv, run_fold, run_fold_leaky, CvConfig, MMEM, MMEM_UNIFORM};
use survfuse::datamodel::{EmbeddingBag, Endpoint, RiskScoreTable, SurvivalOutcome};
use survfuse::deepcox::{
    cox_nll, exact_attention, finite_diff_check, nystrom_attention, nystrom_attention_forced, DeepCoxConfig,
    DeepCoxModel, Mode,
};
use survfuse::ensemble::{fuse_risks, modality_weights, uniform_weights};
use survfuse::featsel::{forward_select, MAX_FEATURES};
use survfuse::metrics::{auroc, concordance_index, delong, km_curve, logrank_test};
use survfuse::preprocess::{draw_subsplits, fit_preprocess, PreprocessConfig};
use survfuse::rng::stream_rng;
use survfuse::synthgen::{gen_linear_cox_cohort, gen_multimodal_cohort, CohortSpec, MultimodalSpec, SynthModality, SynthModalityKind};
use survfuse::wsiprep::{tile_image, tissue_mask, WsiPrepConfig};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(
        elapsed < Duration::from_secs(limit_s),
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()),
    )
}

fn outs(times: &[f64], events: &[bool]) -> Vec<SurvivalOutcome> {
    times
        .iter()
        .zip(events)
        .map(|(&time, &event)| SurvivalOutcome { time, event })
        .collect()
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Partial likelihood straight from its definition (no tied times assumed).
fn naive_loglik(beta: &[f64], x: &Array2<f64>, o: &[SurvivalOutcome]) -> f64 {
    let eta: Vec<f64> = x.rows().into_iter().map(|r| r.iter().zip(beta).map(|(a, b)| a * b).sum()).collect();
    o.iter()
        .enumerate()
        .filter(|(_, oi)| oi.event)
        .map(|(i, oi)| {
            let s: f64 = o.iter().zip(&eta).filter(|(oj, _)| oj.time >= oi.time).map(|(_, e)| e.exp()).sum();
            eta[i] - s.ln()
        })
        .sum()
}

/// Coarse-to-fine grid maximum over [-5, 5]^p; `None` when the maximum sits
/// on the grid boundary (no finite optimum inside it).
fn grid_max(x: &Array2<f64>, o: &[SurvivalOutcome]) -> Option<(Vec<f64>, f64)> {
    let p = x.ncols();
    let mut center = vec![0.0; p];
    let mut half: f64 = 5.0;
    let mut best = f64::NEG_INFINITY;
    for (step, first) in [(0.05, true), (1e-3, false), (1e-4, false)] {
        let k = (half / step).round() as i64;
        let base = center.clone();
        let axis: Vec<f64> = (-k..=k).map(|i| i as f64 * step).collect();
        let mut visit = |b: Vec<f64>| {
            let l = naive_loglik(&b, x, o);
            if l > best {
                best = l;
                center = b;
            }
        };
        if p == 1 {
            for a in &axis {
                visit(vec![base[0] + a]);
            }
        } else {
            for a in &axis {
                for c in &axis {
                    visit(vec![base[0] + a, base[1] + c]);
                }
            }
        }
        if first && center.iter().any(|b| b.abs() > 4.0) {
            return None;
        }
        half = step * 2.0;
    }
    Some((center, best))
}

fn c1_cox_oracle() -> Check {
    let start = Instant::now();
    let x = Array2::from_shape_vec((4, 1), vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    let o = outs(&[1.0, 2.0, 3.0, 4.0], &[true; 4]);
    let closed = |b: f64| b - (2.0 + 2.0 * b.exp()).ln() - (1.0 + 2.0 * b.exp()).ln() - (1.0 + b.exp()).ln();
    let (mut arg, mut best) = (0.0, f64::NEG_INFINITY);
    for k in 0..=10_000 {
        let b = -5.0 + k as f64 * 1e-3;
        if closed(b) > best {
            best = closed(b);
            arg = b;
        }
    }
    let m = fit_cox(x.view(), &["x".into()], &o, &CoxFitOptions::default()).map_err(|e| e.to_string())?;
    ensure((m.beta[0] - arg).abs() < 1e-2, format!("4-patient beta {} vs grid {arg}", m.beta[0]))?;
    ensure((m.beta[0] + 0.94).abs() < 1e-2, format!("4-patient beta {}", m.beta[0]))?;

    let mut rng = stream_rng(101, &[]);
    let (mut used, mut skipped, mut worst) = (0, 0, 0.0f64);
    while used < 200 {
        let n = rng.random_range(4..=8);
        let p = rng.random_range(1..=2);
        let x = Array2::from_shape_simple_fn((n, p), || normal(&mut rng));
        let o: Vec<SurvivalOutcome> = (0..n)
            .map(|_| SurvivalOutcome {
                time: rng.random::<f64>() * 10.0 + 0.01,
                event: rng.random::<f64>() < 0.75,
            })
            .collect();
        if !o.iter().any(|s| s.event) {
            continue;
        }
        let Some((_, gmax)) = grid_max(&x, &o) else {
            skipped += 1;
            continue;
        };
        let names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
        let m = fit_cox(x.view(), &names, &o, &CoxFitOptions::default()).map_err(|e| e.to_string())?;
        let l = naive_loglik(&m.beta, &x, &o);
        worst = worst.max((l - gmax).abs());
        used += 1;
    }
    ensure(worst < 1e-6, format!("max |l(fit) - grid max| = {worst:.2e}"))?;
    within(start.elapsed(), 5)?;
    Ok(format!(
        "beta = {:.4} (grid {arg:.3}); 200 cohorts max gap {worst:.1e} ({skipped} without interior optimum skipped); {:.2}s",
        m.beta[0],
        start.elapsed().as_secs_f64()
    ))
}

fn small_deep(seed: u64) -> DeepCoxConfig {
    DeepCoxConfig {
        proj_dim: 8,
        n_heads: 2,
        n_landmarks: 3,
        dropout: 0.0,
        seed,
        ..Default::default()
    }
}

fn random_bags(n: usize, dim: usize, seed: u64) -> Vec<EmbeddingBag> {
    let mut rng = stream_rng(seed, &[]);
    (0..n)
        .map(|i| {
            let tiles = 4 + i % 5;
            let v = Array2::from_shape_simple_fn((tiles, dim), || normal(&mut rng) as f32);
            EmbeddingBag::new(format!("b{i}"), v, None).unwrap()
        })
        .collect()
}

fn c2_gradients() -> Check {
    let mut rng = stream_rng(202, &[]);
    let n = 12;
    let x = Array2::from_shape_simple_fn((n, 2), || normal(&mut rng));
    let o: Vec<SurvivalOutcome> = (0..n)
        .map(|i| SurvivalOutcome {
            time: (i % 7) as f64 + 1.0,
            event: i % 4 != 3,
        })
        .collect();
    let beta = [0.4, -0.7];
    let mut cox_worst = 0.0f64;
    for ties in [Ties::Breslow, Ties::Efron] {
        let g = log_partial_likelihood_gradient(&beta, x.view(), &o, ties).map_err(|e| e.to_string())?;
        let h = 1e-6;
        let fd: Vec<f64> = (0..2)
            .map(|k| {
                let (mut up, mut dn) = (beta, beta);
                up[k] += h;
                dn[k] -= h;
                let f = |b: &[f64]| log_partial_likelihood(b, x.view(), &o, ties).unwrap();
                (f(&up) - f(&dn)) / (2.0 * h)
            })
            .collect();
        let diff = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = g.iter().map(|a| a * a).sum::<f64>().sqrt();
        cox_worst = cox_worst.max(diff / norm);
    }
    ensure(cox_worst < 1e-6, format!("Cox gradient rel err {cox_worst:.2e}"))?;

    let bags = random_bags(6, 5, 203);
    let o = outs(&[3.0, 1.0, 4.0, 1.5, 5.0, 2.0], &[true, true, false, true, true, false]);
    let model = DeepCoxModel::new(5, small_deep(204)).map_err(|e| e.to_string())?;
    let deep = finite_diff_check(&model, &bags, &o, 1e-5).map_err(|e| e.to_string())?;
    ensure(deep < 1e-4, format!("deep gradient rel err {deep:.2e}"))?;
    Ok(format!("Cox rel err {cox_worst:.1e}, deep rel err {deep:.1e}"))
}

fn brute_cindex(r: &[f64], o: &[SurvivalOutcome]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0u64);
    for i in 0..o.len() {
        for j in 0..o.len() {
            if o[i].event && o[i].time < o[j].time {
                den += 1;
                num += if r[i] > r[j] {
                    1.0
                } else if r[i] == r[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (den > 0).then(|| num / den as f64)
}

fn brute_auc(s: &[f64], l: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] && !l[j] {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn brute_km(o: &[SurvivalOutcome], t: f64) -> f64 {
    let mut times: Vec<f64> = o.iter().filter(|s| s.event && s.time <= t).map(|s| s.time).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    times
        .iter()
        .map(|&u| {
            let at = o.iter().filter(|s| s.time >= u).count() as f64;
            let d = o.iter().filter(|s| s.event && s.time == u).count() as f64;
            1.0 - d / at
        })
        .product()
}

/// Log-rank statistic from the pooled sample with group membership flags.
fn brute_logrank(o: &[SurvivalOutcome], in_a: &[bool]) -> f64 {
    let mut times: Vec<f64> = o.iter().filter(|s| s.event).map(|s| s.time).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let (mut diff, mut var) = (0.0, 0.0);
    for u in times {
        let risk: Vec<usize> = (0..o.len()).filter(|&i| o[i].time >= u).collect();
        let n = risk.len() as f64;
        let na = risk.iter().filter(|&&i| in_a[i]).count() as f64;
        let d = risk.iter().filter(|&&i| o[i].event && o[i].time == u).count() as f64;
        let da = risk.iter().filter(|&&i| in_a[i] && o[i].event && o[i].time == u).count() as f64;
        diff += da - d * na / n;
        if n > 1.0 {
            var += d * na * (n - na) * (n - d) / (n * n * (n - 1.0));
        }
    }
    if var > 0.0 {
        diff * diff / var
    } else {
        0.0
    }
}

fn split_groups(o: &[SurvivalOutcome], in_a: &[bool]) -> (Vec<SurvivalOutcome>, Vec<SurvivalOutcome>) {
    let a = o.iter().zip(in_a).filter(|(_, &f)| f).map(|(s, _)| *s).collect();
    let b = o.iter().zip(in_a).filter(|(_, &f)| !f).map(|(s, _)| *s).collect();
    (a, b)
}

fn c3_metric_oracles() -> Check {
    let start = Instant::now();
    let a = outs(&[1.0, 2.0], &[true, true]);
    let b = outs(&[3.0, 4.0], &[true, true]);
    let hand = logrank_test(&a, &b).map_err(|e| e.to_string())?.chi2;
    ensure((hand - 2.88).abs() < 0.01, format!("hand log-rank chi2 {hand}"))?;

    let mut rng = stream_rng(303, &[]);
    let mut checked = [0usize; 4];
    for inst in 0..1000 {
        let n = rng.random_range(4..=50);
        // Coarse values so ties in time and in risk occur.
        let o: Vec<SurvivalOutcome> = (0..n)
            .map(|_| SurvivalOutcome {
                time: rng.random_range(1..=30) as f64,
                event: rng.random::<f64>() < 0.7,
            })
            .collect();
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64).collect();
        if let Some(c) = brute_cindex(&r, &o) {
            let got = concordance_index(&r, &o).map_err(|e| e.to_string())?;
            ensure(got == c, format!("instance {inst}: C {got} vs {c}"))?;
            checked[0] += 1;
        }
        let l: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        if l.iter().any(|&x| x) && l.iter().any(|&x| !x) {
            let got = auroc(&r, &l).map_err(|e| e.to_string())?;
            let want = brute_auc(&r, &l);
            ensure((got - want).abs() < 1e-12, format!("instance {inst}: AUROC {got} vs {want}"))?;
            checked[1] += 1;
        }
        let km = km_curve(&o).map_err(|e| e.to_string())?;
        for t in 0..=31 {
            let (got, want) = (km.survival_at(t as f64), brute_km(&o, t as f64));
            ensure((got - want).abs() < 1e-12, format!("instance {inst}: KM({t}) {got} vs {want}"))?;
        }
        checked[2] += 1;
        if l.iter().any(|&x| x) && l.iter().any(|&x| !x) {
            let (ga, gb) = split_groups(&o, &l);
            let got = logrank_test(&ga, &gb).map_err(|e| e.to_string())?.chi2;
            let want = brute_logrank(&o, &l);
            ensure((got - want).abs() < 1e-9 * want.max(1.0), format!("instance {inst}: chi2 {got} vs {want}"))?;
            checked[3] += 1;
        }
    }

    // Asymptotic p against a permutation null on moderately sized samples.
    let mut worst_p = 0.0f64;
    for inst in 0..10 {
        let n = 50;
        let l: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
        let shift = 0.3 * inst as f64 / 10.0;
        let o: Vec<SurvivalOutcome> = (0..n)
            .map(|i| {
                let rate = if l[i] { (shift).exp() } else { 1.0 };
                let t = -(1.0 - rng.random::<f64>()).ln() / rate;
                let c = rng.random::<f64>() * 3.0;
                SurvivalOutcome {
                    time: t.min(c),
                    event: t <= c,
                }
            })
            .collect();
        let (ga, gb) = split_groups(&o, &l);
        let lr = logrank_test(&ga, &gb).map_err(|e| e.to_string())?;
        let n_perm = 4000;
        let mut perm = l.clone();
        let mut hits = 0;
        for _ in 0..n_perm {
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            if brute_logrank(&o, &perm) >= lr.chi2 - 1e-12 {
                hits += 1;
            }
        }
        let p_perm = hits as f64 / n_perm as f64;
        worst_p = worst_p.max((p_perm - lr.p).abs());
    }
    ensure(worst_p < 0.02, format!("max |p - permutation p| = {worst_p:.3}"))?;
    within(start.elapsed(), 30)?;
    Ok(format!(
        "hand chi2 {hand:.3}; exact on {}/{}/{}/{} C/AUROC/KM/log-rank instances; p gap {worst_p:.3}; {:.1}s",
        checked[0],
        checked[1],
        checked[2],
        checked[3],
        start.elapsed().as_secs_f64()
    ))
}

fn c4_delong() -> Check {
    let mut rng = stream_rng(404, &[]);
    let n = 200;
    let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let scores: Vec<f64> = labels.iter().map(|&y| if y { 0.8 } else { 0.0 } + normal(&mut rng)).collect();
    let d = delong(&scores, None, &labels).map_err(|e| e.to_string())?;
    let reps = 2000;
    let mut aucs = Vec::with_capacity(reps);
    while aucs.len() < reps {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        if l.iter().any(|&x| x) && l.iter().any(|&x| !x) {
            aucs.push(brute_auc(&s, &l));
        }
    }
    let mean = aucs.iter().sum::<f64>() / reps as f64;
    let var = aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    let rel = (d.var - var).abs() / var;
    ensure(rel < 0.10, format!("DeLong var {:.3e} vs bootstrap {var:.3e}", d.var))?;
    Ok(format!("DeLong var {:.3e}, bootstrap var {var:.3e}, rel diff {:.1}%", d.var, rel * 100.0))
}

fn c5_nystrom() -> Check {
    let mut rng = stream_rng(505, &[]);
    let mut worst = 0.0f64;
    for n in [4usize, 16, 64, 128] {
        let d = 16;
        let mut m = || Array2::from_shape_simple_fn((n, d), || normal(&mut rng) * 0.5);
        let (q, k, v) = (m(), m(), m());
        let exact = exact_attention(q.view(), k.view(), v.view()).map_err(|e| e.to_string())?;
        let ny = nystrom_attention_forced(q.view(), k.view(), v.view(), n, 30).map_err(|e| e.to_string())?;
        let dev = (&exact - &ny).iter().fold(0.0f64, |a, x| a.max(x.abs()));
        worst = worst.max(dev);
        if n <= 64 {
            let fb = nystrom_attention(q.view(), k.view(), v.view(), 64, 6).map_err(|e| e.to_string())?;
            ensure(fb == exact, format!("fallback differs from exact attention at n = {n}"))?;
        }
    }
    ensure(worst < 1e-3, format!("max abs deviation {worst:.2e}"))?;
    Ok(format!("max abs deviation {worst:.1e}; fallback bit-exact"))
}

fn c6_deep_contracts() -> Check {
    let model = DeepCoxModel::new(6, small_deep(606)).map_err(|e| e.to_string())?;
    let mut rng = stream_rng(607, &[]);
    let mut worst_perm = 0.0f64;
    for b in random_bags(5, 6, 608) {
        let r = model.forward_bag(&b, Mode::Eval).map_err(|e| e.to_string())?;
        let mut order: Vec<usize> = (0..b.n_tiles()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let v = b.vectors.select(ndarray::Axis(0), &order);
        let pb = EmbeddingBag::new(b.patient_id.clone(), v, None).map_err(|e| e.to_string())?;
        let rp = model.forward_bag(&pb, Mode::Eval).map_err(|e| e.to_string())?;
        worst_perm = worst_perm.max((r - rp).abs());
    }
    ensure(worst_perm < 1e-6, format!("permutation changed risk by {worst_perm:.2e}"))?;

    let n = 30;
    let risks: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let o: Vec<SurvivalOutcome> = (0..n)
        .map(|i| SurvivalOutcome {
            time: (i % 9) as f64 + 1.0,
            event: rng.random::<f64>() < 0.6,
        })
        .collect();
    let d = o.iter().filter(|s| s.event).count() as f64;
    let nll = cox_nll(&risks, &o).map_err(|e| e.to_string())?;
    let x = Array2::from_shape_vec((n, 1), risks.clone()).unwrap();
    let ll = log_partial_likelihood(&[1.0], x.view(), &o, Ties::Breslow).map_err(|e| e.to_string())?;
    let gap = (nll + ll / d).abs();
    ensure(gap < 1e-12, format!("cox_nll vs partial likelihood gap {gap:.2e}"))?;
    let shifted: Vec<f64> = risks.iter().map(|r| r + 3.7).collect();
    let shift = (cox_nll(&shifted, &o).map_err(|e| e.to_string())? - nll).abs();
    ensure(shift < 1e-12, format!("shift changed loss by {shift:.2e}"))?;
    Ok(format!("permutation {worst_perm:.1e}, likelihood gap {gap:.1e}, shift {shift:.1e}"))
}

fn c7_fusion() -> Check {
    let mut rng = stream_rng(707, &[]);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let m = rng.random_range(1..=6);
        let names: Vec<String> = (0..m).map(|k| format!("m{k}")).collect();
        let p: Vec<f64> = (0..m).map(|_| rng.random_range(0.3..0.95)).collect();
        let w = modality_weights(&names, &p).map_err(|e| e.to_string())?;
        worst = worst.max((w.weights.iter().sum::<f64>() - 1.0).abs());
        let n = 7;
        let vals = Array2::from_shape_simple_fn((n, m), || normal(&mut rng));
        let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
        let t = RiskScoreTable::new(ids, names.clone(), vals.clone()).map_err(|e| e.to_string())?;
        let fused = fuse_risks(&t, &uniform_weights(&names).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        for (i, f) in fused.iter().enumerate() {
            let mean = vals.row(i).iter().sum::<f64>() / m as f64;
            ensure(*f == mean, format!("uniform fusion {f} vs mean {mean}"))?;
        }
    }
    ensure(worst < 1e-12, format!("weights sum off by {worst:.2e}"))?;
    Ok(format!("weight sum error {worst:.1e}; uniform fusion equals mean on 200 draws"))
}

fn c8_end_to_end() -> Check {
    let start = Instant::now();
    let spec = MultimodalSpec {
        n_patients: 300,
        seed: 1,
        ..Default::default()
    };
    let cohort = gen_multimodal_cohort(&spec).map_err(|e| e.to_string())?;
    let aligned = cohort.aligned(Endpoint::Os).map_err(|e| e.to_string())?;
    let cfg = CvConfig {
        deep: DeepCoxConfig {
            proj_dim: 16,
            n_heads: 4,
            n_landmarks: 8,
            epochs: 30,
            lr: 0.005,
            ..Default::default()
        },
        ..Default::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run = pool.install(|| run_cv(&aligned, Endpoint::Os, &cfg)).map_err(|e| e.to_string())?;
    let c = |name: &str| run.report.rows.iter().find(|r| r.model == name).map(|r| r.cindex).unwrap();
    let singles: Vec<(String, f64)> = ["clinical", "mrna", "wsi"].iter().map(|m| (m.to_string(), c(m))).collect();
    let best_single = singles.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let (mmem, uniform) = (c(MMEM), c(MMEM_UNIFORM));
    let summary = format!(
        "{}; mmem {mmem:.3}; uniform {uniform:.3}; {:.0}s",
        singles.iter().map(|(n, v)| format!("{n} {v:.3}")).collect::<Vec<_>>().join(", "),
        start.elapsed().as_secs_f64()
    );
    ensure(mmem > best_single && mmem > 0.75, format!("mmem not above singles and 0.75: {summary}"))?;
    ensure(uniform > best_single, format!("uniform not above singles: {summary}"))?;
    within(start.elapsed(), 300)?;
    Ok(summary)
}

fn c9_feature_selection() -> Check {
    let mut recovered = 0;
    let mut largest = 0;
    for run in 0..20u64 {
        let mut beta = vec![1.0, -1.0];
        beta.extend(std::iter::repeat_n(0.0, 28));
        let (t, o) = gen_linear_cox_cohort(&CohortSpec {
            n_patients: 200,
            beta,
            baseline_hazard: 1.0 / 1500.0,
            censor_max: Some(3650.0),
            seed: 900 + run,
        })
        .map_err(|e| e.to_string())?;
        let pc = PreprocessConfig::default();
        let splits = draw_subsplits(&o, pc.n_splits, pc.val_fraction, pc.max_split_retries, run, "os")
            .map_err(|e| e.to_string())?;
        let (report, z) = fit_preprocess(&t, &o, &splits, &pc).map_err(|e| e.to_string())?;
        if report.candidates.is_empty() {
            continue;
        }
        let (trace, _) = forward_select(&z, &o, &report.candidates, &splits, MAX_FEATURES, &pc.cox)
            .map_err(|e| e.to_string())?;
        largest = largest.max(trace.optimal_set.len());
        if ["x0", "x1"].iter().all(|f| trace.optimal_set.iter().any(|s| s == f)) {
            recovered += 1;
        }
    }
    ensure(largest <= MAX_FEATURES, format!("selected {largest} features"))?;
    ensure(recovered >= 16, format!("both planted features recovered in {recovered}/20 runs"))?;
    Ok(format!("recovered in {recovered}/20 runs; largest set {largest}"))
}

fn c10_leakage() -> Check {
    let table = |name: &str| SynthModality {
        name: name.into(),
        beta: 1.2,
        kind: SynthModalityKind::Table { n_noise: 8 },
    };
    let spec = MultimodalSpec {
        n_patients: 120,
        seed: 10,
        modalities: vec![table("clinical"), table("mrna")],
        ..Default::default()
    };
    let aligned = gen_multimodal_cohort(&spec)
        .and_then(|c| c.aligned(Endpoint::Os))
        .map_err(|e| e.to_string())?;
    let cfg = CvConfig::default();
    let folds = kfold(&aligned.patient_ids, cfg.n_folds, 10).map_err(|e| e.to_string())?;
    let clean = run_fold(&aligned, &folds, 0, Endpoint::Os, &cfg).map_err(|e| e.to_string())?;
    let leaky = run_fold_leaky(&aligned, &folds, 0, Endpoint::Os, &cfg).map_err(|e| e.to_string())?;
    ensure(clean.test_ids == leaky.test_ids, "fold membership differs")?;
    let diff = clean.fused.iter().zip(&leaky.fused).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    ensure(diff > 0.0, "leaky and clean fused scores are identical")?;
    Ok(format!("max fused score difference {diff:.3e}"))
}

fn c11_wsi() -> Check {
    let cfg = WsiPrepConfig::default();
    let blank = RgbImage::from_pixel(1200, 1200, Rgb([255, 255, 255]));
    let n_blank = tile_image(&blank, "blank", &cfg).map_err(|e| e.to_string())?.coords.len();
    ensure(n_blank == 0, format!("blank image gave {n_blank} tiles"))?;
    let full = RgbImage::from_pixel(1200, 1200, Rgb([200, 60, 140]));
    let n_full = tile_image(&full, "full", &cfg).map_err(|e| e.to_string())?.coords.len();
    ensure(n_full == 4, format!("full-tissue image gave {n_full} tiles"))?;

    let (w, h) = (600u32, 400u32);
    let half = RgbImage::from_fn(w, h, |x, _| if x < w / 2 { Rgb([200, 60, 140]) } else { Rgb([240, 235, 238]) });
    let mask = tissue_mask(&half, &cfg).map_err(|e| e.to_string())?;
    let mut bad = 0;
    for y in 0..h {
        for x in 0..w {
            let dist = (x as i64 - (w / 2) as i64).abs();
            if dist >= 7 && mask.get(x, y) != (x < w / 2) {
                bad += 1;
            }
        }
    }
    ensure(bad == 0, format!("{bad} pixels misclassified outside the 7-px band"))?;
    Ok(format!("blank {n_blank} tiles, full {n_full} tiles, half-tissue threshold {}", mask.threshold_used))
}

fn survfuse(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_survfuse"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!("survfuse {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)),
    )
}

fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn c12_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    let d = data.to_str().unwrap();
    survfuse(&["synth", "--seed", "12", "--n-patients", "80", "--out", d])?;
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic_cv.toml");
    fs::copy(&config, data.join("cv.toml")).map_err(|e| e.to_string())?;
    let cv = data.join("cv.toml");
    let (r1, r8) = (tmp.path().join("j1"), tmp.path().join("j8"));
    survfuse(&["cv", cv.to_str().unwrap(), "--jobs", "1", "--out", r1.to_str().unwrap()])?;
    survfuse(&["cv", cv.to_str().unwrap(), "--jobs", "8", "--out", r8.to_str().unwrap()])?;
    let (a, b) = (dir_files(&r1), dir_files(&r8));
    ensure(!a.is_empty(), "no report files written")?;
    let names = |v: &[(String, Vec<u8>)]| v.iter().map(|f| f.0.clone()).collect::<Vec<_>>();
    ensure(names(&a) == names(&b), "different report file sets")?;
    for (fa, fb) in a.iter().zip(&b) {
        ensure(fa.1 == fb.1, format!("{} differs between --jobs 1 and --jobs 8", fa.0))?;
    }
    Ok(format!("{} report files byte-identical", a.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 12] = [
        ("Cox fit oracle", c1_cox_oracle),
        ("gradient checks", c2_gradients),
        ("metric oracles", c3_metric_oracles),
        ("DeLong vs bootstrap variance", c4_delong),
        ("Nystrom attention", c5_nystrom),
        ("deep model contracts", c6_deep_contracts),
        ("fusion weights", c7_fusion),
        ("end-to-end fusion gain", c8_end_to_end),
        ("feature selection recovery", c9_feature_selection),
        ("leakage guard", c10_leakage),
        ("WSI preparation", c11_wsi),
        ("thread-count determinism", c12_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let r = f();
        let secs = start.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("acceptance {:>2} PASS {name}: {detail} [{secs:.1}s]", i + 1),
            Err(e) => {
                failed += 1;
                println!("acceptance {:>2} FAIL {name}: {e} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Softmax attention and its Nyström approximation.
//!
//! The Nyström form replaces `softmax(QKᵀ/√d)·V` by `F̃ Ã⁺ (B̃ V)` with
//! `F̃ = softmax(Q K̃ᵀ/√d)`, `Ã = softmax(Q̃ K̃ᵀ/√d)`, `B̃ = softmax(Q̃ Kᵀ/√d)`,
//! where `Q̃`, `K̃` are landmark rows (segment means) and `Ã⁺` is approximated
//! by the iteration `Z ← ¼ Z (13I − AZ (15I − AZ (7I − AZ)))`.

use ndarray::{Array2, ArrayView2};

use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};

/// Splits `n` rows into `m` contiguous segments whose sizes differ by at most one.
pub fn landmark_segments(n: usize, m: usize) -> Vec<(usize, usize)> {
    let m = m.min(n).max(1);
    let base = n / m;
    let extra = n % m;
    let mut segs = Vec::with_capacity(m);
    let mut start = 0;
    for k in 0..m {
        let len = base + usize::from(k < extra);
        segs.push((start, start + len));
        start += len;
    }
    segs
}

pub(crate) fn exact_on_tape(t: &mut Tape, q: NodeId, k: NodeId, v: NodeId) -> NodeId {
    let d = t.value(q).ncols() as f64;
    let kt = t.transpose(k);
    let logits = t.matmul(q, kt);
    let scaled = t.scale(logits, 1.0 / d.sqrt());
    let s = t.softmax_rows(scaled);
    t.matmul(s, v)
}

/// Exact attention when `n <= n_landmarks`, otherwise the Nyström form.
pub(crate) fn attention_on_tape(
    t: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    n_landmarks: usize,
    pinv_iters: usize,
) -> NodeId {
    if t.value(q).nrows() <= n_landmarks {
        return exact_on_tape(t, q, k, v);
    }
    nystrom_on_tape(t, q, k, v, n_landmarks, pinv_iters)
}

pub(crate) fn nystrom_on_tape(
    t: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    n_landmarks: usize,
    pinv_iters: usize,
) -> NodeId {
    let n = t.value(q).nrows();
    let inv_sqrt_d = 1.0 / (t.value(q).ncols() as f64).sqrt();
    let segs = landmark_segments(n, n_landmarks);
    let ql = t.segment_means(q, segs.clone());
    let kl = t.segment_means(k, segs);

    let kernel = |t: &mut Tape, a: NodeId, b: NodeId| {
        let bt = t.transpose(b);
        let logits = t.matmul(a, bt);
        let scaled = t.scale(logits, inv_sqrt_d);
        t.softmax_rows(scaled)
    };
    let f = kernel(t, q, kl);
    let a = kernel(t, ql, kl);
    let b = kernel(t, ql, k);

    let mut z = t.pinv_init(a);
    for _ in 0..pinv_iters {
        let az = t.matmul(a, z);
        let i7 = t.identity_minus(7.0, az);
        let p1 = t.matmul(az, i7);
        let i15 = t.identity_minus(15.0, p1);
        let p2 = t.matmul(az, i15);
        let i13 = t.identity_minus(13.0, p2);
        let zz = t.matmul(z, i13);
        z = t.scale(zz, 0.25);
    }
    let bv = t.matmul(b, v);
    let zbv = t.matmul(z, bv);
    t.matmul(f, zbv)
}

fn check_inputs(q: &ArrayView2<f64>, k: &ArrayView2<f64>, v: &ArrayView2<f64>) -> Result<()> {
    if q.nrows() == 0 || q.dim() != k.dim() || q.nrows() != v.nrows() {
        return Err(Error::InvalidArgument(format!(
            "attention shapes q {:?}, k {:?}, v {:?} are incompatible",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    Ok(())
}

fn finite(out: Array2<f64>) -> Result<Array2<f64>> {
    if out.iter().all(|x| x.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NonFinite("attention output".into()))
    }
}

/// `softmax(QKᵀ/√d)·V` with `d = Q.ncols()`.
pub fn exact_attention(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_inputs(&q, &k, &v)?;
    let mut t = Tape::new();
    let (qn, kn, vn) = (t.leaf(q.to_owned()), t.leaf(k.to_owned()), t.leaf(v.to_owned()));
    let out = exact_on_tape(&mut t, qn, kn, vn);
    finite(t.value(out).clone())
}

pub fn nystrom_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    n_landmarks: usize,
    pinv_iters: usize,
) -> Result<Array2<f64>> {
    check_inputs(&q, &k, &v)?;
    if n_landmarks == 0 {
        return Err(Error::InvalidArgument("n_landmarks must be positive".into()));
    }
    let mut t = Tape::new();
    let (qn, kn, vn) = (t.leaf(q.to_owned()), t.leaf(k.to_owned()), t.leaf(v.to_owned()));
    let out = attention_on_tape(&mut t, qn, kn, vn, n_landmarks, pinv_iters);
    finite(t.value(out).clone())
}

/// Nyström form even when `n <= n_landmarks` (no exact fallback).
pub fn nystrom_attention_forced(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    n_landmarks: usize,
    pinv_iters: usize,
) -> Result<Array2<f64>> {
    check_inputs(&q, &k, &v)?;
    if n_landmarks == 0 {
        return Err(Error::InvalidArgument("n_landmarks must be positive".into()));
    }
    let mut t = Tape::new();
    let (qn, kn, vn) = (t.leaf(q.to_owned()), t.leaf(k.to_owned()), t.leaf(v.to_owned()));
    let out = nystrom_on_tape(&mut t, qn, kn, vn, n_landmarks, pinv_iters);
    finite(t.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(n: usize, d: usize, seed: u64, scale: f64) -> Array2<f64> {
        let mut rng = stream_rng(seed, &[]);
        Array2::from_shape_simple_fn((n, d), || { let x: f64 = StandardNormal.sample(&mut rng); scale * x })
    }

    /// O(n²) reference written directly from the definition.
    fn oracle(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
        let (n, d) = q.dim();
        let mut out = Array2::zeros((n, v.ncols()));
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|c| q[[i, c]] * k[[j, c]]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for j in 0..n {
                for c in 0..v.ncols() {
                    out[[i, c]] += w[j] / z * v[[j, c]];
                }
            }
        }
        out
    }

    #[test]
    fn segments_are_even_and_contiguous() {
        assert_eq!(landmark_segments(10, 4), vec![(0, 3), (3, 6), (6, 8), (8, 10)]);
        assert_eq!(landmark_segments(3, 8), vec![(0, 1), (1, 2), (2, 3)]);
        assert_eq!(landmark_segments(128, 128).len(), 128);
    }

    #[test]
    fn short_sequences_use_exact_attention() {
        let (q, k, v) = (normal(8, 4, 1, 1.0), normal(8, 4, 2, 1.0), normal(8, 4, 3, 1.0));
        let exact = exact_attention(q.view(), k.view(), v.view()).unwrap();
        let ny = nystrom_attention(q.view(), k.view(), v.view(), 64, 6).unwrap();
        assert_eq!(exact, ny);
        let o = oracle(&q, &k, &v);
        assert!((&exact - &o).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn landmarks_equal_tokens_converges_to_exact() {
        for n in [16, 64, 128] {
            let (q, k, v) = (normal(n, 32, 4, 1.0), normal(n, 32, 5, 1.0), normal(n, 32, 6, 1.0));
            let approx = nystrom_attention_forced(q.view(), k.view(), v.view(), n, 30).unwrap();
            let dev = (&approx - &oracle(&q, &k, &v)).iter().fold(0.0f64, |m, d| m.max(d.abs()));
            assert!(dev < 1e-3, "n = {n}: max deviation {dev}");
        }
    }

    #[test]
    fn identical_rows_return_common_value() {
        let row = normal(1, 4, 7, 1.0);
        let rep = |n| Array2::from_shape_fn((n, 4), |(_, j)| row[[0, j]]);
        for (n, m) in [(5, 64), (100, 8)] {
            let out = nystrom_attention(rep(n).view(), rep(n).view(), rep(n).view(), m, 6).unwrap();
            for r in out.rows() {
                for (a, b) in r.iter().zip(row.row(0)) {
                    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        let a = normal(3, 2, 1, 1.0);
        let b = normal(4, 2, 1, 1.0);
        assert!(exact_attention(a.view(), b.view(), a.view()).is_err());
        assert!(nystrom_attention(a.view(), a.view(), a.view(), 0, 6).is_err());
    }
}

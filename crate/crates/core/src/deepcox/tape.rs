//! Minimal reverse-mode differentiation over dense f64 matrices.

use ndarray::{s, Array2, Axis};

pub(crate) type NodeId = usize;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// `a + b` with `b` a 1×d row broadcast over the rows of `a`.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    /// Elementwise product with a constant (dropout mask).
    MulConst(NodeId, Array2<f64>),
    SoftmaxRows(NodeId),
    /// Mean of each contiguous row range `[start, end)`.
    SegmentMeans(NodeId, Vec<(usize, usize)>),
    ColSlice(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    MeanRows(NodeId),
    /// `c·I − a` for square `a`.
    IdentityMinus(NodeId),
    /// `aᵀ / (max row-sum |a| · max col-sum |a|)`; remembers the maximizing
    /// row, column and both norms.
    PinvInit {
        a: NodeId,
        row: usize,
        col: usize,
        r: f64,
        c: f64,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub(crate) struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn mul_const(&mut self, a: NodeId, mask: Array2<f64>) -> NodeId {
        let v = self.value(a) * &mask;
        self.push(v, Op::MulConst(a, mask))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row /= s;
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn segment_means(&mut self, a: NodeId, segments: Vec<(usize, usize)>) -> NodeId {
        let x = self.value(a);
        let mut v = Array2::zeros((segments.len(), x.ncols()));
        for (k, &(s0, s1)) in segments.iter().enumerate() {
            let mean = x.slice(s![s0..s1, ..]).mean_axis(Axis(0)).expect("nonempty segment");
            v.row_mut(k).assign(&mean);
        }
        self.push(v, Op::SegmentMeans(a, segments))
    }

    pub fn col_slice(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::ColSlice(a, start, end))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("equal row counts");
        self.push(v, Op::ConcatCols(parts))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = x.mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn identity_minus(&mut self, c: f64, a: NodeId) -> NodeId {
        let mut v = -self.value(a);
        v.diag_mut().mapv_inplace(|x| x + c);
        self.push(v, Op::IdentityMinus(a))
    }

    pub fn pinv_init(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let abs = x.mapv(f64::abs);
        let rows = abs.sum_axis(Axis(1));
        let cols = abs.sum_axis(Axis(0));
        let argmax = |v: &ndarray::Array1<f64>| {
            v.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        };
        let (row, r) = argmax(&rows);
        let (col, c) = argmax(&cols);
        let v = x.t().to_owned() / (r * c);
        self.push(v, Op::PinvInit { a, row, col, r, c })
    }

    /// Back-propagates `seed · ∂out/∂node` and returns the gradient of every
    /// node (`None` when it does not influence `out`).
    pub fn backward(&self, out: NodeId, seed: Array2<f64>) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out] = Some(seed);

        fn acc(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
            match &mut grads[id] {
                Some(x) => *x += &g,
                slot => *slot = Some(g),
            }
        }

        for id in (0..=out).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => grads[id] = Some(g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::Relu(a) => {
                    let mut ga = g;
                    ndarray::Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, &x| {
                            if x <= 0.0 {
                                *g = 0.0
                            }
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::MulConst(a, mask) => acc(&mut grads, *a, g * mask),
                Op::SoftmaxRows(a) => {
                    let s = &node.value;
                    let dot = (&g * s).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, s * &(g - &dot));
                }
                Op::SegmentMeans(a, segs) => {
                    let x = self.value(*a);
                    let mut ga = Array2::zeros(x.raw_dim());
                    for (k, &(s0, s1)) in segs.iter().enumerate() {
                        let share = &g.row(k) / (s1 - s0) as f64;
                        for i in s0..s1 {
                            ga.row_mut(i).assign(&share);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ColSlice(a, start, end) => {
                    let x = self.value(*a);
                    let mut ga = Array2::zeros(x.raw_dim());
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::MeanRows(a) => {
                    let n = self.value(*a).nrows();
                    let ga = ndarray::Array2::from_shape_fn((n, g.ncols()), |(_, j)| g[[0, j]] / n as f64);
                    acc(&mut grads, *a, ga);
                }
                Op::IdentityMinus(a) => acc(&mut grads, *a, -g),
                Op::PinvInit { a, row, col, r, c } => {
                    let x = self.value(*a);
                    let s = r * c;
                    // Direct path through the transpose, then through the scale s.
                    let mut ga = g.t().to_owned() / s;
                    let dl_ds = -(&g * &node.value).sum() / s;
                    for j in 0..x.ncols() {
                        ga[[*row, j]] += dl_ds * c * x[[*row, j]].signum();
                    }
                    for i in 0..x.nrows() {
                        ga[[i, *col]] += dl_ds * r * x[[i, *col]].signum();
                    }
                    acc(&mut grads, *a, ga);
                }
            }
        }
        grads
    }
}

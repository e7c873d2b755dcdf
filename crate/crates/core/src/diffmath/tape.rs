//! Tape-based reverse-mode differentiation over 2-D float64 tensors.
//!
//! Operations append nodes to the tape; [`Tape::backward`] walks the record
//! in reverse and accumulates gradients into every node that (transitively)
//! depends on a trainable leaf. Shape mismatches are programmer errors and
//! panic with both shapes in the message.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Matmul(TensorRef, TensorRef),
    Add(TensorRef, TensorRef),
    AddBias(TensorRef, TensorRef),
    ConcatCols(TensorRef, TensorRef),
    Relu(TensorRef),
    LeakyRelu(TensorRef, f64),
    Scale(TensorRef, f64),
    RowScale(TensorRef, TensorRef),
    Gather(TensorRef, Rc<Vec<usize>>),
    SegmentSum(TensorRef, Rc<Vec<usize>>, usize),
    SegmentMean(TensorRef, Rc<Vec<usize>>, usize),
    SegmentSoftmax(TensorRef, Rc<Vec<usize>>),
    Dropout(TensorRef, Rc<Array2<f64>>),
    Sum(TensorRef),
    CrossEntropy {
        logits: TensorRef,
        labels: Rc<Vec<Option<usize>>>,
        weights: Rc<Vec<f64>>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. One tape per forward/backward pass; tapes and their
/// tensors stay on a single thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

/// Row-wise softmax, used to turn logits into probabilities outside the tape.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> TensorRef {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        TensorRef(self.nodes.len() - 1)
    }

    fn needs(&self, r: TensorRef) -> bool {
        self.nodes[r.0].requires_grad
    }

    /// Inserts a leaf tensor; trainable leaves receive gradients.
    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> TensorRef {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Inserts a non-trainable constant.
    pub fn constant(&mut self, value: Array2<f64>) -> TensorRef {
        self.leaf(value, false)
    }

    pub fn value(&self, r: TensorRef) -> &Array2<f64> {
        &self.nodes[r.0].value
    }

    /// Gradient accumulated for `r` by the last [`Tape::backward`] call.
    pub fn grad(&self, r: TensorRef) -> Option<&Array2<f64>> {
        self.grads[r.0].as_ref()
    }

    pub fn shape(&self, r: TensorRef) -> (usize, usize) {
        self.nodes[r.0].value.dim()
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(
            ac, br,
            "matmul shape mismatch: ({ar}, {ac}) x ({br}, {bc})"
        );
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let rg = self.needs(a) || self.needs(b);
        self.push(value, Op::Matmul(a, b), rg)
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "add shape mismatch: {:?} + {:?}",
            self.shape(a),
            self.shape(b)
        );
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a 1×d bias row to every row of an n×d tensor.
    pub fn add_bias(&mut self, x: TensorRef, bias: TensorRef) -> TensorRef {
        let (_, xc) = self.shape(x);
        let (br, bc) = self.shape(bias);
        assert!(
            br == 1 && bc == xc,
            "add_bias shape mismatch: {:?} + {:?}",
            self.shape(x),
            self.shape(bias)
        );
        let value = &self.nodes[x.0].value + &self.nodes[bias.0].value;
        let rg = self.needs(x) || self.needs(bias);
        self.push(value, Op::AddBias(x, bias), rg)
    }

    pub fn concat_cols(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ar, br, "concat_cols row mismatch: ({ar}, {ac}) || ({br}, {bc})");
        let mut value = Array2::zeros((ar, ac + bc));
        value
            .slice_mut(ndarray::s![.., 0..ac])
            .assign(&self.nodes[a.0].value);
        value
            .slice_mut(ndarray::s![.., ac..])
            .assign(&self.nodes[b.0].value);
        let rg = self.needs(a) || self.needs(b);
        self.push(value, Op::ConcatCols(a, b), rg)
    }

    pub fn relu(&mut self, x: TensorRef) -> TensorRef {
        let value = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        let rg = self.needs(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: TensorRef, slope: f64) -> TensorRef {
        let value = self.nodes[x.0].value.mapv(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.needs(x);
        self.push(value, Op::LeakyRelu(x, slope), rg)
    }

    pub fn scale(&mut self, x: TensorRef, c: f64) -> TensorRef {
        let value = self.nodes[x.0].value.mapv(|v| v * c);
        let rg = self.needs(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Multiplies each row of an n×d tensor by the matching entry of an n×1
    /// column; differentiable in both arguments.
    pub fn row_scale(&mut self, x: TensorRef, s: TensorRef) -> TensorRef {
        let (xr, _) = self.shape(x);
        let (sr, sc) = self.shape(s);
        assert!(
            sr == xr && sc == 1,
            "row_scale shape mismatch: {:?} scaled by {:?}",
            self.shape(x),
            self.shape(s)
        );
        let mut value = self.nodes[x.0].value.clone();
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            let f = self.nodes[s.0].value[[i, 0]];
            row.mapv_inplace(|v| v * f);
        }
        let rg = self.needs(x) || self.needs(s);
        self.push(value, Op::RowScale(x, s), rg)
    }

    /// Selects rows by index; an index may repeat.
    pub fn gather(&mut self, x: TensorRef, idx: Rc<Vec<usize>>) -> TensorRef {
        let (rows, cols) = self.shape(x);
        let mut value = Array2::zeros((idx.len(), cols));
        for (o, &i) in idx.iter().enumerate() {
            assert!(i < rows, "gather index {i} out of bounds for {rows} rows");
            value.row_mut(o).assign(&self.nodes[x.0].value.row(i));
        }
        let rg = self.needs(x);
        self.push(value, Op::Gather(x, idx), rg)
    }

    /// Sums rows into `n_segments` buckets; empty buckets stay zero.
    pub fn segment_sum(&mut self, x: TensorRef, seg: Rc<Vec<usize>>, n_segments: usize) -> TensorRef {
        let (rows, cols) = self.shape(x);
        assert_eq!(seg.len(), rows, "segment_sum: {} segment ids for {rows} rows", seg.len());
        let mut value = Array2::zeros((n_segments, cols));
        for (i, &s) in seg.iter().enumerate() {
            assert!(s < n_segments, "segment id {s} out of range {n_segments}");
            let mut row = value.row_mut(s);
            row += &self.nodes[x.0].value.row(i);
        }
        let rg = self.needs(x);
        self.push(value, Op::SegmentSum(x, seg, n_segments), rg)
    }

    /// Averages rows per bucket; empty buckets stay zero.
    pub fn segment_mean(&mut self, x: TensorRef, seg: Rc<Vec<usize>>, n_segments: usize) -> TensorRef {
        let (rows, cols) = self.shape(x);
        assert_eq!(seg.len(), rows, "segment_mean: {} segment ids for {rows} rows", seg.len());
        let mut value = Array2::zeros((n_segments, cols));
        let mut counts = vec![0usize; n_segments];
        for (i, &s) in seg.iter().enumerate() {
            let mut row = value.row_mut(s);
            row += &self.nodes[x.0].value.row(i);
            counts[s] += 1;
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                let mut row = value.row_mut(s);
                row.mapv_inplace(|v| v / c as f64);
            }
        }
        let rg = self.needs(x);
        self.push(value, Op::SegmentMean(x, seg, n_segments), rg)
    }

    /// Softmax of an n×1 score column within each segment. Scores sharing a
    /// segment id compete; every segment's weights sum to 1.
    pub fn segment_softmax(&mut self, scores: TensorRef, seg: Rc<Vec<usize>>) -> TensorRef {
        let (rows, cols) = self.shape(scores);
        assert!(cols == 1, "segment_softmax expects an n x 1 column, got {:?}", self.shape(scores));
        assert_eq!(seg.len(), rows);
        let n_segments = seg.iter().copied().max().map_or(0, |m| m + 1);
        let src = &self.nodes[scores.0].value;
        let mut max = vec![f64::NEG_INFINITY; n_segments];
        for (i, &s) in seg.iter().enumerate() {
            max[s] = max[s].max(src[[i, 0]]);
        }
        let mut value = Array2::zeros((rows, 1));
        let mut sums = vec![0.0f64; n_segments];
        for (i, &s) in seg.iter().enumerate() {
            let e = (src[[i, 0]] - max[s]).exp();
            value[[i, 0]] = e;
            sums[s] += e;
        }
        for (i, &s) in seg.iter().enumerate() {
            value[[i, 0]] /= sums[s];
        }
        let rg = self.needs(scores);
        self.push(value, Op::SegmentSoftmax(scores, seg), rg)
    }

    /// Inverted dropout: keeps entries with probability 1−p and scales them
    /// by 1/(1−p). `p = 0` is the identity; a fixed seed reproduces masks.
    pub fn dropout(&mut self, x: TensorRef, p: f64, seed: u64) -> TensorRef {
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0, 1), got {p}");
        if p == 0.0 {
            return x;
        }
        let shape = self.shape(x);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let mask = Array2::from_shape_fn(shape, |_| {
            if rng.random::<f64>() >= p {
                keep
            } else {
                0.0
            }
        });
        let value = &self.nodes[x.0].value * &mask;
        let rg = self.needs(x);
        self.push(value, Op::Dropout(x, Rc::new(mask)), rg)
    }

    /// Sum of all entries, as a 1×1 tensor.
    pub fn sum(&mut self, x: TensorRef) -> TensorRef {
        let value = Array2::from_elem((1, 1), self.nodes[x.0].value.sum());
        let rg = self.needs(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Class-weighted cross-entropy, averaged over labelled rows:
    /// mean of w\[y\] · (−log softmax(logits)\[y\]). Rows with `None` labels
    /// are ignored.
    pub fn cross_entropy(
        &mut self,
        logits: TensorRef,
        labels: Rc<Vec<Option<usize>>>,
        weights: Rc<Vec<f64>>,
    ) -> TensorRef {
        let (rows, cols) = self.shape(logits);
        assert_eq!(labels.len(), rows, "cross_entropy: {} labels for {rows} rows", labels.len());
        assert_eq!(weights.len(), cols, "cross_entropy: {} weights for {cols} classes", weights.len());
        let probs = softmax_rows(&self.nodes[logits.0].value);
        let mut loss = 0.0;
        let mut n = 0usize;
        for (i, label) in labels.iter().enumerate() {
            if let Some(y) = label {
                assert!(*y < cols, "label {y} out of range for {cols} classes");
                loss += weights[*y] * (-(probs[[i, *y]].max(1e-300)).ln());
                n += 1;
            }
        }
        if n > 0 {
            loss /= n as f64;
        }
        let rg = self.needs(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                labels,
                weights,
            },
            rg,
        )
    }

    fn accumulate(&mut self, r: TensorRef, delta: Array2<f64>) {
        if !self.nodes[r.0].requires_grad {
            return;
        }
        match &mut self.grads[r.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Propagates gradients from a scalar loss back to every trainable leaf.
    /// Gradients from a previous backward call are cleared first.
    pub fn backward(&mut self, loss: TensorRef) {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss, got {:?}", self.shape(loss));
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].take().expect("checked above");
            match self.nodes[i].op.clone() {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    if self.needs(a) {
                        let da = g.dot(&self.nodes[b.0].value.t());
                        self.accumulate(a, da);
                    }
                    if self.needs(b) {
                        let db = self.nodes[a.0].value.t().dot(&g);
                        self.accumulate(b, db);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g.clone());
                }
                Op::AddBias(x, bias) => {
                    if self.needs(bias) {
                        let mut db = Array2::zeros((1, g.ncols()));
                        for row in g.rows() {
                            let mut target = db.row_mut(0);
                            target += &row;
                        }
                        self.accumulate(bias, db);
                    }
                    self.accumulate(x, g.clone());
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.shape(a).1;
                    self.accumulate(a, g.slice(ndarray::s![.., 0..ac]).to_owned());
                    self.accumulate(b, g.slice(ndarray::s![.., ac..]).to_owned());
                }
                Op::Relu(x) => {
                    let dx = ndarray::Zip::from(&g)
                        .and(&self.nodes[x.0].value)
                        .map_collect(|&gv, &xv| if xv > 0.0 { gv } else { 0.0 });
                    self.accumulate(x, dx);
                }
                Op::LeakyRelu(x, slope) => {
                    let dx = ndarray::Zip::from(&g)
                        .and(&self.nodes[x.0].value)
                        .map_collect(|&gv, &xv| if xv > 0.0 { gv } else { slope * gv });
                    self.accumulate(x, dx);
                }
                Op::Scale(x, c) => {
                    self.accumulate(x, g.mapv(|v| v * c));
                }
                Op::RowScale(x, s) => {
                    if self.needs(x) {
                        let mut dx = g.clone();
                        for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                            let f = self.nodes[s.0].value[[r, 0]];
                            row.mapv_inplace(|v| v * f);
                        }
                        self.accumulate(x, dx);
                    }
                    if self.needs(s) {
                        let xv = &self.nodes[x.0].value;
                        let mut ds = Array2::zeros((g.nrows(), 1));
                        for r in 0..g.nrows() {
                            let mut acc = 0.0;
                            for c in 0..g.ncols() {
                                acc += g[[r, c]] * xv[[r, c]];
                            }
                            ds[[r, 0]] = acc;
                        }
                        self.accumulate(s, ds);
                    }
                }
                Op::Gather(x, idx) => {
                    if self.needs(x) {
                        let mut dx = Array2::zeros(self.shape(x));
                        for (o, &i) in idx.iter().enumerate() {
                            let mut row = dx.row_mut(i);
                            row += &g.row(o);
                        }
                        self.accumulate(x, dx);
                    }
                }
                Op::SegmentSum(x, seg, _) => {
                    if self.needs(x) {
                        let mut dx = Array2::zeros(self.shape(x));
                        for (i, &s) in seg.iter().enumerate() {
                            dx.row_mut(i).assign(&g.row(s));
                        }
                        self.accumulate(x, dx);
                    }
                }
                Op::SegmentMean(x, seg, n_segments) => {
                    if self.needs(x) {
                        let mut counts = vec![0usize; n_segments];
                        for &s in seg.iter() {
                            counts[s] += 1;
                        }
                        let mut dx = Array2::zeros(self.shape(x));
                        for (i, &s) in seg.iter().enumerate() {
                            let inv = 1.0 / counts[s] as f64;
                            let mut row = dx.row_mut(i);
                            row.assign(&g.row(s));
                            row.mapv_inplace(|v| v * inv);
                        }
                        self.accumulate(x, dx);
                    }
                }
                Op::SegmentSoftmax(scores, seg) => {
                    if self.needs(scores) {
                        // dL/ds_i = a_i (g_i − Σ_{j∈seg} a_j g_j)
                        let alpha = &self.nodes[i].value;
                        let n_segments = seg.iter().copied().max().map_or(0, |m| m + 1);
                        let mut inner = vec![0.0f64; n_segments];
                        for (r, &s) in seg.iter().enumerate() {
                            inner[s] += alpha[[r, 0]] * g[[r, 0]];
                        }
                        let mut ds = Array2::zeros(g.dim());
                        for (r, &s) in seg.iter().enumerate() {
                            ds[[r, 0]] = alpha[[r, 0]] * (g[[r, 0]] - inner[s]);
                        }
                        self.accumulate(scores, ds);
                    }
                }
                Op::Dropout(x, mask) => {
                    self.accumulate(x, &g * mask.as_ref());
                }
                Op::Sum(x) => {
                    let dx = Array2::from_elem(self.shape(x), g[[0, 0]]);
                    self.accumulate(x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    weights,
                } => {
                    if self.needs(logits) {
                        let probs = softmax_rows(&self.nodes[logits.0].value);
                        let n = labels.iter().filter(|l| l.is_some()).count().max(1) as f64;
                        let scale = g[[0, 0]] / n;
                        let mut dl = Array2::zeros(probs.dim());
                        for (r, label) in labels.iter().enumerate() {
                            if let Some(y) = label {
                                let w = weights[*y];
                                for c in 0..probs.ncols() {
                                    let onehot = if c == *y { 1.0 } else { 0.0 };
                                    dl[[r, c]] = scale * w * (probs[[r, c]] - onehot);
                                }
                            }
                        }
                        self.accumulate(logits, dl);
                    }
                }
            }
            self.grads[i] = Some(g);
        }
    }
}

//! Minimal reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation eagerly (values are computed as nodes
//! are added) and [`Graph::backward`] walks the tape in reverse. Nodes that do
//! not depend on any parameter carry no gradient.

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Spatial geometry of an HWC feature map stored one image per row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl MapShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    WeightedSum { base: Var, other: Var, weight: f64 },
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Relu(Var),
    Conv3x3 { input: Var, weight: Var, bias: Var, shape: MapShape },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    GlobalAvgPool { input: Var, shape: MapShape },
    GroupMean { input: Var, groups: Vec<Vec<usize>> },
    NormalizeRows { input: Var, norms: Vec<f64>, eps: Option<f64> },
    MaskDiagonal(Var),
    ConcatCols(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix },
    MeanScalars(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of leaf nodes indexed by [`Var`]; `None` for constants and
/// parameters the loss does not depend on.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), t)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMulBt(a, b), t)
    }

    /// Adds a 1×C row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, c), "add_row bias shape");
        let mut value = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            for (v, b) in value.row_mut(i).iter_mut().zip(&bias) {
                *v += b;
            }
        }
        let t = self.tracked(a) || self.tracked(row);
        self.push(value, Op::AddRow(a, row), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), t)
    }

    /// `base + weight * other`, evaluated elementwise with a single rounding.
    pub fn weighted_sum(&mut self, base: Var, other: Var, weight: f64) -> Var {
        let a = self.value(base);
        let b = self.value(other);
        assert_eq!(a.shape(), b.shape(), "weighted_sum shape");
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| weight.mul_add(y, x))
            .collect();
        let value = Matrix::from_vec(a.rows(), a.cols(), data);
        let t = self.tracked(base) || self.tracked(other);
        self.push(value, Op::WeightedSum { base, other, weight }, t)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scaled(s);
        let t = self.tracked(a);
        self.push(value, Op::Scale(a, s), t)
    }

    /// Multiplies every entry of `a` by the 1×1 value `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let value = self.value(a).scaled(sv);
        let t = self.tracked(a) || self.tracked(s);
        self.push(value, Op::MulScalar(a, s), t)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let t = self.tracked(a);
        self.push(value, Op::Exp(a), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let t = self.tracked(a);
        self.push(value, Op::Relu(a), t)
    }

    /// 3×3 convolution, stride 1, zero padding 1. `weight` is `cout × (9·cin)`
    /// laid out as `[(ky·3 + kx)·cin + ci]`; `bias` is `1 × cout`.
    pub fn conv3x3(&mut self, input: Var, weight: Var, bias: Var, shape: MapShape) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        assert_eq!(x.cols(), shape.len(), "conv input shape");
        assert_eq!(w.cols(), 9 * shape.channels, "conv weight shape");
        let cout = w.rows();
        assert_eq!(b.shape(), (1, cout), "conv bias shape");
        let out_shape = MapShape {
            channels: cout,
            ..shape
        };
        let mut out = Matrix::zeros(x.rows(), out_shape.len());
        let mut col = vec![0.0; 9 * shape.channels];
        for n in 0..x.rows() {
            let img = x.row(n);
            for yy in 0..shape.height {
                for xx in 0..shape.width {
                    im2col_at(img, shape, yy, xx, &mut col);
                    let base = out_shape.index(yy, xx, 0);
                    let orow = out.row_mut(n);
                    for co in 0..cout {
                        orow[base + co] = dot(w.row(co), &col) + b.data()[co];
                    }
                }
            }
        }
        let t = self.tracked(input) || self.tracked(weight) || self.tracked(bias);
        self.push(
            out,
            Op::Conv3x3 {
                input,
                weight,
                bias,
                shape,
            },
            t,
        )
    }

    /// 2×2 max pooling with stride 2 (floor on odd sizes).
    pub fn max_pool2(&mut self, input: Var, shape: MapShape) -> (Var, MapShape) {
        let x = self.value(input);
        assert_eq!(x.cols(), shape.len(), "pool input shape");
        let out_shape = MapShape {
            height: shape.height / 2,
            width: shape.width / 2,
            channels: shape.channels,
        };
        let mut out = Matrix::zeros(x.rows(), out_shape.len());
        let mut argmax = vec![0usize; x.rows() * out_shape.len()];
        for n in 0..x.rows() {
            let img = x.row(n);
            for oy in 0..out_shape.height {
                for ox in 0..out_shape.width {
                    for c in 0..shape.channels {
                        let mut best_i = shape.index(2 * oy, 2 * ox, c);
                        let mut best = img[best_i];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = shape.index(2 * oy + dy, 2 * ox + dx, c);
                            if img[i] > best {
                                best = img[i];
                                best_i = i;
                            }
                        }
                        let o = out_shape.index(oy, ox, c);
                        out.set(n, o, best);
                        argmax[n * out_shape.len() + o] = best_i;
                    }
                }
            }
        }
        let t = self.tracked(input);
        (self.push(out, Op::MaxPool2 { input, argmax }, t), out_shape)
    }

    /// Mean over spatial positions: `B × (H·W·C)` → `B × C`.
    pub fn global_avg_pool(&mut self, input: Var, shape: MapShape) -> Var {
        let x = self.value(input);
        let hw = (shape.height * shape.width) as f64;
        let mut out = Matrix::zeros(x.rows(), shape.channels);
        for n in 0..x.rows() {
            let img = x.row(n);
            let orow = out.row_mut(n);
            for p in 0..shape.height * shape.width {
                for c in 0..shape.channels {
                    orow[c] += img[p * shape.channels + c];
                }
            }
            for v in orow.iter_mut() {
                *v /= hw;
            }
        }
        let t = self.tracked(input);
        self.push(out, Op::GlobalAvgPool { input, shape }, t)
    }

    /// Row `g` of the output is the mean of the input rows listed in `groups[g]`.
    pub fn group_mean(&mut self, input: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let x = self.value(input);
        let mut out = Matrix::zeros(groups.len(), x.cols());
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "prototype group {g} has no members"
                )));
            }
            let orow = out.row_mut(g);
            for &r in rows {
                for (o, v) in orow.iter_mut().zip(x.row(r)) {
                    *o += v;
                }
            }
            let n = rows.len() as f64;
            for o in orow.iter_mut() {
                *o /= n;
            }
        }
        let t = self.tracked(input);
        Ok(self.push(out, Op::GroupMean { input, groups }, t))
    }

    /// L2-normalizes each row. With `eps = None` a zero-norm row is an error;
    /// with `Some(eps)` the norm is floored at `eps`.
    pub fn normalize_rows(&mut self, input: Var, eps: Option<f64>) -> Result<Var> {
        let x = self.value(input);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let raw = dot(x.row(i), x.row(i)).sqrt();
            if !raw.is_finite() {
                return Err(Error::NonFinite(format!("row {i} has non-finite norm")));
            }
            let n = match eps {
                None if raw == 0.0 => {
                    return Err(Error::DegenerateVector(format!(
                        "row {i} has zero norm"
                    )))
                }
                None => raw,
                Some(e) => raw.max(e),
            };
            for v in out.row_mut(i) {
                *v /= n;
            }
            norms.push(n);
        }
        let t = self.tracked(input);
        Ok(self.push(out, Op::NormalizeRows { input, norms, eps }, t))
    }

    /// Replaces the diagonal of a square matrix with `-inf`.
    pub fn mask_diagonal(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.rows(), value.cols(), "mask_diagonal on non-square");
        for i in 0..value.rows() {
            value.set(i, i, f64::NEG_INFINITY);
        }
        let t = self.tracked(a);
        self.push(value, Op::MaskDiagonal(a), t)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.rows(), bv.rows(), "concat_cols rows");
        let mut value = Matrix::zeros(av.rows(), av.cols() + bv.cols());
        for i in 0..av.rows() {
            let row = value.row_mut(i);
            row[..av.cols()].copy_from_slice(av.row(i));
            row[av.cols()..].copy_from_slice(bv.row(i));
        }
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::ConcatCols(a, b), t)
    }

    /// Mean over rows of `-log softmax(logits)[target]`. Entries equal to
    /// `-inf` are excluded from the normalizer.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} logit rows for {} targets",
                z.rows(),
                targets.len()
            )));
        }
        if z.rows() == 0 {
            return Err(Error::InvalidArgument("cross entropy over empty batch".into()));
        }
        let mut probs = Matrix::zeros(z.rows(), z.cols());
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= z.cols() {
                return Err(Error::InvalidArgument(format!(
                    "target {t} out of range for {} classes",
                    z.cols()
                )));
            }
            let row = z.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() || !row[t].is_finite() {
                return Err(Error::NonFinite(format!("logit row {i}")));
            }
            let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            total += lse - row[t];
            for (p, &v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (v - m).exp() / sum;
            }
        }
        let value = Matrix::scalar(total / targets.len() as f64);
        let t = self.tracked(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            t,
        ))
    }

    /// Arithmetic mean of 1×1 nodes.
    pub fn mean_scalars(&mut self, items: &[Var]) -> Var {
        assert!(!items.is_empty(), "mean of zero scalars");
        let sum: f64 = items.iter().map(|&v| self.value(v).item()).sum();
        let value = Matrix::scalar(sum / items.len() as f64);
        let t = items.iter().any(|&v| self.tracked(v));
        self.push(value, Op::MeanScalars(items.to_vec()), t)
    }

    /// Reverse pass from a 1×1 `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let acc = |v: Var, delta: Matrix, grads: &mut Vec<Option<Matrix>>| {
                if !self.nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if self.tracked(*a) {
                        acc(*a, g.matmul_bt(bv), &mut grads);
                    }
                    if self.tracked(*b) {
                        acc(*b, av.matmul_at(&g), &mut grads);
                    }
                }
                Op::MatMulBt(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if a == b {
                        // d(A·Aᵀ) = (G + Gᵀ)·A
                        let mut sym = g.clone();
                        sym.add_assign(&g.transpose());
                        acc(*a, sym.matmul(av), &mut grads);
                    } else {
                        if self.tracked(*a) {
                            acc(*a, g.matmul(bv), &mut grads);
                        }
                        if self.tracked(*b) {
                            acc(*b, g.matmul_at(av), &mut grads);
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if self.tracked(*row) {
                        let mut gb = Matrix::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for (o, v) in gb.data_mut().iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                        acc(*row, gb, &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*b, g.clone(), &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::WeightedSum {
                    base,
                    other,
                    weight,
                } => {
                    acc(*other, g.scaled(*weight), &mut grads);
                    acc(*base, g, &mut grads);
                }
                Op::Scale(a, s) => acc(*a, g.scaled(*s), &mut grads),
                Op::MulScalar(a, s) => {
                    let sv = self.value(*s).item();
                    if self.tracked(*s) {
                        let gs = dot(g.data(), self.value(*a).data());
                        acc(*s, Matrix::scalar(gs), &mut grads);
                    }
                    acc(*a, g.scaled(sv), &mut grads);
                }
                Op::Exp(a) => {
                    let mut d = g;
                    for (dv, y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *dv *= y;
                    }
                    acc(*a, d, &mut grads);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    for (dv, y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        if *y <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::Conv3x3 {
                    input,
                    weight,
                    bias,
                    shape,
                } => {
                    let (gi, gw, gb) = conv3x3_backward(
                        self.value(*input),
                        self.value(*weight),
                        &g,
                        *shape,
                        self.tracked(*input),
                    );
                    acc(*weight, gw, &mut grads);
                    acc(*bias, gb, &mut grads);
                    if let Some(gi) = gi {
                        acc(*input, gi, &mut grads);
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let x = self.value(*input);
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    let per = g.cols();
                    for n in 0..g.rows() {
                        for o in 0..per {
                            let src = argmax[n * per + o];
                            let v = g.get(n, o);
                            d.row_mut(n)[src] += v;
                        }
                    }
                    acc(*input, d, &mut grads);
                }
                Op::GlobalAvgPool { input, shape } => {
                    let hw = (shape.height * shape.width) as f64;
                    let mut d = Matrix::zeros(g.rows(), shape.len());
                    for n in 0..g.rows() {
                        let grow = g.row(n).to_vec();
                        let drow = d.row_mut(n);
                        for p in 0..shape.height * shape.width {
                            for c in 0..shape.channels {
                                drow[p * shape.channels + c] = grow[c] / hw;
                            }
                        }
                    }
                    acc(*input, d, &mut grads);
                }
                Op::GroupMean { input, groups } => {
                    let x = self.value(*input);
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for (gi, rows) in groups.iter().enumerate() {
                        let n = rows.len() as f64;
                        for &r in rows {
                            for (o, v) in d.row_mut(r).iter_mut().zip(g.row(gi)) {
                                *o += v / n;
                            }
                        }
                    }
                    acc(*input, d, &mut grads);
                }
                Op::NormalizeRows { input, norms, eps } => {
                    let x = self.value(*input);
                    let y = &node.value;
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for (i, &n) in norms.iter().enumerate() {
                        let floored = eps.is_some_and(|e| dot(x.row(i), x.row(i)).sqrt() < e);
                        let drow = d.row_mut(i);
                        if floored {
                            for (o, gv) in drow.iter_mut().zip(g.row(i)) {
                                *o = gv / n;
                            }
                        } else {
                            let yg = dot(y.row(i), g.row(i));
                            for ((o, gv), yv) in drow.iter_mut().zip(g.row(i)).zip(y.row(i)) {
                                *o = (gv - yv * yg) / n;
                            }
                        }
                    }
                    acc(*input, d, &mut grads);
                }
                Op::MaskDiagonal(a) => {
                    let mut d = g;
                    for i in 0..d.rows() {
                        d.set(i, i, 0.0);
                    }
                    acc(*a, d, &mut grads);
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.value(*a).cols();
                    let bc = self.value(*b).cols();
                    let mut ga = Matrix::zeros(g.rows(), ac);
                    let mut gb = Matrix::zeros(g.rows(), bc);
                    for i in 0..g.rows() {
                        ga.row_mut(i).copy_from_slice(&g.row(i)[..ac]);
                        gb.row_mut(i).copy_from_slice(&g.row(i)[ac..]);
                    }
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g.item() / targets.len() as f64;
                    let mut d = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        let row = d.row_mut(i);
                        row[t] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    acc(*logits, d, &mut grads);
                }
                Op::MeanScalars(items) => {
                    let share = g.item() / items.len() as f64;
                    for &v in items {
                        acc(v, Matrix::scalar(share), &mut grads);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn im2col_at(img: &[f64], shape: MapShape, yy: usize, xx: usize, col: &mut [f64]) {
    let cin = shape.channels;
    for ky in 0..3 {
        for kx in 0..3 {
            let dst = &mut col[(ky * 3 + kx) * cin..(ky * 3 + kx + 1) * cin];
            let sy = yy as isize + ky as isize - 1;
            let sx = xx as isize + kx as isize - 1;
            if sy < 0 || sx < 0 || sy >= shape.height as isize || sx >= shape.width as isize {
                dst.fill(0.0);
            } else {
                let base = shape.index(sy as usize, sx as usize, 0);
                dst.copy_from_slice(&img[base..base + cin]);
            }
        }
    }
}

fn conv3x3_backward(
    x: &Matrix,
    w: &Matrix,
    g: &Matrix,
    shape: MapShape,
    want_input: bool,
) -> (Option<Matrix>, Matrix, Matrix) {
    let cin = shape.channels;
    let cout = w.rows();
    let out_shape = MapShape {
        channels: cout,
        ..shape
    };
    let mut gw = Matrix::zeros(cout, 9 * cin);
    let mut gb = Matrix::zeros(1, cout);
    let mut gi = want_input.then(|| Matrix::zeros(x.rows(), x.cols()));
    let mut col = vec![0.0; 9 * cin];
    let mut dcol = vec![0.0; 9 * cin];
    for n in 0..x.rows() {
        let img = x.row(n);
        let grow = g.row(n);
        for yy in 0..shape.height {
            for xx in 0..shape.width {
                im2col_at(img, shape, yy, xx, &mut col);
                let base = out_shape.index(yy, xx, 0);
                dcol.fill(0.0);
                for co in 0..cout {
                    let go = grow[base + co];
                    if go == 0.0 {
                        continue;
                    }
                    gb.data_mut()[co] += go;
                    for (gwv, c) in gw.row_mut(co).iter_mut().zip(&col) {
                        *gwv += go * c;
                    }
                    if want_input {
                        for (d, wv) in dcol.iter_mut().zip(w.row(co)) {
                            *d += go * wv;
                        }
                    }
                }
                if let Some(gi) = gi.as_mut() {
                    let dst = gi.row_mut(n);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = yy as isize + ky as isize - 1;
                            let sx = xx as isize + kx as isize - 1;
                            if sy < 0
                                || sx < 0
                                || sy >= shape.height as isize
                                || sx >= shape.width as isize
                            {
                                continue;
                            }
                            let b = shape.index(sy as usize, sx as usize, 0);
                            let src = &dcol[(ky * 3 + kx) * cin..(ky * 3 + kx + 1) * cin];
                            for (d, s) in dst[b..b + cin].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
    (gi, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of `build` w.r.t. every entry of `param`.
    fn check(param: Matrix, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let p = g.param(param.clone());
        let loss = build(&mut g, p);
        let grads = g.backward(loss);
        let analytic = grads.get_or_zeros(p, &param);
        let h = 1e-6;
        for i in 0..param.data().len() {
            let eval = |delta: f64| {
                let mut m = param.clone();
                m.data_mut()[i] += delta;
                let mut g = Graph::new();
                let p = g.param(m);
                let l = build(&mut g, p);
                g.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-5 * a.abs().max(numeric.abs()) + 1e-8,
                "entry {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    fn sample(rows: usize, cols: usize, offset: f64) -> Matrix {
        let data = (0..rows * cols)
            .map(|i| ((i as f64 * 1.37 + offset).sin() * 0.9) + 0.05)
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    #[test]
    fn normalize_and_cosine_logits() {
        let other = sample(3, 4, 2.0);
        check(sample(3, 4, 0.3), |g, p| {
            let q = g.constant(other.clone());
            let pn = g.normalize_rows(p, None).unwrap();
            let qn = g.normalize_rows(q, None).unwrap();
            let s = g.matmul_bt(pn, qn);
            let s = g.scale(s, 3.0);
            g.cross_entropy(s, &[0, 2, 1]).unwrap()
        });
    }

    #[test]
    fn self_similarity_with_mask() {
        check(sample(4, 3, 1.1), |g, p| {
            let pn = g.normalize_rows(p, None).unwrap();
            let s = g.matmul_bt(pn, pn);
            let m = g.mask_diagonal(s);
            let c = g.concat_cols(m, s);
            g.cross_entropy(c, &[4, 5, 6, 7]).unwrap()
        });
    }

    #[test]
    fn conv_pool_chain() {
        let shape = MapShape {
            height: 4,
            width: 4,
            channels: 2,
        };
        let input = sample(2, shape.len(), 0.7);
        let bias = Matrix::from_rows(&[[0.1, -0.2, 0.05]]);
        check(sample(3, 18, 0.2), |g, w| {
            let x = g.constant(input.clone());
            let b = g.constant(bias.clone());
            let y = g.conv3x3(x, w, b, shape);
            let out_shape = MapShape {
                channels: 3,
                ..shape
            };
            let (p, ps) = g.max_pool2(y, out_shape);
            let a = g.global_avg_pool(p, ps);
            let target = g.constant(Matrix::filled(2, 3, 0.3));
            let z = g.matmul_bt(a, target);
            g.cross_entropy(z, &[0, 1]).unwrap()
        });
        // gradient through the conv input
        let weight = sample(3, 18, 0.9);
        check(input.clone(), |g, x| {
            let w = g.constant(weight.clone());
            let b = g.constant(bias.clone());
            let y = g.conv3x3(x, w, b, shape);
            let a = g.global_avg_pool(
                y,
                MapShape {
                    channels: 3,
                    ..shape
                },
            );
            g.cross_entropy(a, &[2, 0]).unwrap()
        });
    }

    #[test]
    fn scalar_ops() {
        let x = sample(3, 2, 0.5);
        check(Matrix::scalar(0.4), |g, s| {
            let xv = g.constant(x.clone());
            let t = g.exp(s);
            let z = g.mul_scalar(xv, t);
            let a = g.cross_entropy(z, &[0, 1, 1]).unwrap();
            let b = g.cross_entropy(xv, &[1, 1, 0]).unwrap();
            let w = g.weighted_sum(a, b, 2.5);
            g.mean_scalars(&[w, a])
        });
    }

    #[test]
    fn group_mean_relu_affine() {
        let w = sample(3, 5, 0.1);
        check(sample(6, 3, 0.8), |g, x| {
            let wv = g.constant(w.clone());
            let h = g.matmul(x, wv);
            let b = g.constant(Matrix::filled(1, 5, 0.1));
            let h = g.add_row(h, b);
            let h = g.relu(h);
            let m = g.group_mean(h, vec![vec![0, 1], vec![2, 3, 4], vec![5]]).unwrap();
            let n = g.add(m, m);
            g.cross_entropy(n, &[0, 1, 2]).unwrap()
        });
    }

    #[test]
    fn zero_norm_is_degenerate_unless_floored() {
        let mut g = Graph::new();
        let z = g.constant(Matrix::zeros(1, 3));
        assert!(matches!(
            g.normalize_rows(z, None),
            Err(Error::DegenerateVector(_))
        ));
        let n = g.normalize_rows(z, Some(1e-8)).unwrap();
        assert_eq!(g.value(n).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut g = Graph::new();
        let z = g.constant(Matrix::zeros(1, 3));
        assert!(g.cross_entropy(z, &[3]).is_err());
    }
}

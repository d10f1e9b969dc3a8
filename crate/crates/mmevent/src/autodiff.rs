//! Minimal reverse-mode automatic differentiation over 2-D f64 arrays.
//!
//! A [`Graph`] records operations as they are applied; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for every leaf
//! created with `leaf`. Constants created with `constant` receive no
//! gradient. All values are `ndarray::Array2<f64>`; vectors are 1-row or
//! 1-column matrices and scalars are 1x1.

use ndarray::{Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op {
    Leaf { requires_grad: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log1p(Var),
    RowNormalize(Var),
    RowSum(Var),
    SumAll(Var),
    MeanAll(Var),
    Diag(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, gain: Var, bias: Var },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, end: usize },
    GatherRows { table: Var, indices: Vec<usize> },
    CrossEntropyRows { logits: Var, targets: Vec<Option<usize>> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const NORM_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-6;

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf { requires_grad: true })
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf { requires_grad: false })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(v, Op::Div(a, b))
    }

    /// x (n x m) + row (1 x m), broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let v = &self.nodes[x.0].value + &self.nodes[row.0].value;
        self.push(v, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = &self.nodes[x.0].value * c;
        self.push(v, Op::Scale(x, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|t| 1.0 / (1.0 + (-t).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|t| t.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn log1p(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(f64::ln_1p);
        self.push(v, Op::Log1p(x))
    }

    /// L2-normalize each row; a vanishing norm is stabilized by +1e-12.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut v = xv.clone();
        for mut row in v.rows_mut() {
            let norm = row.iter().map(|t| t * t).sum::<f64>().sqrt();
            let denom = norm + NORM_EPS;
            row.mapv_inplace(|t| t / denom);
        }
        self.push(v, Op::RowNormalize(x))
    }

    /// n x m -> n x 1 row sums.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0]
            .value
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        self.push(v, Op::RowSum(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let m = self.nodes[x.0].value.mean().unwrap();
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(x))
    }

    /// Diagonal of a square matrix as an n x 1 column.
    pub fn diag(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let n = xv.nrows();
        let v = Array2::from_shape_fn((n, 1), |(i, _)| xv[[i, i]]);
        self.push(v, Op::Diag(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut v = xv.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|t| (t - max).exp());
            let s: f64 = row.iter().sum();
            row.mapv_inplace(|t| t / s);
        }
        self.push(v, Op::SoftmaxRows(x))
    }

    /// Per-row layer normalization with learned gain and bias (1 x m each).
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let m = xv.ncols() as f64;
        let mut v = xv.clone();
        for mut row in v.rows_mut() {
            let mean = row.iter().sum::<f64>() / m;
            let var = row.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / m;
            let sd = (var + LN_EPS).sqrt();
            row.mapv_inplace(|t| (t - mean) / sd);
        }
        let v = &v * g + b;
        self.push(v, Op::LayerNormRows { x, gain, bias })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).unwrap();
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).unwrap();
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[x.0]
            .value
            .slice(ndarray::s![.., start..end])
            .to_owned();
        self.push(v, Op::SliceCols { x, start, end })
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = &self.nodes[table.0].value;
        let m = t.ncols();
        let v = Array2::from_shape_fn((indices.len(), m), |(i, j)| t[[indices[i], j]]);
        self.push(
            v,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    /// Mean softmax cross-entropy over rows with a `Some(class)` target;
    /// `None` rows are ignored. Returns a 1x1 scalar.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.nrows(), targets.len());
        let n_active = targets.iter().flatten().count();
        let mut total = 0.0;
        if n_active > 0 {
            for (row, tgt) in lv.rows().into_iter().zip(targets) {
                if let Some(c) = tgt {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
                    total += lse - row[*c];
                }
            }
            total /= n_active as f64;
        }
        self.push(
            Array2::from_elem((1, 1), total),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Backpropagate from a 1x1 scalar; returns one gradient per node
    /// (zeros for constants and non-ancestors).
    pub fn backward(&self, loss: Var) -> Vec<Array2<f64>> {
        let mut grads: Vec<Array2<f64>> = self
            .nodes
            .iter()
            .map(|n| Array2::zeros(n.value.dim()))
            .collect();
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        grads[loss.0][[0, 0]] = 1.0;

        for id in (0..=loss.0).rev() {
            if grads[id].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[id].clone();
            match &self.nodes[id].op {
                Op::Leaf { .. } => {}
                Op::Add(a, b) => {
                    grads[a.0] += &g;
                    grads[b.0] += &g;
                }
                Op::Sub(a, b) => {
                    grads[a.0] += &g;
                    grads[b.0] -= &g;
                }
                Op::Mul(a, b) => {
                    let gb = &g * &self.nodes[a.0].value;
                    let ga = &g * &self.nodes[b.0].value;
                    grads[a.0] += &ga;
                    grads[b.0] += &gb;
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[b.0].value;
                    let av = &self.nodes[a.0].value;
                    let ga = &g / bv;
                    let gb = -(&g * av) / (bv * bv);
                    grads[a.0] += &ga;
                    grads[b.0] += &gb;
                }
                Op::AddRow(x, row) => {
                    grads[x.0] += &g;
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    grads[row.0] += &gr;
                }
                Op::Scale(x, c) => {
                    let gx = &g * *c;
                    grads[x.0] += &gx;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    grads[a.0] += &ga;
                    grads[b.0] += &gb;
                }
                Op::Transpose(a) => {
                    let ga = g.t().to_owned();
                    grads[a.0] += &ga;
                }
                Op::Sigmoid(x) => {
                    let s = &self.nodes[id].value;
                    let gx = &g * s * &s.mapv(|t| 1.0 - t);
                    grads[x.0] += &gx;
                }
                Op::Relu(x) => {
                    let mask = self.nodes[x.0].value.mapv(|t| if t > 0.0 { 1.0 } else { 0.0 });
                    let gx = &g * &mask;
                    grads[x.0] += &gx;
                }
                Op::Exp(x) => {
                    let gx = &g * &self.nodes[id].value;
                    grads[x.0] += &gx;
                }
                Op::Log1p(x) => {
                    let gx = &g / &self.nodes[x.0].value.mapv(|t| 1.0 + t);
                    grads[x.0] += &gx;
                }
                Op::RowNormalize(x) => {
                    let xv = &self.nodes[x.0].value;
                    let mut gx = Array2::zeros(xv.dim());
                    for (i, xrow) in xv.rows().into_iter().enumerate() {
                        let norm = xrow.iter().map(|t| t * t).sum::<f64>().sqrt();
                        let r = norm + NORM_EPS;
                        let grow = g.row(i);
                        let gdotx: f64 = grow.iter().zip(xrow.iter()).map(|(a, b)| a * b).sum();
                        let coef = gdotx / (r * r * norm.max(NORM_EPS));
                        for (j, gx_ij) in gx.row_mut(i).iter_mut().enumerate() {
                            *gx_ij = grow[j] / r - xrow[j] * coef;
                        }
                    }
                    grads[x.0] += &gx;
                }
                Op::RowSum(x) => {
                    let gx =
                        Array2::from_shape_fn(self.nodes[x.0].value.dim(), |(i, _)| g[[i, 0]]);
                    grads[x.0] += &gx;
                }
                Op::SumAll(x) => {
                    let gx = Array2::from_elem(self.nodes[x.0].value.dim(), g[[0, 0]]);
                    grads[x.0] += &gx;
                }
                Op::MeanAll(x) => {
                    let n = self.nodes[x.0].value.len() as f64;
                    let gx = Array2::from_elem(self.nodes[x.0].value.dim(), g[[0, 0]] / n);
                    grads[x.0] += &gx;
                }
                Op::Diag(x) => {
                    let n = self.nodes[x.0].value.nrows();
                    let mut gx = Array2::zeros((n, n));
                    for i in 0..n {
                        gx[[i, i]] = g[[i, 0]];
                    }
                    grads[x.0] += &gx;
                }
                Op::SoftmaxRows(x) => {
                    let s = &self.nodes[id].value;
                    let mut gx = Array2::zeros(s.dim());
                    for (i, srow) in s.rows().into_iter().enumerate() {
                        let grow = g.row(i);
                        let dot: f64 = grow.iter().zip(srow.iter()).map(|(a, b)| a * b).sum();
                        for (j, gx_ij) in gx.row_mut(i).iter_mut().enumerate() {
                            *gx_ij = srow[j] * (grow[j] - dot);
                        }
                    }
                    grads[x.0] += &gx;
                }
                Op::LayerNormRows { x, gain, bias } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gain.0].value;
                    let m = xv.ncols() as f64;
                    let mut gx = Array2::zeros(xv.dim());
                    let mut ggain = Array2::zeros(gv.dim());
                    let mut gbias = Array2::zeros(gv.dim());
                    for (i, xrow) in xv.rows().into_iter().enumerate() {
                        let mean = xrow.iter().sum::<f64>() / m;
                        let var = xrow.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / m;
                        let sd = (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = xrow.iter().map(|t| (t - mean) / sd).collect();
                        let grow = g.row(i);
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..xhat.len() {
                            let dxh = grow[j] * gv[[0, j]];
                            ggain[[0, j]] += grow[j] * xhat[j];
                            gbias[[0, j]] += grow[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[j];
                        }
                        mean_dxhat /= m;
                        mean_dxhat_xhat /= m;
                        for j in 0..xhat.len() {
                            let dxh = grow[j] * gv[[0, j]];
                            gx[[i, j]] = (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat) / sd;
                        }
                    }
                    grads[x.0] += &gx;
                    grads[gain.0] += &ggain;
                    grads[bias.0] += &gbias;
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.nodes[p.0].value.nrows();
                        let gp = g.slice(ndarray::s![offset..offset + rows, ..]).to_owned();
                        grads[p.0] += &gp;
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.nodes[p.0].value.ncols();
                        let gp = g.slice(ndarray::s![.., offset..offset + cols]).to_owned();
                        grads[p.0] += &gp;
                        offset += cols;
                    }
                }
                Op::SliceCols { x, start, end } => {
                    let dim = self.nodes[x.0].value.dim();
                    let mut gx = Array2::zeros(dim);
                    gx.slice_mut(ndarray::s![.., *start..*end]).assign(&g);
                    grads[x.0] += &gx;
                }
                Op::GatherRows { table, indices } => {
                    let dim = self.nodes[table.0].value.dim();
                    let mut gt = Array2::zeros(dim);
                    for (i, &idx) in indices.iter().enumerate() {
                        let mut row = gt.row_mut(idx);
                        row += &g.row(i);
                    }
                    grads[table.0] += &gt;
                }
                Op::CrossEntropyRows { logits, targets } => {
                    let lv = &self.nodes[logits.0].value;
                    let n_active = targets.iter().flatten().count();
                    if n_active > 0 {
                        let gscalar = g[[0, 0]] / n_active as f64;
                        let mut gl = Array2::zeros(lv.dim());
                        for (i, tgt) in targets.iter().enumerate() {
                            if let Some(c) = tgt {
                                let row = lv.row(i);
                                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                                let exps: Vec<f64> = row.iter().map(|t| (t - max).exp()).collect();
                                let sum: f64 = exps.iter().sum();
                                for j in 0..row.len() {
                                    let p = exps[j] / sum;
                                    gl[[i, j]] = gscalar * (p - if j == *c { 1.0 } else { 0.0 });
                                }
                            }
                        }
                        grads[logits.0] += &gl;
                    }
                }
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if let Op::Leaf { requires_grad: false } = n.op {
                grads[i].fill(0.0);
            }
        }
        grads
    }
}

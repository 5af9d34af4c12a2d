//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Every value on the tape is an `Array2<f64>`; vectors are `1×n` or `n×1`
//! matrices and scalars are `1×1`. Nodes are appended in evaluation order, so
//! a single reverse sweep over the node list is a valid topological order for
//! the backward pass.

use ndarray::{s, Array2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Powf(Var, f64),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    SumAll(Var),
    SumRows(Var),
    RowSums(Var),
    L2NormalizeRows { input: Var, norms: Vec<f64> },
    Unfold(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Recording of a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`]; `None` for nodes that do not
/// influence the seeded outputs.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn row_vec(values: impl IntoIterator<Item = f64>) -> Array2<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    let n = v.len();
    Array2::from_shape_vec((1, n), v).expect("row vector shape")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ra, ca) = self.value(a).dim();
        assert_eq!(self.value(row).dim(), (1, ca), "add_row: bias shape");
        let mut value = self.value(a).clone();
        value += self.value(row);
        debug_assert_eq!(value.nrows(), ra);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let ca = self.value(a).ncols();
        assert_eq!(self.value(row).dim(), (1, ca), "mul_row: gain shape");
        let mut value = self.value(a).clone();
        value *= self.value(row);
        self.push(value, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        self.push(value, Op::AddScalar(a))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(value, Op::Ln(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    /// Elementwise `a^p` for nonnegative `a`.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).mapv(|x| x.powf(p));
        self.push(value, Op::Powf(a, p))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row /= z;
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(value, Op::LogSoftmaxRows(a))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        self.push(value, Op::LayerNorm { input: a, inv_std })
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros((indices.len(), src.ncols()));
        for (dst, &i) in value.rows_mut().into_iter().zip(indices) {
            let mut dst = dst;
            dst.assign(&src.row(i));
        }
        self.push(value, Op::GatherRows(a, indices.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape: element count");
        let flat: Vec<f64> = src.iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("reshape");
        self.push(value, Op::Reshape(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    /// Column sums as a `1×c` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = row_vec(self.value(a).sum_axis(Axis(0)));
        self.push(value, Op::SumRows(a))
    }

    /// Row sums as an `r×1` column.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let sums = self.value(a).sum_axis(Axis(1));
        let n = sums.len();
        let value = sums.into_shape_with_order((n, 1)).expect("row_sums shape");
        self.push(value, Op::RowSums(a))
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt().max(eps);
            row /= n;
            norms.push(n);
        }
        self.push(value, Op::L2NormalizeRows { input: a, norms })
    }

    /// Temporal im2col: `T×D -> T×(k·D)` where output block `j` of row `t` is
    /// input row `t + j - k/2`, zero outside `[0, T)`.
    pub fn unfold(&mut self, a: Var, k: usize) -> Var {
        let src = self.value(a);
        let (t_len, d) = src.dim();
        let half = (k / 2) as isize;
        let mut value = Array2::zeros((t_len, k * d));
        for t in 0..t_len {
            for j in 0..k {
                let src_t = t as isize + j as isize - half;
                if src_t >= 0 && (src_t as usize) < t_len {
                    value
                        .slice_mut(s![t, j * d..(j + 1) * d])
                        .assign(&src.row(src_t as usize));
                }
            }
        }
        self.push(value, Op::Unfold(a, k))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        let seed = Array2::ones(self.value(output).dim());
        self.backward_seeded(&[(output, seed)])
    }

    /// Reverse sweep from arbitrary seeded outputs.
    pub fn backward_seeded(&self, seeds: &[(Var, Array2<f64>)]) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            accumulate(&mut grads, *v, g.clone());
        }
        let last = seeds.iter().map(|(v, _)| v.0).max().unwrap_or(0);
        for idx in (0..=last).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.dot(&self.value(*b).t());
                let gb = self.value(*a).t().dot(g);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, row_vec(g.sum_axis(Axis(0))));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g * self.value(*b));
                accumulate(grads, *b, g * self.value(*a));
            }
            Op::MulRow(a, row) => {
                let mut ga = g.clone();
                ga *= self.value(*row);
                accumulate(grads, *a, ga);
                let prod = g * self.value(*a);
                accumulate(grads, *row, row_vec(prod.sum_axis(Axis(0))));
            }
            Op::Scale(a, k) => accumulate(grads, *a, g * *k),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0
                        }
                    });
                accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(y).for_each(|gv, &s| *gv *= s * (1.0 - s));
                accumulate(grads, *a, ga);
            }
            Op::Exp(a) => accumulate(grads, *a, g * y),
            Op::Ln(a) => accumulate(grads, *a, g / self.value(*a)),
            Op::Clamp(a, lo, hi) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|gv, &x| {
                        if x < *lo || x > *hi {
                            *gv = 0.0
                        }
                    });
                accumulate(grads, *a, ga);
            }
            Op::Powf(a, p) => {
                let mut ga = g.clone();
                let p = *p;
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|gv, &x| {
                        *gv *= if p == 0.0 { 0.0 } else { p * x.powf(p - 1.0) };
                    });
                accumulate(grads, *a, ga);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.t().to_owned()),
            Op::SoftmaxRows(a) => {
                let mut ga = g * y;
                for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    row.zip_mut_with(&yrow, |gv, &yv| *gv -= yv * dot);
                }
                accumulate(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = g.clone();
                for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                    let total = row.sum();
                    row.zip_mut_with(&yrow, |gv, &lp| *gv -= lp.exp() * total);
                }
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm { input, inv_std } => {
                let n = y.ncols() as f64;
                let mut ga = g.clone();
                for ((mut row, yrow), &is) in ga.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                    let mean_g = row.sum() / n;
                    let mean_gy = row.dot(&yrow) / n;
                    row.zip_mut_with(&yrow, |gv, &yv| *gv = is * (*gv - mean_g - yv * mean_gy));
                }
                accumulate(grads, *input, ga);
            }
            Op::GatherRows(a, indices) => {
                let mut ga = Array2::zeros(self.value(*a).dim());
                for (grow, &i) in g.rows().into_iter().zip(indices) {
                    let mut dst = ga.row_mut(i);
                    dst += &grow;
                }
                accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let mut ga = Array2::zeros(self.value(*a).dim());
                ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    accumulate(grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    accumulate(grads, p, g.slice(s![offset..offset + h, ..]).to_owned());
                    offset += h;
                }
            }
            Op::Reshape(a) => {
                let dim = self.value(*a).dim();
                let flat: Vec<f64> = g.iter().copied().collect();
                accumulate(grads, *a, Array2::from_shape_vec(dim, flat).expect("reshape grad"));
            }
            Op::SumAll(a) => {
                let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                accumulate(grads, *a, ga);
            }
            Op::SumRows(a) => {
                let (r, c) = self.value(*a).dim();
                let ga = g.broadcast((r, c)).expect("sum_rows grad").to_owned();
                accumulate(grads, *a, ga);
            }
            Op::RowSums(a) => {
                let (r, c) = self.value(*a).dim();
                let ga = g.broadcast((r, c)).expect("row_sums grad").to_owned();
                accumulate(grads, *a, ga);
            }
            Op::L2NormalizeRows { input, norms } => {
                let x = self.value(*input);
                let mut ga = g.clone();
                for (((mut row, yrow), xrow), &n) in
                    ga.rows_mut().into_iter().zip(y.rows()).zip(x.rows()).zip(norms)
                {
                    let raw = xrow.dot(&xrow).sqrt();
                    if raw >= n {
                        let dot = row.dot(&yrow);
                        row.zip_mut_with(&yrow, |gv, &yv| *gv = (*gv - yv * dot) / n);
                    } else {
                        row /= n;
                    }
                }
                accumulate(grads, *input, ga);
            }
            Op::Unfold(a, k) => {
                let (t_len, d) = self.value(*a).dim();
                let half = (*k / 2) as isize;
                let mut ga = Array2::zeros((t_len, d));
                for t in 0..t_len {
                    for j in 0..*k {
                        let src_t = t as isize + j as isize - half;
                        if src_t >= 0 && (src_t as usize) < t_len {
                            let mut dst = ga.row_mut(src_t as usize);
                            dst += &g.slice(s![t, j * d..(j + 1) * d]);
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

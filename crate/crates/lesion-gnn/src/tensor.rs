//! Dense 2-D tensors and a reverse-mode gradient tape.
//!
//! The tape is built per forward pass (define-by-run). Values live in the
//! tape nodes; user code holds [`Var`] handles. Leaves are either trainable
//! parameters (receive adjoints) or constants (skipped during backward).
//! All arithmetic is 64-bit.

use rand::Rng;

use crate::{Error, Result};

/// Dense row-major 2-D array of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Tensor::new",
                lhs: format!("{rows}x{cols}"),
                rhs: format!("data len {}", data.len()),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    /// Row vector from a slice.
    pub fn row(data: &[f64]) -> Self {
        Tensor { rows: 1, cols: data.len(), data: data.to_vec() }
    }

    /// Column vector from a slice.
    pub fn column(data: &[f64]) -> Self {
        Tensor { rows: data.len(), cols: 1, data: data.to_vec() }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape {
                    op: "Tensor::from_rows",
                    lhs: format!("row len {c}"),
                    rhs: format!("row len {}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(r, c, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (1, 1));
        self.data[0]
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Plain (untaped) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                lhs: format!("{}x{}", self.rows, self.cols),
                rhs: format!("{}x{}", other.rows, other.cols),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out.data[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Backward rule: (out value, out adjoint, parent values, which parents need
/// gradients) -> per-parent adjoint contributions.
type BackFn = Box<dyn Fn(&Tensor, &Tensor, &[&Tensor], &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackFn>,
    requires_grad: bool,
}

/// Reverse-mode gradient tape over [`Tensor`] operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of a variable; `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of a variable, or zeros of the given shape.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
}

const BCE_EPS: f64 = 1e-12;
/// Guard added to ||p|| in `normalize` so a zero vector does not divide by zero.
pub const NORM_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackFn>) -> Var {
        let requires_grad = match &backward {
            Some(_) => parents.iter().any(|&p| self.nodes[p].requires_grad),
            None => false,
        };
        self.nodes.push(Node { value, parents, backward, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives an adjoint during backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, parents: vec![], backward: None, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf: backward skips it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, parents: vec![], backward: None, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn shapes(&self, a: Var, b: Var) -> (String, String) {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        (format!("{ar}x{ac}"), format!("{br}x{bc}"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (ta, tb) = (self.value(a), self.value(b));
            ta.matmul(tb)?
        };
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|_, g, p, needs| {
                let da = if needs[0] { Some(g.matmul(&p[1].transpose()).unwrap()) } else { None };
                let db = if needs[1] { Some(p[0].transpose().matmul(g).unwrap()) } else { None };
                vec![da, db]
            })),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            let (l, r) = self.shapes(a, b);
            return Err(Error::Shape { op: "add", lhs: l, rhs: r });
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|_, g, _, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| g.clone()),
                ]
            })),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            let (l, r) = self.shapes(a, b);
            return Err(Error::Shape { op: "sub", lhs: l, rhs: r });
        }
        let (rows, cols) = self.value(a).shape();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(
            Tensor { rows, cols, data },
            vec![a.0, b.0],
            Some(Box::new(|_, g, _, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| g.map(|x| -x)),
                ]
            })),
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            let (l, r) = self.shapes(a, b);
            return Err(Error::Shape { op: "mul", lhs: l, rhs: r });
        }
        let (rows, cols) = self.value(a).shape();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(
            Tensor { rows, cols, data },
            vec![a.0, b.0],
            Some(Box::new(|_, g, p, needs| {
                let da = needs[0].then(|| {
                    let mut t = g.clone();
                    for (x, y) in t.data.iter_mut().zip(p[1].data()) {
                        *x *= y;
                    }
                    t
                });
                let db = needs[1].then(|| {
                    let mut t = g.clone();
                    for (x, y) in t.data.iter_mut().zip(p[0].data()) {
                        *x *= y;
                    }
                    t
                });
                vec![da, db]
            })),
        ))
    }

    /// Add a 1xD row vector to every row of an NxD tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(x).shape();
        let (br, bc) = self.value(bias).shape();
        if br != 1 || bc != d {
            let (l, r) = self.shapes(x, bias);
            return Err(Error::Shape { op: "add_row", lhs: l, rhs: r });
        }
        let mut value = self.value(x).clone();
        for i in 0..n {
            for j in 0..d {
                value.data[i * d + j] += self.value(bias).data[j];
            }
        }
        Ok(self.push(
            value,
            vec![x.0, bias.0],
            Some(Box::new(|_, g, _, needs| {
                let dx = needs[0].then(|| g.clone());
                let db = needs[1].then(|| {
                    let (n, d) = g.shape();
                    let mut out = Tensor::zeros(1, d);
                    for i in 0..n {
                        for j in 0..d {
                            out.data[j] += g.data[i * d + j];
                        }
                    }
                    out
                });
                vec![dx, db]
            })),
        ))
    }

    /// Scale row i of an NxD tensor by the i-th entry of an Nx1 column.
    pub fn mul_col(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (n, d) = self.value(x).shape();
        let (sr, sc) = self.value(scale).shape();
        if sr != n || sc != 1 {
            let (l, r) = self.shapes(x, scale);
            return Err(Error::Shape { op: "mul_col", lhs: l, rhs: r });
        }
        let mut value = self.value(x).clone();
        for i in 0..n {
            let s = self.value(scale).data[i];
            for j in 0..d {
                value.data[i * d + j] *= s;
            }
        }
        Ok(self.push(
            value,
            vec![x.0, scale.0],
            Some(Box::new(|_, g, p, needs| {
                let (n, d) = g.shape();
                let dx = needs[0].then(|| {
                    let mut t = g.clone();
                    for i in 0..n {
                        let s = p[1].data[i];
                        for j in 0..d {
                            t.data[i * d + j] *= s;
                        }
                    }
                    t
                });
                let ds = needs[1].then(|| {
                    let mut t = Tensor::zeros(n, 1);
                    for i in 0..n {
                        let mut acc = 0.0;
                        for j in 0..d {
                            acc += g.data[i * d + j] * p[0].data[i * d + j];
                        }
                        t.data[i] = acc;
                    }
                    t
                });
                vec![dx, ds]
            })),
        ))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |_, g, _, needs| vec![needs[0].then(|| g.map(|v| v * c))])),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(
            value,
            vec![x.0],
            Some(Box::new(|_, g, p, needs| {
                vec![needs[0].then(|| {
                    let mut t = g.clone();
                    for (gi, &xi) in t.data.iter_mut().zip(p[0].data()) {
                        if xi <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                    t
                })]
            })),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |_, g, p, needs| {
                vec![needs[0].then(|| {
                    let mut t = g.clone();
                    for (gi, &xi) in t.data.iter_mut().zip(p[0].data()) {
                        if xi <= 0.0 {
                            *gi *= slope;
                        }
                    }
                    t
                })]
            })),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(
            value,
            vec![x.0],
            Some(Box::new(|out, g, _, needs| {
                vec![needs[0].then(|| {
                    let mut t = g.clone();
                    for (gi, &yi) in t.data.iter_mut().zip(out.data()) {
                        *gi *= yi * (1.0 - yi);
                    }
                    t
                })]
            })),
        )
    }

    /// Inverted dropout. Identity in eval mode or at p = 0.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let (rows, cols) = self.value(x).shape();
        let data = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(self.push(
            Tensor { rows, cols, data },
            vec![x.0],
            Some(Box::new(move |_, g, _, needs| {
                vec![needs[0].then(|| {
                    let mut t = g.clone();
                    for (gi, m) in t.data.iter_mut().zip(&mask) {
                        *gi *= m;
                    }
                    t
                })]
            })),
        ))
    }

    /// Select rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Var {
        let (n, d) = self.value(x).shape();
        debug_assert!(indices.iter().all(|&i| i < n));
        let mut value = Tensor::zeros(indices.len(), d);
        for (r, &i) in indices.iter().enumerate() {
            value.data[r * d..(r + 1) * d].copy_from_slice(self.value(x).row_slice(i));
        }
        let idx = indices.to_vec();
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |_, g, p, needs| {
                vec![needs[0].then(|| {
                    let (n, d) = p[0].shape();
                    let mut t = Tensor::zeros(n, d);
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            t.data[i * d + j] += g.data[r * d + j];
                        }
                    }
                    t
                })]
            })),
        )
    }

    /// Accumulate row r of x into row targets[r] of an n_out x D output.
    pub fn scatter_add_rows(&mut self, x: Var, targets: &[usize], n_out: usize) -> Var {
        let (m, d) = self.value(x).shape();
        debug_assert_eq!(m, targets.len());
        debug_assert!(targets.iter().all(|&i| i < n_out));
        let mut value = Tensor::zeros(n_out, d);
        for (r, &i) in targets.iter().enumerate() {
            for j in 0..d {
                value.data[i * d + j] += self.value(x).data[r * d + j];
            }
        }
        let idx = targets.to_vec();
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |_, g, p, needs| {
                vec![needs[0].then(|| {
                    let (m, d) = p[0].shape();
                    let mut t = Tensor::zeros(m, d);
                    for (r, &i) in idx.iter().enumerate() {
                        t.data[r * d..(r + 1) * d].copy_from_slice(&g.data[i * d..(i + 1) * d]);
                    }
                    t
                })]
            })),
        )
    }

    /// Concatenate two tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (an, ad) = self.value(a).shape();
        let (bn, bd) = self.value(b).shape();
        if an != bn {
            let (l, r) = self.shapes(a, b);
            return Err(Error::Shape { op: "concat_cols", lhs: l, rhs: r });
        }
        let mut value = Tensor::zeros(an, ad + bd);
        for i in 0..an {
            value.data[i * (ad + bd)..i * (ad + bd) + ad]
                .copy_from_slice(self.value(a).row_slice(i));
            value.data[i * (ad + bd) + ad..(i + 1) * (ad + bd)]
                .copy_from_slice(self.value(b).row_slice(i));
        }
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |_, g, _, needs| {
                let n = g.rows();
                let d = g.cols();
                let da = needs[0].then(|| {
                    let mut t = Tensor::zeros(n, ad);
                    for i in 0..n {
                        t.data[i * ad..(i + 1) * ad].copy_from_slice(&g.data[i * d..i * d + ad]);
                    }
                    t
                });
                let db = needs[1].then(|| {
                    let mut t = Tensor::zeros(n, bd);
                    for i in 0..n {
                        t.data[i * bd..(i + 1) * bd]
                            .copy_from_slice(&g.data[i * d + ad..(i + 1) * d]);
                    }
                    t
                });
                vec![da, db]
            })),
        ))
    }

    /// Column-wise sum over rows: NxD -> 1xD.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.value(x).shape();
        let mut value = Tensor::zeros(1, d);
        for i in 0..n {
            for j in 0..d {
                value.data[j] += self.value(x).data[i * d + j];
            }
        }
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |_, g, _, needs| {
                vec![needs[0].then(|| {
                    let mut t = Tensor::zeros(n, d);
                    for i in 0..n {
                        t.data[i * d..(i + 1) * d].copy_from_slice(g.data());
                    }
                    t
                })]
            })),
        )
    }

    /// Sum of all entries: NxD -> 1x1.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(
            value,
            vec![x.0],
            Some(Box::new(|_, g, p, needs| {
                let (n, d) = p[0].shape();
                vec![needs[0].then(|| Tensor::filled(n, d, g.item()))]
            })),
        )
    }

    /// Normalize a Dx1 vector to unit length: p / (||p|| + eps).
    pub fn normalize(&mut self, p: Var) -> Var {
        let norm = self.value(p).l2_norm();
        let s = norm + NORM_EPS;
        let value = self.value(p).map(|v| v / s);
        self.push(
            value,
            vec![p.0],
            Some(Box::new(move |_, g, p, needs| {
                vec![needs[0].then(|| {
                    // d(p/s)/dp = I/s - p p^T / (s^2 * ||p||)
                    let dot: f64 = p[0].data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
                    let mut t = g.map(|v| v / s);
                    if norm > 0.0 {
                        let c = dot / (s * s * norm);
                        for (ti, &pi) in t.data.iter_mut().zip(p[0].data()) {
                            *ti -= c * pi;
                        }
                    }
                    t
                })]
            })),
        )
    }

    /// Softmax over contiguous row segments of an Ex1 column (per-node
    /// attention normalization). Each segment must be non-empty.
    pub fn segment_softmax(&mut self, e: Var, segments: &[(usize, usize)]) -> Var {
        let x = self.value(e);
        debug_assert_eq!(x.cols(), 1);
        let mut value = Tensor::zeros(x.rows(), 1);
        for &(s, t) in segments {
            let max = x.data[s..t].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in s..t {
                let v = (x.data[i] - max).exp();
                value.data[i] = v;
                z += v;
            }
            for i in s..t {
                value.data[i] /= z;
            }
        }
        let segs = segments.to_vec();
        self.push(
            value,
            vec![e.0],
            Some(Box::new(move |out, g, _, needs| {
                vec![needs[0].then(|| {
                    let mut t = Tensor::zeros(g.rows(), 1);
                    for &(s, e_) in &segs {
                        let dot: f64 =
                            (s..e_).map(|i| out.data[i] * g.data[i]).sum();
                        for i in s..e_ {
                            t.data[i] = out.data[i] * (g.data[i] - dot);
                        }
                    }
                    t
                })]
            })),
        )
    }

    /// Mean binary cross-entropy of an Nx1 probability column against fixed
    /// {0,1} targets. Predictions are clamped into [eps, 1-eps].
    pub fn bce_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.value(pred).shape() != target.shape() {
            let (pr, pc) = self.value(pred).shape();
            return Err(Error::Shape {
                op: "bce_loss",
                lhs: format!("{pr}x{pc}"),
                rhs: format!("{}x{}", target.rows(), target.cols()),
            });
        }
        let n = target.data().len() as f64;
        let mut loss = 0.0;
        for (&p, &y) in self.value(pred).data().iter().zip(target.data()) {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        let targets = target.clone();
        Ok(self.push(
            Tensor::scalar(loss / n),
            vec![pred.0],
            Some(Box::new(move |_, g, p, needs| {
                vec![needs[0].then(|| {
                    let scale = g.item() / n;
                    let mut t = Tensor::zeros(p[0].rows(), p[0].cols());
                    for ((ti, &pi), &yi) in
                        t.data.iter_mut().zip(p[0].data()).zip(targets.data())
                    {
                        let pc = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        *ti = scale * (pc - yi) / (pc * (1.0 - pc));
                    }
                    t
                })]
            })),
        ))
    }

    /// Mean of a set of scalar variables.
    pub fn mean_scalars(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::Usage("mean_scalars over empty set".into()));
        }
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v)?;
        }
        Ok(self.scale(acc, 1.0 / vars.len() as f64))
    }

    /// Reverse sweep from a scalar loss. Returns the adjoint of every
    /// reachable variable.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got {}x{}",
                node.value.rows(),
                node.value.cols()
            )));
        }
        if node.backward.is_none() {
            return Err(Error::Usage(
                "backward on a detached value (no recorded operations)".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let node = &self.nodes[id];
            let Some(back) = &node.backward else { continue };
            let pvals: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> =
                node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let contributions = back(&node.value, &g, &pvals, &needs);
            for (&p, contrib) in node.parents.iter().zip(contributions) {
                if let Some(c) = contrib {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&c),
                        slot => *slot = Some(c),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Central-difference gradient check for a deterministic tensor-to-scalar
/// function. Returns the max over entries of
/// |analytic - numeric| / max(1, |numeric|).
pub fn check_gradients(
    mut f: impl FnMut(&mut Tape, Var) -> Result<Var>,
    x: &Tensor,
    h: f64,
) -> Result<f64> {
    let eval = |f: &mut dyn FnMut(&mut Tape, Var) -> Result<Var>, t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(t.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };

    // Determinism probe: the same input must produce the same value.
    let probe1 = eval(&mut f, x)?;
    let probe2 = eval(&mut f, x)?;
    if probe1.to_bits() != probe2.to_bits() {
        return Err(Error::Usage(
            "check_gradients requires a deterministic function (two evaluations differed)".into(),
        ));
    }

    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(v, x.rows(), x.cols());

    let mut max_err = 0.0f64;
    for i in 0..x.data().len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(&mut f, &plus)? - eval(&mut f, &minus)?) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

//! A small reverse-mode tape over dense matrices.

use ndarray::{Array1, Array2, Axis, Zip};

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_C: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    /// `a + 1·b` with `b` a `1×n` row.
    AddRow(Var, Var),
    /// `a ⊙ 1·b` with `b` a `1×n` row.
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    /// Row standardization; keeps `1/σ` per row.
    LayerNorm(Var, Array1<f64>),
    /// `out.flat[i] = a.flat[index[i]]`
    Gather(Var, Vec<usize>),
    /// A `1×1` value with gradients w.r.t. its inputs computed up front.
    Custom(Vec<(Var, Array2<f64>)>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one output w.r.t. every recorded value.
#[derive(Debug)]
pub struct Grads(Vec<Option<Array2<f64>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0[v.0].as_ref()
    }

    /// Gradient of `v`, zeros of `shape` when `v` did not reach the output.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.0[v.0].take().unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let total = row.sum();
            row /= total;
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        let mut inv = Array1::zeros(x.nrows());
        for (mut row, s) in v.rows_mut().into_iter().zip(inv.iter_mut()) {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            *s = 1.0 / (var + LN_EPS).sqrt();
            let sv = *s;
            row.mapv_inplace(|x| (x - mean) * sv);
        }
        self.push(v, Op::LayerNorm(a, inv))
    }

    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: (usize, usize)) -> Var {
        assert_eq!(index.len(), shape.0 * shape.1, "gather index length");
        let src = self.value(a).as_standard_layout().into_owned();
        let flat = src.as_slice().expect("standard layout");
        let v = Array2::from_shape_vec(shape, index.iter().map(|&i| flat[i]).collect()).expect("shape checked");
        self.push(v, Op::Gather(a, index))
    }

    pub fn custom_scalar(&mut self, value: f64, parts: Vec<(Var, Array2<f64>)>) -> Var {
        for (v, g) in &parts {
            assert_eq!(self.value(*v).dim(), g.dim(), "custom gradient shape");
        }
        self.push(Array2::from_elem((1, 1), value), Op::Custom(parts))
    }

    /// Reverse pass from `out`, seeded with ones.
    pub fn backward(&self, out: Var) -> Grads {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array2::ones(self.value(out).raw_dim()));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let mut acc = |v: Var, d: Array2<f64>| match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&self.value(*b).t()));
                    acc(*b, self.value(*a).t().dot(&g));
                }
                Op::MatMulNt(a, b) => {
                    acc(*a, g.dot(self.value(*b)));
                    acc(*b, g.t().dot(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g.clone());
                }
                Op::MulRow(a, row) => {
                    acc(*row, (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, &g * self.value(*row));
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * self.value(*b));
                    acc(*b, &g * self.value(*a));
                }
                Op::Scale(a, s) => acc(*a, &g * *s),
                Op::Gelu(a) => {
                    let mut d = self.value(*a).mapv(gelu_grad);
                    d *= &g;
                    acc(*a, d);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let mut d = g.clone();
                    Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(*a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = &g * y;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let inner = drow.sum();
                        Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv -= yv * inner);
                    }
                    acc(*a, d);
                }
                Op::LayerNorm(a, inv) => {
                    let y = &node.value;
                    let mut d = g.clone();
                    for ((mut drow, yrow), &s) in d.rows_mut().into_iter().zip(y.rows()).zip(inv.iter()) {
                        let n = drow.len() as f64;
                        let mean_g = drow.sum() / n;
                        let mean_gy = drow.dot(&yrow) / n;
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|dv, &yv| *dv = s * (*dv - mean_g - yv * mean_gy));
                    }
                    acc(*a, d);
                }
                Op::Gather(a, index) => {
                    let shape = self.value(*a).raw_dim();
                    let mut d = vec![0.0; shape[0] * shape[1]];
                    for (gv, &k) in g.iter().zip(index) {
                        d[k] += gv;
                    }
                    acc(*a, Array2::from_shape_vec(shape, d).expect("shape of source"));
                }
                Op::Custom(parts) => {
                    let up = g[[0, 0]];
                    for (v, local) in parts {
                        acc(*v, local * up);
                    }
                }
            }
            grads[i] = Some(g);
        }
        Grads(grads)
    }
}

use ndarray::{Array2, Axis};

use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Maps the gradient of a custom node's output to gradients of its inputs,
/// in input order.
pub type BackwardFn = Box<dyn Fn(&Array2<f64>) -> Vec<Array2<f64>>>;

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Tanh(Var),
    SumSq(Var),
    Sum(Var),
    StraightThrough(Var),
    Custom(Vec<Var>, BackwardFn),
}

/// A recorded value with its gradient slot.
pub struct Tensor {
    pub value: Array2<f64>,
    pub grad: Option<Array2<f64>>,
}

/// Records a forward computation for a single backward pass. Every value is
/// two-dimensional; scalars are `1×1`.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<(Tensor, Op)>,
    backward_done: bool,
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push((Tensor { value, grad: None }, op));
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].0.value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// Gradient of the last backward pass's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v.0].0.grad.as_ref()
    }

    /// A value that receives no gradient consumer (input or stop-gradient).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A trainable leaf; its gradient is reported under `id` by
    /// [`Tape::param_grads`].
    pub fn param(&mut self, id: usize, value: &Array2<f64>) -> Var {
        self.push(value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// Adds a `1×m` row to every row of an `n×m` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let v = self.value(x) + self.value(row);
        self.push(v, Op::AddRow(x, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum::<f64>();
        self.push(Array2::from_elem((1, 1), s), Op::SumSq(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a))
    }

    /// Forward value `quantized`, backward identity to `z`.
    pub fn straight_through(&mut self, z: Var, quantized: Array2<f64>) -> Result<Var> {
        if quantized.dim() != self.value(z).dim() {
            return Err(Error::Shape(format!(
                "straight-through {:?} vs {:?}",
                quantized.dim(),
                self.value(z).dim()
            )));
        }
        Ok(self.push(quantized, Op::StraightThrough(z)))
    }

    /// A node with an arbitrary forward value and a user-supplied backward
    /// rule.
    pub fn custom(&mut self, inputs: Vec<Var>, value: Array2<f64>, backward: BackwardFn) -> Var {
        self.push(value, Op::Custom(inputs, backward))
    }

    /// Fills gradient slots of every node with `∂loss/∂node`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        if self.backward_done {
            return Err(Error::State("backward already run on this tape".into()));
        }
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::Shape("loss must be a 1x1 scalar".into()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let mut send = |v: Var, d: Array2<f64>| match &mut grads[v.0] {
                Some(acc) => *acc += &d,
                slot @ None => *slot = Some(d),
            };
            let val = |v: Var| &self.nodes[v.0].0.value;
            match &self.nodes[i].1 {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    send(*a, g.dot(&val(*b).t()));
                    send(*b, val(*a).t().dot(&g));
                }
                Op::AddRow(x, row) => {
                    send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send(*x, g.clone());
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    send(*b, -&g);
                    send(*a, g.clone());
                }
                Op::Scale(a, k) => send(*a, &g * *k),
                Op::LeakyRelu(a, slope) => {
                    let mut d = g.clone();
                    d.zip_mut_with(val(*a), |gi, &x| {
                        if x <= 0.0 {
                            *gi *= *slope
                        }
                    });
                    send(*a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g.clone();
                    d.zip_mut_with(&self.nodes[i].0.value, |gi, &y| *gi *= 1.0 - y * y);
                    send(*a, d);
                }
                Op::SumSq(a) => {
                    let k = 2.0 * g[[0, 0]];
                    send(*a, val(*a) * k);
                }
                Op::Sum(a) => {
                    let shape = val(*a).dim();
                    send(*a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::StraightThrough(z) => send(*z, g.clone()),
                Op::Custom(inputs, f) => {
                    let parts = f(&g);
                    debug_assert_eq!(parts.len(), inputs.len());
                    for (v, d) in inputs.iter().zip(parts) {
                        send(*v, d);
                    }
                }
            }
            self.nodes[i].0.grad = Some(g);
        }
        Ok(())
    }

    /// Accumulated gradients of every [`Tape::param`] leaf, indexed by id.
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Array2<f64>>> {
        let mut out: Vec<Option<Array2<f64>>> = (0..n_params).map(|_| None).collect();
        for (t, op) in &self.nodes {
            if let (Op::Param(id), Some(g)) = (op, &t.grad) {
                if *id < n_params {
                    match &mut out[*id] {
                        Some(acc) => *acc += g,
                        slot @ None => *slot = Some(g.clone()),
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut t = Tape::new();
        assert!(matches!(t.backward(Var(0)), Err(Error::State(_))));
    }

    #[test]
    fn sum_of_parameters_has_unit_gradient() {
        let mut t = Tape::new();
        let w = t.param(0, &array![[1.0, -2.0], [0.5, 3.0]]);
        let b = t.param(1, &array![[4.0, 5.0, 6.0]]);
        let s1 = t.sum(w);
        let s2 = t.sum(b);
        let loss = t.add(s1, s2);
        t.backward(loss).unwrap();
        let g = t.param_grads(2);
        assert!(g[0].as_ref().unwrap().iter().all(|&x| x == 1.0));
        assert!(g[1].as_ref().unwrap().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn squared_norm_of_linear_map() {
        // loss = ‖x W‖² with x a row vector, so ∂/∂W = 2 xᵀ (x W).
        let x = array![[0.3, -1.2, 0.7]];
        let w = array![[0.2, -0.4], [1.1, 0.5], [-0.3, 0.8]];
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.param(0, &w);
        let y = t.matmul(xv, wv);
        let loss = t.sum_sq(y);
        t.backward(loss).unwrap();
        let expect = x.t().dot(&x.dot(&w)) * 2.0;
        let got = t.param_grads(1)[0].clone().unwrap();
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let mut t = Tape::new();
        let z = t.param(0, &array![[0.2, -0.7]]);
        let q = t.straight_through(z, array![[0.0, -1.0]]).unwrap();
        assert_eq!(t.value(q), &array![[0.0, -1.0]]);
        let loss = t.sum_sq(q);
        t.backward(loss).unwrap();
        // d/dz of ‖q‖² treats q as z + const: 2q.
        assert_eq!(t.param_grads(1)[0].as_ref().unwrap(), &array![[0.0, -2.0]]);
        assert!(t.straight_through(z, array![[0.0]]).is_err());
    }

    #[test]
    fn second_backward_rejected() {
        let mut t = Tape::new();
        let a = t.param(0, &array![[1.0]]);
        let l = t.sum_sq(a);
        t.backward(l).unwrap();
        assert!(matches!(t.backward(l), Err(Error::State(_))));
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x0 = array![[0.3, -0.8, 1.4], [-0.1, 0.6, -2.0]];
        let row = array![[0.05, -0.2, 0.3]];
        let f = |x: &Array2<f64>| -> (f64, Array2<f64>) {
            let mut t = Tape::new();
            let xv = t.param(0, x);
            let r = t.constant(row.clone());
            let a = t.add_row(xv, r);
            let b = t.leaky_relu(a, 0.01);
            let c = t.tanh(b);
            let d = t.scale(c, 1.7);
            let e = t.sub(d, xv);
            let l = t.sum_sq(e);
            let v = t.scalar(l);
            t.backward(l).unwrap();
            (v, t.param_grads(1)[0].clone().unwrap())
        };
        let (_, g) = f(&x0);
        let h = 1e-6;
        for idx in [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)] {
            let mut xp = x0.clone();
            xp[idx] += h;
            let mut xm = x0.clone();
            xm[idx] -= h;
            let fd = (f(&xp).0 - f(&xm).0) / (2.0 * h);
            assert!((fd - g[idx]).abs() <= 1e-6 * fd.abs().max(1.0), "{idx:?}");
        }
    }
}

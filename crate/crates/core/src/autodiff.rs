//! Reverse-mode differentiation over a tape of dense matrix operations.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Vjp = Box<dyn Fn(&DMatrix<f64>) -> Vec<DMatrix<f64>>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    /// Matrix plus a column vector broadcast over columns.
    AddColumn(Var, Var),
    Relu(Var),
    Tanh(Var),
    SumSquares(Var),
    VStack(Vec<Var>),
    Rows(Var, usize),
    Cols(Var, usize),
    Custom(Vec<Var>, Vjp),
}

struct Node {
    value: DMatrix<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Trainable input.
    pub fn param(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ca != rb {
            return Err(Error::shape("matmul", format!("{ra}x{ca} * {ca}xk"), format!("{rb}x{cb}")));
        }
        let v = self.value(a) * self.value(b);
        let g = self.needs(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        let g = self.needs(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        let g = self.needs(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let g = self.needs(&[a]);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn add_column(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(col) != (r, 1) {
            return Err(Error::shape("column broadcast", format!("{r}x1"), format!("{:?}", self.dims(col))));
        }
        let mut v = self.value(a).clone();
        let b = self.value(col).column(0).into_owned();
        for j in 0..c {
            let mut cj = v.column_mut(j);
            cj += &b;
        }
        let g = self.needs(&[a, col]);
        Ok(self.push(v, Op::AddColumn(a, col), g))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let g = self.needs(&[a]);
        self.push(v, Op::Relu(a), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let g = self.needs(&[a]);
        self.push(v, Op::Tanh(a), g)
    }

    /// Sum of squared entries as a 1x1 node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = DMatrix::from_element(1, 1, self.value(a).norm_squared());
        let g = self.needs(&[a]);
        self.push(v, Op::SumSquares(a), g)
    }

    /// Stacks nodes with equal column counts on top of each other.
    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|p| self.dims(*p).1).unwrap_or(0);
        let mut rows = 0;
        for p in parts {
            let (r, c) = self.dims(*p);
            if c != cols {
                return Err(Error::shape("vstack", cols, c));
            }
            rows += r;
        }
        let mut v = DMatrix::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            let pv = self.value(*p);
            v.view_mut((at, 0), pv.shape()).copy_from(pv);
            at += pv.nrows();
        }
        let g = self.needs(parts);
        Ok(self.push(v, Op::VStack(parts.to_vec()), g))
    }

    /// Contiguous block of rows `start..start + count`.
    pub fn rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + count > r {
            return Err(Error::shape("row slice", format!("<= {r} rows"), start + count));
        }
        let v = self.value(a).view((start, 0), (count, c)).into_owned();
        let g = self.needs(&[a]);
        Ok(self.push(v, Op::Rows(a, start), g))
    }

    /// Contiguous block of columns `start..start + count`.
    pub fn cols(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + count > c {
            return Err(Error::shape("column slice", format!("<= {c} columns"), start + count));
        }
        let v = self.value(a).view((0, start), (r, count)).into_owned();
        let g = self.needs(&[a]);
        Ok(self.push(v, Op::Cols(a, start), g))
    }

    /// Records an operation with a caller-supplied vector-Jacobian product.
    /// `vjp` maps the output cotangent to one cotangent per input, in order.
    pub fn custom(&mut self, inputs: &[Var], value: DMatrix<f64>, vjp: Vjp) -> Var {
        let g = self.needs(inputs);
        self.push(value, Op::Custom(inputs.to_vec(), vjp), g)
    }

    fn same_shape(&self, ctx: &'static str, a: Var, b: Var) -> Result<()> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da == db {
            Ok(())
        } else {
            Err(Error::shape(ctx, format!("{da:?}"), format!("{db:?}")))
        }
    }

    /// Reverse accumulation from a 1x1 root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.dims(root) != (1, 1) {
            return Err(Error::shape("backward root", "1x1", format!("{:?}", self.dims(root))));
        }
        let mut grads: Vec<Option<DMatrix<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(DMatrix::from_element(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut send = |v: Var, d: DMatrix<f64>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += d,
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        send(*a, &g * self.value(*b).transpose());
                    }
                    if self.nodes[b.0].needs_grad {
                        send(*b, self.value(*a).transpose() * &g);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, -g.clone());
                }
                Op::Scale(a, c) => send(*a, &g * *c),
                Op::AddColumn(a, col) => {
                    let summed = DMatrix::from_fn(g.nrows(), 1, |r, _| g.row(r).sum());
                    send(*col, summed);
                    send(*a, g.clone());
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    send(*a, g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }));
                }
                Op::Tanh(a) => send(*a, g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))),
                Op::SumSquares(a) => send(*a, self.value(*a) * (2.0 * g[(0, 0)])),
                Op::VStack(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let (r, c) = self.dims(*p);
                        send(*p, g.view((at, 0), (r, c)).into_owned());
                        at += r;
                    }
                }
                Op::Rows(a, start) => {
                    let (r, c) = self.dims(*a);
                    let mut full = DMatrix::zeros(r, c);
                    full.view_mut((*start, 0), g.shape()).copy_from(&g);
                    send(*a, full);
                }
                Op::Cols(a, start) => {
                    let (r, c) = self.dims(*a);
                    let mut full = DMatrix::zeros(r, c);
                    full.view_mut((0, *start), g.shape()).copy_from(&g);
                    send(*a, full);
                }
                Op::Custom(inputs, vjp) => {
                    for (v, d) in inputs.iter().zip(vjp(&g)) {
                        send(*v, d);
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` if `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&DMatrix<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> DMatrix<f64> {
        self.get(v).cloned().unwrap_or_else(|| DMatrix::zeros(shape.0, shape.1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadratic_form_gradient() {
        let w = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.3, 0.0, 4.0]);
        let x = DMatrix::from_column_slice(3, 1, &[0.7, -1.1, 2.0]);
        let mut t = Tape::new();
        let wv = t.param(w.clone());
        let xv = t.constant(x.clone());
        let y = t.matmul(wv, xv).unwrap();
        let l = t.sum_squares(y);
        let g = t.backward(l).unwrap();
        let want = (&w * &x) * x.transpose() * 2.0;
        assert!((g.get(wv).unwrap() - want).norm() < 1e-14);
        assert!(g.get(xv).is_none());
    }

    #[test]
    fn relu_in_positive_region_is_identity() {
        let w = DMatrix::from_row_slice(2, 1, &[1.5, 0.5]);
        let x = DMatrix::from_element(1, 1, 2.0);
        let grad = |relu: bool| {
            let mut t = Tape::new();
            let wv = t.param(w.clone());
            let xv = t.constant(x.clone());
            let mut y = t.matmul(wv, xv).unwrap();
            if relu {
                y = t.relu(y);
            }
            let l = t.sum_squares(y);
            t.backward(l).unwrap().get(wv).unwrap().clone()
        };
        assert_eq!(grad(true), grad(false));
    }

    #[test]
    fn structural_ops_route_gradients() {
        let mut t = Tape::new();
        let a = t.param(DMatrix::from_row_slice(1, 2, &[1.0, 2.0]));
        let b = t.param(DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let s = t.vstack(&[a, b]).unwrap();
        let r = t.rows(s, 1, 1).unwrap();
        let r = t.cols(r, 0, 2).unwrap();
        let bias = t.param(DMatrix::from_element(1, 1, 0.5));
        let r = t.add_column(r, bias).unwrap();
        let r = t.scale(r, 3.0);
        let l = t.sum_squares(r);
        assert_relative_eq!(t.scalar(l), 9.0 * (3.5f64.powi(2) + 4.5f64.powi(2)));
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap(), &DMatrix::zeros(1, 2));
        let gb = g.get(b).unwrap();
        assert_relative_eq!(gb[(0, 0)], 18.0 * 3.5);
        assert_eq!(gb[(1, 0)], 0.0);
        assert_relative_eq!(g.get(bias).unwrap()[(0, 0)], 18.0 * (3.5 + 4.5));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let a = t.param(DMatrix::zeros(2, 1));
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn custom_op_vjp() {
        let mut t = Tape::new();
        let a = t.param(DMatrix::from_element(1, 1, 3.0));
        let av = t.value(a)[(0, 0)];
        let cube = t.custom(
            &[a],
            DMatrix::from_element(1, 1, av.powi(3)),
            Box::new(move |g| vec![g * (3.0 * av * av)]),
        );
        let l = t.sum_squares(cube);
        let g = t.backward(l).unwrap();
        assert_relative_eq!(g.get(a).unwrap()[(0, 0)], 2.0 * 27.0 * 27.0);
    }
}

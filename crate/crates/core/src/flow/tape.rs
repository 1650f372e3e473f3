//! Minimal reverse-mode tape over dense matrices.
//!
//! Batches are laid out with one sample per column. Jacobian tangents of a
//! `D`-dimensional input are carried as `rows × (D·B)` matrices whose column
//! block `j` belongs to sample `j`; [`Tape::repeat_cols`] and
//! [`Tape::group_sum_cols`] move between the two layouts.

use nalgebra::DMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position in the gradient vector returned by [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    SumAll(Var),
    SumRows(Var),
    Rows(Var, usize),
    VStack(Vec<Var>),
    RepeatCols(Var, usize),
    GroupSumCols(Var, usize),
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<DMatrix<f64>>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0][(0, 0)]
    }

    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).component_mul(self.value(b));
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).add_scalar(c);
        self.push(v, Op::AddScalar(a))
    }

    /// Adds the column vector `b` to every column of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        let bias = self.value(b).column(0).into_owned();
        for mut c in v.column_iter_mut() {
            c += &bias;
        }
        self.push(v, Op::AddBias(a, b))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(super::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    /// Sum of every entry as a 1×1 matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = DMatrix::from_element(1, 1, self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Column sums as a row vector.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).row_sum();
        let v = DMatrix::from_row_slice(1, v.len(), v.as_slice());
        self.push(v, Op::SumRows(a))
    }

    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).rows(start, len).into_owned();
        self.push(v, Op::Rows(a, start))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        let ncols = self.value(parts[0]).ncols();
        let nrows = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut v = DMatrix::zeros(nrows, ncols);
        let mut r = 0;
        for &p in parts {
            let m = self.value(p);
            v.rows_mut(r, m.nrows()).copy_from(m);
            r += m.nrows();
        }
        self.push(v, Op::VStack(parts.to_vec()))
    }

    /// Each column repeated `k` times in place: `r×c -> r×(c·k)`.
    pub fn repeat_cols(&mut self, a: Var, k: usize) -> Var {
        let v = repeat_cols(self.value(a), k);
        self.push(v, Op::RepeatCols(a, k))
    }

    /// Sums consecutive groups of `k` columns: `r×(c·k) -> r×c`.
    pub fn group_sum_cols(&mut self, a: Var, k: usize) -> Var {
        let v = group_sum_cols(self.value(a), k);
        self.push(v, Op::GroupSumCols(a, k))
    }

    /// Gradients of the scalar `out` with respect to every leaf; interior
    /// entries are released during the sweep and come back as `None`.
    pub fn backward(&self, out: Var) -> Vec<Option<DMatrix<f64>>> {
        let seed = DMatrix::from_element(1, 1, 1.0);
        self.backward_from(out, seed)
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_from(&self, out: Var, seed: DMatrix<f64>) -> Vec<Option<DMatrix<f64>>> {
        assert_eq!(seed.shape(), self.values[out.0].shape(), "seed shape must match the output");
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; self.values.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &self.values[i];
            match &self.ops[i] {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = &g * self.values[b.0].transpose();
                    let gb = self.values[a.0].transpose() * &g;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    let ga = g.component_mul(&self.values[b.0]);
                    let gb = g.component_mul(&self.values[a.0]);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g.clone()),
                Op::AddBias(a, b) => {
                    let gb = g.column_sum();
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, DMatrix::from_column_slice(gb.len(), 1, gb.as_slice()));
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, g.component_mul(y)),
                Op::Square(a) => {
                    let ga = g.zip_map(&self.values[a.0], |gi, xi| 2.0 * gi * xi);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = g.zip_map(y, |gi, yi| 0.5 * gi / yi);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.values[a.0].shape();
                    accumulate(&mut grads, *a, DMatrix::from_element(r, c, g[(0, 0)]));
                }
                Op::SumRows(a) => {
                    let (r, c) = self.values[a.0].shape();
                    accumulate(&mut grads, *a, DMatrix::from_fn(r, c, |_, j| g[(0, j)]));
                }
                Op::Rows(a, start) => {
                    let (r, c) = self.values[a.0].shape();
                    let mut ga = DMatrix::zeros(r, c);
                    ga.rows_mut(*start, g.nrows()).copy_from(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::VStack(parts) => {
                    let mut r = 0;
                    for p in parts {
                        let n = self.values[p.0].nrows();
                        accumulate(&mut grads, *p, g.rows(r, n).into_owned());
                        r += n;
                    }
                }
                Op::RepeatCols(a, k) => accumulate(&mut grads, *a, group_sum_cols(&g, *k)),
                Op::GroupSumCols(a, k) => accumulate(&mut grads, *a, repeat_cols(&g, *k)),
            }
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<DMatrix<f64>>], v: Var, g: DMatrix<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += g,
        slot => *slot = Some(g),
    }
}

pub(crate) fn repeat_cols(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols() * k, |r, c| m[(r, c / k)])
}

pub(crate) fn group_sum_cols(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let c = m.ncols() / k;
    let mut out = DMatrix::zeros(m.nrows(), c);
    for j in 0..c {
        let mut acc = out.column_mut(j);
        for i in 0..k {
            acc += m.column(j * k + i);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x: DMatrix<f64>) {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let out = build(&mut t, xv);
        let g = t.backward(out)[xv.0].clone().unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut p = x.clone();
            p[i] += h;
            let mut m = x.clone();
            m[i] -= h;
            let f = |v: DMatrix<f64>| {
                let mut t = Tape::new();
                let xv = t.leaf(v);
                let o = build(&mut t, xv);
                t.scalar(o)
            };
            let fd = (f(p) - f(m)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "entry {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn elementwise_chain() {
        let x = DMatrix::from_row_slice(2, 3, &[0.1, -0.4, 0.7, 1.2, 0.3, -0.9]);
        fd_check(
            |t, x| {
                let a = t.tanh(x);
                let b = t.exp(a);
                let c = t.mul(b, x);
                let d = t.square(c);
                let e = t.add_scalar(d, 1.0);
                let f = t.sqrt(e);
                t.sum(f)
            },
            x,
        );
    }

    #[test]
    fn structural_ops() {
        let x = DMatrix::from_row_slice(3, 2, &[0.5, -1.0, 2.0, 0.25, -0.3, 0.8]);
        fd_check(
            |t, x| {
                let w = t.leaf(DMatrix::from_row_slice(2, 3, &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]));
                let b = t.leaf(DMatrix::from_column_slice(2, 1, &[0.1, -0.2]));
                let top = t.rows(x, 0, 1);
                let rest = t.rows(x, 1, 2);
                let s = t.vstack(&[rest, top]);
                let y = t.matmul(w, s);
                let y = t.add_bias(y, b);
                let r = t.repeat_cols(y, 3);
                let q = t.square(r);
                let g = t.group_sum_cols(q, 2);
                let h = t.sum_rows(g);
                let k = t.sub(h, h);
                let k = t.add(k, h);
                let k = t.scale(k, 0.5);
                t.sum(k)
            },
            x,
        );
    }

    #[test]
    fn layout_helpers() {
        let m = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let r = repeat_cols(&m, 3);
        assert_eq!(r.as_slice(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(group_sum_cols(&r, 3).as_slice(), &[3.0, 6.0]);
    }
}

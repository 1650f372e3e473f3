use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Feed-forward network with tanh hidden layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Xavier-uniform hidden layers; the output layer starts at zero.
    pub fn new<R: Rng>(input: usize, hidden: &[usize], output: usize, rng: &mut R) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (n_in, n_out) = (w[0], w[1]);
                let weight = if k == last {
                    DMatrix::zeros(n_out, n_in)
                } else {
                    let a = (6.0 / (n_in + n_out) as f64).sqrt();
                    DMatrix::from_fn(n_out, n_in, |_, _| rng.random_range(-a..a))
                };
                Dense {
                    weight,
                    bias: DVector::zeros(n_out),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut a = &l.weight * &h;
            for mut c in a.column_iter_mut() {
                c += &l.bias;
            }
            h = if k < last { a.map(super::tanh) } else { a };
        }
        h
    }

    /// Output and `∂out/∂x` at a single input.
    pub fn forward_jacobian(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let mut h = x.clone();
        let mut j = DMatrix::identity(x.len(), x.len());
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let a = &l.weight * &h + &l.bias;
            j = &l.weight * j;
            if k < last {
                h = a.map(super::tanh);
                for (r, hr) in h.iter().enumerate() {
                    j.row_mut(r).scale_mut(1.0 - hr * hr);
                }
            } else {
                h = a;
            }
        }
        (h, j)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
    }

    pub fn read_params(&mut self, src: &mut impl Iterator<Item = f64>) {
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = src.next().expect("parameter count checked by caller");
            }
        }
    }

    /// Registers the parameters as tape leaves, in [`Mlp::write_params`] order.
    pub fn tape_params(&self, tape: &mut Tape) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|l| {
                let w = tape.leaf(l.weight.clone());
                let b = tape.leaf(DMatrix::from_column_slice(l.bias.len(), 1, l.bias.as_slice()));
                (w, b)
            })
            .collect()
    }
}

/// Runs a network on the tape. With a tangent `dx` (`in × (k·B)`), also
/// returns the pushed-forward tangent of the output.
pub fn mlp_tape(tape: &mut Tape, params: &[(Var, Var)], x: Var, dx: Option<Var>, k: usize) -> (Var, Option<Var>) {
    let mut h = x;
    let mut dh = dx;
    let last = params.len() - 1;
    for (i, &(w, b)) in params.iter().enumerate() {
        let a = tape.matmul(w, h);
        let a = tape.add_bias(a, b);
        let da = dh.map(|d| tape.matmul(w, d));
        if i < last {
            h = tape.tanh(a);
            dh = da.map(|d| {
                let sq = tape.square(h);
                let neg = tape.scale(sq, -1.0);
                let deriv = tape.add_scalar(neg, 1.0);
                let rep = tape.repeat_cols(deriv, k);
                tape.mul(rep, d)
            });
        } else {
            h = a;
            dh = da;
        }
    }
    (h, dh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Mlp::new(3, &[8, 8], 2, &mut rng);
        let x = DMatrix::from_fn(3, 5, |r, c| (r + c) as f64 * 0.1);
        assert_eq!(m.forward(&x), DMatrix::zeros(2, 5));
        assert_eq!(m.param_count(), 3 * 8 + 8 + 64 + 8 + 16 + 2);
    }

    #[test]
    fn jacobian_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = Mlp::new(3, &[5], 2, &mut rng);
        m.layers[1].weight = DMatrix::from_fn(2, 5, |r, c| (r as f64 - c as f64) * 0.3);
        let x = DVector::from_vec(vec![0.2, -0.5, 0.9]);
        let (_, j) = m.forward_jacobian(&x);
        let h = 1e-6;
        for c in 0..3 {
            let mut p = x.clone();
            p[c] += h;
            let mut q = x.clone();
            q[c] -= h;
            let fd = (m.forward(&DMatrix::from_column_slice(3, 1, p.as_slice()))
                - m.forward(&DMatrix::from_column_slice(3, 1, q.as_slice())))
                / (2.0 * h);
            for r in 0..2 {
                assert!((fd[(r, 0)] - j[(r, c)]).abs() < 1e-8);
            }
        }
    }
}

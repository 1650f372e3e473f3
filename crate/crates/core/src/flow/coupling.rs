use nalgebra::{DMatrix, DVector};

use super::net::{mlp_tape, Mlp};
use super::tape::{Tape, Var};

/// Bound `B` on the log-scale: `s = B·tanh(raw)`.
pub const SCALE_BOUND: f64 = 3.0;

/// Affine coupling: the pass-through block conditions a scale and shift
/// applied to the transformed block.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    pub dim: usize,
    /// Size `d` of the leading block `0..d`.
    pub split: usize,
    /// When set, `d..D` passes through and `0..d` is transformed.
    pub swapped: bool,
    pub s_net: Mlp,
    pub t_net: Mlp,
}

/// Tape handles for one layer's parameters.
pub(crate) struct LayerVars {
    pub s: Vec<(Var, Var)>,
    pub t: Vec<(Var, Var)>,
}

impl CouplingLayer {
    /// `(start, len)` of the pass-through block.
    pub fn pass_block(&self) -> (usize, usize) {
        if self.swapped {
            (self.split, self.dim - self.split)
        } else {
            (0, self.split)
        }
    }

    /// `(start, len)` of the transformed block.
    pub fn transformed_block(&self) -> (usize, usize) {
        if self.swapped {
            (0, self.split)
        } else {
            (self.split, self.dim - self.split)
        }
    }

    fn scale_shift(&self, pass: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let s = self.s_net.forward(pass).map(|r| SCALE_BOUND * super::tanh(r));
        (s, self.t_net.forward(pass))
    }

    fn assemble(&self, pass: &DMatrix<f64>, trans: &DMatrix<f64>) -> DMatrix<f64> {
        let (ps, _) = self.pass_block();
        let (ts, _) = self.transformed_block();
        let mut out = DMatrix::zeros(self.dim, pass.ncols());
        out.rows_mut(ps, pass.nrows()).copy_from(pass);
        out.rows_mut(ts, trans.nrows()).copy_from(trans);
        out
    }

    /// Forward map of a batch (one sample per column) and per-sample log-det.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let (ps, pl) = self.pass_block();
        let (ts, tl) = self.transformed_block();
        let pass = x.rows(ps, pl).into_owned();
        let (s, t) = self.scale_shift(&pass);
        let trans = x.rows(ts, tl).component_mul(&s.map(f64::exp)) + t;
        let logdet = s.row_sum().transpose();
        (self.assemble(&pass, &trans), logdet)
    }

    pub fn inverse_batch(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let (ps, pl) = self.pass_block();
        let (ts, tl) = self.transformed_block();
        let pass = y.rows(ps, pl).into_owned();
        let (s, t) = self.scale_shift(&pass);
        let trans = (y.rows(ts, tl) - t).component_mul(&s.map(|v| (-v).exp()));
        self.assemble(&pass, &trans)
    }

    /// Output and dense Jacobian at one input.
    pub fn forward_jacobian(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (ps, pl) = self.pass_block();
        let (ts, tl) = self.transformed_block();
        let pass = x.rows(ps, pl).into_owned();
        let (raw, js) = self.s_net.forward_jacobian(&pass);
        let (t, jt) = self.t_net.forward_jacobian(&pass);
        let mut y = x.clone();
        let mut j = DMatrix::identity(self.dim, self.dim);
        for r in 0..tl {
            let th = super::tanh(raw[r]);
            let s = SCALE_BOUND * th;
            let es = s.exp();
            let xt = x[ts + r];
            y[ts + r] = xt * es + t[r];
            j[(ts + r, ts + r)] = es;
            let ds = SCALE_BOUND * (1.0 - th * th);
            for c in 0..pl {
                j[(ts + r, ps + c)] = xt * es * ds * js[(r, c)] + jt[(r, c)];
            }
        }
        (y, j)
    }

    pub(crate) fn tape_params(&self, tape: &mut Tape) -> LayerVars {
        LayerVars {
            s: self.s_net.tape_params(tape),
            t: self.t_net.tape_params(tape),
        }
    }

    /// Forward pass on the tape. Returns the output, its tangent when `dx`
    /// is given (`D × (D·B)`), and the summed log-scale over the batch.
    pub(crate) fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &LayerVars,
        x: Var,
        dx: Option<Var>,
    ) -> (Var, Option<Var>, Var) {
        let (ps, pl) = self.pass_block();
        let (ts, tl) = self.transformed_block();
        let k = self.dim;
        let pass = tape.rows(x, ps, pl);
        let trans = tape.rows(x, ts, tl);
        let dpass = dx.map(|d| tape.rows(d, ps, pl));
        let dtrans = dx.map(|d| tape.rows(d, ts, tl));

        let (raw, draw) = mlp_tape(tape, &vars.s, pass, dpass, k);
        let th = tape.tanh(raw);
        let s = tape.scale(th, SCALE_BOUND);
        let (t, dt) = mlp_tape(tape, &vars.t, pass, dpass, k);
        let es = tape.exp(s);
        let scaled = tape.mul(trans, es);
        let y_trans = tape.add(scaled, t);

        let dy_trans = match (dtrans, draw, dt) {
            (Some(dtr), Some(draw), Some(dt)) => {
                // d(x·e^s + t) = dx·e^s + x·e^s·ds + dt, ds = B(1 - tanh²)·draw
                let es_rep = tape.repeat_cols(es, k);
                let a = tape.mul(dtr, es_rep);
                let sq = tape.square(th);
                let neg = tape.scale(sq, -SCALE_BOUND);
                let dtanh = tape.add_scalar(neg, SCALE_BOUND);
                let coef = tape.mul(dtanh, scaled);
                let coef_rep = tape.repeat_cols(coef, k);
                let b = tape.mul(coef_rep, draw);
                let ab = tape.add(a, b);
                Some(tape.add(ab, dt))
            }
            _ => None,
        };
        let stack = |tape: &mut Tape, p: Var, q: Var| {
            if self.swapped {
                tape.vstack(&[q, p])
            } else {
                tape.vstack(&[p, q])
            }
        };
        let y = stack(tape, pass, y_trans);
        let dy = match (dpass, dy_trans) {
            (Some(dp), Some(dq)) => Some(stack(tape, dp, dq)),
            _ => None,
        };
        let s_sum = tape.sum(s);
        (y, dy, s_sum)
    }
}

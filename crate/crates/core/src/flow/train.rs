use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Flow, LN_2PI};
use super::tape::{Tape, Var};
use crate::fsutil::write_atomic;
use crate::{Error, Result};

/// Which Jacobian the Frobenius penalty is taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrobeniusMode {
    /// Norm of the composed Jacobian `∂z/∂w`.
    #[default]
    Composed,
    /// Sum of the norms of the per-layer Jacobians.
    PerLayerSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cosine_decay: bool,
    pub dequantize: bool,
    pub jacobian_weight: f64,
    pub frobenius: FrobeniusMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            learning_rate: 1e-3,
            cosine_decay: true,
            dequantize: true,
            jacobian_weight: 1.0,
            frobenius: FrobeniusMode::Composed,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.jacobian_weight >= 0.0 && self.jacobian_weight.is_finite()) {
            problems.push(format!("jacobian_weight must be >= 0, got {}", self.jacobian_weight));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }
}

/// Batch-mean loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub nll: f64,
    pub frobenius: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub nll: f64,
    pub frobenius: f64,
    pub total: f64,
}

/// Per-sample identity tangents scaled by `diag`: block `j` is `diag(diag)`.
fn tangent_seed(diag: &DVector<f64>, batch: usize) -> DMatrix<f64> {
    let d = diag.len();
    DMatrix::from_fn(d, d * batch, |r, c| if c % d == r { diag[r] } else { 0.0 })
}

/// Batch mean of the per-sample Frobenius norms of a `D × (D·B)` tangent.
fn frobenius_mean(tape: &mut Tape, tangent: Var, d: usize, batch: usize) -> Var {
    let sq = tape.square(tangent);
    let cols = tape.sum_rows(sq);
    let per_sample = tape.group_sum_cols(cols, d);
    let norms = tape.sqrt(per_sample);
    let total = tape.sum(norms);
    tape.scale(total, 1.0 / batch as f64)
}

/// Mean `NLL + weight·‖J‖_F` over the columns of `batch` and its gradient
/// with respect to [`Flow::params`].
pub fn loss_and_gradient(
    flow: &Flow,
    batch: &DMatrix<f64>,
    weight: f64,
    mode: FrobeniusMode,
) -> Result<(LossParts, Vec<f64>)> {
    let d = flow.dim();
    let b = batch.ncols();
    if batch.nrows() != d || b == 0 {
        return Err(Error::Dimension(format!("batch is {}×{}, flow dimension {d}", batch.nrows(), b)));
    }
    let mut tape = Tape::new();
    let vars: Vec<_> = flow.layers.iter().map(|l| l.tape_params(&mut tape)).collect();
    let mut x = tape.leaf(flow.standardize(batch));
    let inv_scale = flow.scale().map(|s| 1.0 / s);
    let ones = DVector::from_element(d, 1.0);

    let mut dx = match mode {
        FrobeniusMode::Composed => Some(tape.leaf(tangent_seed(&inv_scale, b))),
        FrobeniusMode::PerLayerSum => None,
    };
    let mut s_sums = Vec::with_capacity(flow.layers.len());
    let mut layer_frobs = Vec::new();
    for (layer, v) in flow.layers.iter().zip(&vars) {
        let input_tangent = match mode {
            FrobeniusMode::Composed => dx,
            FrobeniusMode::PerLayerSum => Some(tape.leaf(tangent_seed(&ones, b))),
        };
        let (y, dy, s) = layer.forward_tape(&mut tape, v, x, input_tangent);
        x = y;
        s_sums.push(s);
        match mode {
            FrobeniusMode::Composed => dx = dy,
            FrobeniusMode::PerLayerSum => {
                let dy = dy.expect("tangent requested");
                layer_frobs.push(frobenius_mean(&mut tape, dy, d, b));
            }
        }
    }

    let sq = tape.square(x);
    let mut nll = tape.sum(sq);
    nll = tape.scale(nll, 0.5);
    for s in s_sums {
        nll = tape.sub(nll, s);
    }
    nll = tape.scale(nll, 1.0 / b as f64);
    nll = tape.add_scalar(nll, 0.5 * d as f64 * LN_2PI - flow.standardization_logdet());

    let frob = match mode {
        FrobeniusMode::Composed => frobenius_mean(&mut tape, dx.expect("tangent requested"), d, b),
        FrobeniusMode::PerLayerSum => {
            let mut acc = layer_frobs[0];
            for &f in &layer_frobs[1..] {
                acc = tape.add(acc, f);
            }
            tape.add_scalar(acc, inv_scale.norm())
        }
    };
    let weighted = tape.scale(frob, weight);
    let total = tape.add(nll, weighted);

    let parts = LossParts {
        nll: tape.scalar(nll),
        frobenius: tape.scalar(frob),
        total: tape.scalar(total),
    };
    if !parts.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = tape.backward(total);
    let mut out = Vec::with_capacity(flow.param_count());
    for v in &vars {
        for &(w, bias) in v.s.iter().chain(&v.t) {
            for p in [w, bias] {
                match &grads[p.index()] {
                    Some(g) => out.extend_from_slice(g.as_slice()),
                    None => out.extend(std::iter::repeat_n(0.0, tape.value(p).len())),
                }
            }
        }
    }
    Ok((parts, out))
}

/// Mean `NLL + weight·‖J‖_F` over the columns of `data`, without gradients.
pub fn objective(flow: &Flow, data: &DMatrix<f64>, weight: f64, mode: FrobeniusMode) -> Result<LossParts> {
    let n = data.ncols();
    if data.nrows() != flow.dim() || n == 0 {
        return Err(Error::Dimension(format!("data is {}×{n}, flow dimension {}", data.nrows(), flow.dim())));
    }
    let nll = flow.nll_batch(data)?.mean();
    let mut frobenius = 0.0;
    for c in data.column_iter() {
        let w = c.into_owned();
        frobenius += match mode {
            FrobeniusMode::Composed => flow.jacobian_frobenius(&w)?,
            FrobeniusMode::PerLayerSum => flow.layer_frobenius_sum(&w)?,
        };
    }
    let frobenius = frobenius / n as f64;
    Ok(LossParts {
        nll,
        frobenius,
        total: nll + weight * frobenius,
    })
}

/// `w + u·sqrt(σ_w)` with `u ~ U(0, 1)` per dimension.
pub fn dequantize(w: &DVector<f64>, variance: &DVector<f64>, seed: u64) -> Result<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dequantize_with(w, variance, &mut rng)
}

pub fn dequantize_with<R: Rng>(w: &DVector<f64>, variance: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
    if w.len() != variance.len() {
        return Err(Error::Dimension("variance length differs from sample length".into()));
    }
    if variance.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument("dequantization variance must be >= 0".into()));
    }
    Ok(DVector::from_fn(w.len(), |i, _| w[i] + rng.random::<f64>() * variance[i].sqrt()))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Fits standardization to `data` (one sample per column), then minimizes
/// the regularized NLL with Adam over shuffled mini-batches. The history
/// holds the [`objective`] on the undequantized data after each epoch.
pub fn train(initial: &Flow, data: &DMatrix<f64>, config: &TrainConfig) -> Result<(Flow, Vec<EpochLoss>)> {
    config.validate()?;
    if data.nrows() != initial.dim() {
        return Err(Error::Dimension(format!(
            "training data has dimension {}, flow {}",
            data.nrows(),
            initial.dim()
        )));
    }
    let n = data.ncols();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("training needs at least 2 samples, got {n}")));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("training data".into()));
    }
    let mut flow = initial.clone();
    flow.fit_standardization(data)?;
    let variance = flow.scale().map(|s| s * s);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = flow.params();
    let mut adam = Adam::new(params.len());
    let batch_size = config.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch_size);
    let total_steps = (steps_per_epoch * config.epochs) as f64;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let mut batch = DMatrix::zeros(data.nrows(), chunk.len());
            for (c, &i) in chunk.iter().enumerate() {
                let col = data.column(i).into_owned();
                let col = if config.dequantize {
                    dequantize_with(&col, &variance, &mut rng)?
                } else {
                    col
                };
                batch.set_column(c, &col);
            }
            let (_, grad) = match loss_and_gradient(&flow, &batch, config.jacobian_weight, config.frobenius) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch }),
                Err(e) => return Err(e),
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            let lr = if config.cosine_decay {
                0.5 * config.learning_rate * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos())
            } else {
                config.learning_rate
            };
            adam.step(&mut params, &grad, lr);
            flow.set_params(&params)?;
            step += 1;
        }
        let parts = match objective(&flow, data, config.jacobian_weight, config.frobenius) {
            Ok(p) if p.total.is_finite() => p,
            Ok(_) | Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch }),
            Err(e) => return Err(e),
        };
        history.push(EpochLoss {
            epoch,
            nll: parts.nll,
            frobenius: parts.frobenius,
            total: parts.total,
        });
    }

    let (z, _) = flow.forward_batch(data)?;
    let back = flow.inverse_batch(&z)?;
    let scale = data.amax().max(1.0);
    if (back - data).amax() > 1e-8 * scale {
        return Err(Error::Degenerate("trained flow failed the round-trip check".into()));
    }
    Ok((flow, history))
}

pub fn loss_csv(history: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,nll,frobenius,total\n");
    for h in history {
        writeln!(s, "{},{:?},{:?},{:?}", h.epoch, h.nll, h.frobenius, h.total).unwrap();
    }
    s
}

pub fn write_loss_csv(history: &[EpochLoss], path: &Path) -> Result<()> {
    write_atomic(path, loss_csv(history).as_bytes())
}

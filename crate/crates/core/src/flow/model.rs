use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::coupling::CouplingLayer;
use super::net::Mlp;
use crate::binio::{Reader, Writer};
use crate::fsutil::write_atomic;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MFFL";
const VERSION: u32 = 1;
/// Smallest standardization scale relative to the largest.
pub const STD_FLOOR: f64 = 1e-2;
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Network shape shared by every `s` and `t` network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowShape {
    pub layers: usize,
    pub hidden: Vec<usize>,
}

impl Default for FlowShape {
    fn default() -> Self {
        Self {
            layers: 6,
            hidden: vec![64, 64],
        }
    }
}

/// Standardization followed by a stack of affine couplings; the base
/// density is a standard normal.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    dim: usize,
    shift: DVector<f64>,
    scale: DVector<f64>,
    pub layers: Vec<CouplingLayer>,
}

impl Flow {
    /// A flow that starts as the identity map: hidden weights are random,
    /// output layers zero.
    pub fn new(dim: usize, shape: &FlowShape, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!("a coupling flow needs dimension >= 2, got {dim}")));
        }
        if shape.layers == 0 {
            return Err(Error::InvalidArgument("a flow needs at least one coupling layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let split = dim / 2;
        let layers = (0..shape.layers)
            .map(|k| {
                let swapped = k % 2 == 1;
                let (pl, tl) = if swapped { (dim - split, split) } else { (split, dim - split) };
                CouplingLayer {
                    dim,
                    split,
                    swapped,
                    s_net: Mlp::new(pl, &shape.hidden, tl, &mut rng),
                    t_net: Mlp::new(pl, &shape.hidden, tl, &mut rng),
                }
            })
            .collect();
        Ok(Self {
            dim,
            shift: DVector::zeros(dim),
            scale: DVector::from_element(dim, 1.0),
            layers,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shift(&self) -> &DVector<f64> {
        &self.shift
    }

    pub fn scale(&self) -> &DVector<f64> {
        &self.scale
    }

    pub fn set_standardization(&mut self, shift: DVector<f64>, scale: DVector<f64>) -> Result<()> {
        if shift.len() != self.dim || scale.len() != self.dim {
            return Err(Error::Dimension("standardization length differs from flow dimension".into()));
        }
        if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) || shift.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("standardization needs finite shifts and positive scales".into()));
        }
        self.shift = shift;
        self.scale = scale;
        Ok(())
    }

    /// Per-dimension mean and standard deviation of `data` (`D × n`).
    ///
    /// Each scale is floored at `STD_FLOOR` times the largest one, so a
    /// nearly constant coordinate stays nearly constant instead of having
    /// its rounding noise blown up to unit variance.
    pub fn fit_standardization(&mut self, data: &DMatrix<f64>) -> Result<()> {
        self.check_rows(data)?;
        let n = data.ncols() as f64;
        let mean = data.column_mean();
        let std = DVector::from_fn(self.dim, |r, _| {
            (data.row(r).iter().map(|x| (x - mean[r]).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
        });
        let floor = STD_FLOOR * std.max();
        let std = if floor > 0.0 { std.map(|s| s.max(floor)) } else { DVector::from_element(self.dim, 1.0) };
        self.set_standardization(mean, std)
    }

    /// Constant log-det of the standardization.
    pub fn standardization_logdet(&self) -> f64 {
        -self.scale.iter().map(|s| s.ln()).sum::<f64>()
    }

    pub(crate) fn standardize(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = w.clone();
        for mut c in x.column_iter_mut() {
            c -= &self.shift;
            c.component_div_assign(&self.scale);
        }
        x
    }

    fn check_rows(&self, m: &DMatrix<f64>) -> Result<()> {
        if m.nrows() != self.dim {
            return Err(Error::Dimension(format!("input has dimension {}, flow {}", m.nrows(), self.dim)));
        }
        Ok(())
    }

    fn check_finite(m: &DMatrix<f64>, stage: &str) -> Result<()> {
        if m.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("non-finite values after {stage}")))
        }
    }

    /// `z = f(w)` column by column, with per-column log-det.
    pub fn forward_batch(&self, w: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
        self.check_rows(w)?;
        Self::check_finite(w, "input")?;
        let mut x = self.standardize(w);
        let mut logdet = DVector::from_element(w.ncols(), self.standardization_logdet());
        for (k, layer) in self.layers.iter().enumerate() {
            let (y, ld) = layer.forward_batch(&x);
            Self::check_finite(&y, &format!("coupling layer {k}"))?;
            logdet += ld;
            x = y;
        }
        Ok((x, logdet))
    }

    pub fn inverse_batch(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(z)?;
        Self::check_finite(z, "input")?;
        let mut x = z.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            x = layer.inverse_batch(&x);
            Self::check_finite(&x, &format!("inverse coupling layer {k}"))?;
        }
        for mut c in x.column_iter_mut() {
            c.component_mul_assign(&self.scale);
            c += &self.shift;
        }
        Ok(x)
    }

    pub fn forward(&self, w: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        let (z, ld) = self.forward_batch(&column(w))?;
        Ok((z.column(0).into_owned(), ld[0]))
    }

    pub fn inverse(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.inverse_batch(&column(z))?.column(0).into_owned())
    }

    /// `0.5‖z‖² + 0.5·D·ln 2π − log|det J|`.
    pub fn nll(&self, w: &DVector<f64>) -> Result<f64> {
        let (z, ld) = self.forward(w)?;
        Ok(gaussian_nll(&z, ld))
    }

    pub fn nll_batch(&self, w: &DMatrix<f64>) -> Result<DVector<f64>> {
        let (z, ld) = self.forward_batch(w)?;
        Ok(DVector::from_fn(w.ncols(), |c, _| gaussian_nll(&z.column(c).into_owned(), ld[c])))
    }

    /// Dense per-layer Jacobians at `w`, standardization first.
    pub fn layer_jacobians(&self, w: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
        self.check_rows(&column(w))?;
        let mut out = vec![DMatrix::from_diagonal(&self.scale.map(|s| 1.0 / s))];
        let mut x = self.standardize(&column(w)).column(0).into_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let (y, j) = layer.forward_jacobian(&x);
            if !y.iter().chain(j.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("non-finite values after coupling layer {k}")));
            }
            out.push(j);
            x = y;
        }
        Ok(out)
    }

    /// Composed Jacobian `∂z/∂w`.
    pub fn jacobian(&self, w: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut j = DMatrix::identity(self.dim, self.dim);
        for l in self.layer_jacobians(w)? {
            j = l * j;
        }
        Ok(j)
    }

    pub fn jacobian_frobenius(&self, w: &DVector<f64>) -> Result<f64> {
        Ok(self.jacobian(w)?.norm())
    }

    /// Sum of per-layer Jacobian Frobenius norms, standardization included.
    pub fn layer_frobenius_sum(&self, w: &DVector<f64>) -> Result<f64> {
        Ok(self.layer_jacobians(w)?.iter().map(|j| j.norm()).sum())
    }

    /// `count` draws `w = f⁻¹(z)`, `z ~ N(0, I)`, one per column.
    pub fn sample(&self, count: usize, seed: u64) -> Result<DMatrix<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(self.dim, count, |_, _| StandardNormal.sample(&mut rng));
        self.inverse_batch(&z)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.s_net.param_count() + l.t_net.param_count()).sum()
    }

    /// Trainable parameters: per layer, `s` then `t`, each weight then bias
    /// per dense layer, matrices column-major.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            l.s_net.write_params(&mut out);
            l.t_net.write_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "{} parameters given, flow has {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.s_net.read_params(&mut it);
            l.t_net.read_params(&mut it);
        }
        Ok(())
    }

    /// Adds uniform noise in `[-amplitude, amplitude]` to every parameter.
    pub fn perturb(&mut self, amplitude: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new_inclusive(-amplitude, amplitude).expect("finite amplitude");
        let p: Vec<f64> = self.params().iter().map(|p| p + u.sample(&mut rng)).collect();
        self.set_params(&p).expect("same length");
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.usize(self.dim);
        w.usize(self.layers.len());
        w.f64s(self.shift.as_slice());
        w.f64s(self.scale.as_slice());
        for l in &self.layers {
            w.usize(l.split);
            w.u32(u32::from(l.swapped));
            for net in [&l.s_net, &l.t_net] {
                w.usize(net.layers.len());
                for d in &net.layers {
                    w.usize(d.weight.nrows());
                    w.usize(d.weight.ncols());
                    w.f64s(d.weight.as_slice());
                    w.f64s(d.bias.as_slice());
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, MAGIC, VERSION, "flow")?;
        let dim = r.usize()?;
        let n_layers = r.usize()?;
        let shift = DVector::from_vec(r.f64s_exact(dim, "shift")?);
        let scale = DVector::from_vec(r.f64s_exact(dim, "scale")?);
        let mut layers = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            let split = r.usize()?;
            let swapped = r.u32()? != 0;
            if split == 0 || split >= dim {
                return Err(Error::Format(format!("coupling split {split} invalid for dimension {dim}")));
            }
            let mut nets = Vec::with_capacity(2);
            for _ in 0..2 {
                let n = r.usize()?;
                let mut dense = Vec::with_capacity(n.min(64));
                for _ in 0..n {
                    let rows = r.usize()?;
                    let cols = r.usize()?;
                    let weight = DMatrix::from_vec(rows, cols, r.f64s_exact(rows * cols, "weight")?);
                    let bias = DVector::from_vec(r.f64s_exact(rows, "bias")?);
                    dense.push(super::net::Dense { weight, bias });
                }
                nets.push(Mlp { layers: dense });
            }
            let t_net = nets.pop().unwrap();
            let s_net = nets.pop().unwrap();
            let layer = CouplingLayer {
                dim,
                split,
                swapped,
                s_net,
                t_net,
            };
            let (_, pl) = layer.pass_block();
            let (_, tl) = layer.transformed_block();
            for net in [&layer.s_net, &layer.t_net] {
                let chained = net.layers.windows(2).all(|w| w[0].weight.nrows() == w[1].weight.ncols());
                if net.layers.is_empty() || !chained || net.input_dim() != pl || net.output_dim() != tl {
                    return Err(Error::Format("coupling network shapes do not match the mask".into()));
                }
            }
            layers.push(layer);
        }
        r.finish()?;
        let mut flow = Self {
            dim,
            shift: DVector::zeros(dim),
            scale: DVector::from_element(dim, 1.0),
            layers,
        };
        flow.set_standardization(shift, scale)
            .map_err(|e| Error::Format(format!("flow standardization: {e}")))?;
        Ok(flow)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn gaussian_nll(z: &DVector<f64>, logdet: f64) -> f64 {
    0.5 * z.norm_squared() + 0.5 * z.len() as f64 * LN_2PI - logdet
}

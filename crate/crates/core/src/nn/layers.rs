use std::sync::Arc;

use rand::Rng;

use crate::linalg::Matrix;
use crate::nn::conv::{conv_apply, conv_apply_backward, Rulebook};
use crate::nn::params::{GradientSet, ParamId, ParameterSet};
use crate::voxel::SparseTensor;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running stats updated by the caller.
    Train,
    /// Running statistics; no state changes.
    Eval,
}

// ---------------------------------------------------------------- batch norm

#[derive(Debug)]
pub struct BnTape<T> {
    xhat: Matrix<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
    mode: Mode,
}

/// Batch mean and unbiased variance observed in a train-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Per-channel normalization over active sites followed by `γ·x̂ + β`.
pub fn batch_norm_forward<T: Scalar>(
    x: &Matrix<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
    mode: Mode,
) -> Result<(Matrix<T>, BnTape<T>, Option<BnStats<T>>)> {
    let c = x.cols();
    if [gamma.len(), beta.len(), running_mean.len(), running_var.len()] != [c; 4] {
        return Err(Error::ChannelMismatch {
            expected: c,
            got: gamma.len(),
        });
    }
    let n = x.rows();
    let (mean, var, stats) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::DegenerateBatch(n));
            }
            let nt = T::from_usize_lossy(n);
            let mut mean = vec![T::zero(); c];
            for row in x.iter_rows() {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nt);
            let mut var = vec![T::zero(); c];
            for row in x.iter_rows() {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - m;
                    *s += d * d;
                }
            }
            let unbiased = var.iter().map(|&s| s / (nt - T::one())).collect();
            var.iter_mut().for_each(|s| *s /= nt);
            let stats = BnStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        }
        Mode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Matrix::zeros(n, c);
    let mut y = Matrix::zeros(n, c);
    for r in 0..n {
        let xr = x.row(r);
        let hr = xhat.row_mut(r);
        for k in 0..c {
            hr[k] = (xr[k] - mean[k]) * inv_std[k];
        }
        let yr = y.row_mut(r);
        for k in 0..c {
            yr[k] = gamma[k] * xhat.get(r, k) + beta[k];
        }
    }
    let tape = BnTape {
        xhat,
        inv_std,
        gamma: gamma.to_vec(),
        mode,
    };
    Ok((y, tape, stats))
}

/// Returns `(dx, dγ, dβ)`.
pub fn batch_norm_backward<T: Scalar>(tape: BnTape<T>, dy: &Matrix<T>) -> (Matrix<T>, Vec<T>, Vec<T>) {
    let (n, c) = (dy.rows(), dy.cols());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for r in 0..n {
        let g = dy.row(r);
        let h = tape.xhat.row(r);
        for k in 0..c {
            dbeta[k] += g[k];
            dgamma[k] += g[k] * h[k];
        }
    }
    let mut dx = Matrix::zeros(n, c);
    match tape.mode {
        Mode::Train => {
            let nt = T::from_usize_lossy(n);
            for r in 0..n {
                let g = dy.row(r);
                let h = tape.xhat.row(r);
                let out = dx.row_mut(r);
                for k in 0..c {
                    let scale = tape.gamma[k] * tape.inv_std[k] / nt;
                    out[k] = scale * (nt * g[k] - dbeta[k] - h[k] * dgamma[k]);
                }
            }
        }
        Mode::Eval => {
            for r in 0..n {
                let g = dy.row(r);
                let out = dx.row_mut(r);
                for k in 0..c {
                    out[k] = g[k] * tape.gamma[k] * tape.inv_std[k];
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------- relu

pub fn relu_forward<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient passes where the forward output was positive.
pub fn relu_backward<T: Scalar>(y: &Matrix<T>, dy: &Matrix<T>) -> Matrix<T> {
    let data = y
        .as_slice()
        .iter()
        .zip(dy.as_slice())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Matrix::from_vec(dy.rows(), dy.cols(), data)
}

// ------------------------------------------------------ parameterized layers

/// Records `(name, dims)` in registration order and hands out ids.
#[derive(Debug, Default, Clone)]
pub(crate) struct Layout {
    pub entries: Vec<(String, Vec<usize>)>,
}

impl Layout {
    fn add(&mut self, name: String, dims: Vec<usize>) -> ParamId {
        self.entries.push((name, dims));
        ParamId(self.entries.len() - 1)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvLayer {
    pub weight: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvLayer {
    pub fn new(layout: &mut Layout, name: &str, volume: usize, c_in: usize, c_out: usize) -> Self {
        let weight = layout.add(format!("{name}.weight"), vec![volume, c_in, c_out]);
        Self { weight, c_in, c_out }
    }

    pub fn forward<T: Scalar>(&self, params: &ParameterSet<T>, rules: &Rulebook, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.c_in {
            return Err(Error::ChannelMismatch {
                expected: self.c_in,
                got: x.cols(),
            });
        }
        conv_apply(rules, x, params.get(self.weight), self.c_out)
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        rules: &Rulebook,
        x: &Matrix<T>,
        dy: &Matrix<T>,
        grads: &mut GradientSet<T>,
        flip_sign: bool,
    ) -> Matrix<T> {
        let w = params.get(self.weight);
        let dw = grads.get_mut(self.weight);
        let mut din = conv_apply_backward(rules, x, w, dy, dw);
        if flip_sign {
            din.scale(-T::one());
        }
        din
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

/// Running-stat update produced by one train-mode batch norm call.
#[derive(Debug, Clone)]
pub struct StatUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BnStats<T>,
}

impl BnLayer {
    pub fn new(layout: &mut Layout, name: &str, c: usize) -> Self {
        Self {
            gamma: layout.add(format!("{name}.gamma"), vec![c]),
            beta: layout.add(format!("{name}.beta"), vec![c]),
            mean: layout.add(format!("{name}.running_mean"), vec![c]),
            var: layout.add(format!("{name}.running_var"), vec![c]),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        x: &Matrix<T>,
        ctx: &mut FwdCtx<T>,
    ) -> Result<(Matrix<T>, BnTape<T>)> {
        let (y, tape, stats) = batch_norm_forward(
            x,
            params.get(self.gamma),
            params.get(self.beta),
            params.get(self.mean),
            params.get(self.var),
            ctx.eps,
            ctx.mode,
        )?;
        if let Some(stats) = stats {
            ctx.updates.push(StatUpdate {
                mean: self.mean,
                var: self.var,
                stats,
            });
        }
        Ok((y, tape))
    }

    pub fn backward<T: Scalar>(&self, tape: BnTape<T>, dy: &Matrix<T>, grads: &mut GradientSet<T>) -> Matrix<T> {
        let (dx, dg, db) = batch_norm_backward(tape, dy);
        for (a, b) in grads.get_mut(self.gamma).iter_mut().zip(&dg) {
            *a += *b;
        }
        for (a, b) in grads.get_mut(self.beta).iter_mut().zip(&db) {
            *a += *b;
        }
        dx
    }
}

/// Shared forward-pass settings and the running-stat updates collected so far.
#[derive(Debug)]
pub(crate) struct FwdCtx<T> {
    pub eps: T,
    pub mode: Mode,
    pub updates: Vec<StatUpdate<T>>,
}

/// Conv → BN → ReLU with its cached activations.
#[derive(Debug)]
pub(crate) struct CbrTape<T> {
    input: Matrix<T>,
    bn: BnTape<T>,
    output: Matrix<T>,
}

impl<T: Scalar> CbrTape<T> {
    pub fn output(&self) -> &Matrix<T> {
        &self.output
    }
}

pub(crate) fn cbr_forward<T: Scalar>(
    conv: &ConvLayer,
    bn: &BnLayer,
    params: &ParameterSet<T>,
    rules: &Rulebook,
    x: &Matrix<T>,
    ctx: &mut FwdCtx<T>,
) -> Result<CbrTape<T>> {
    let h = conv.forward(params, rules, x)?;
    let (b, bn_tape) = bn.forward(params, &h, ctx)?;
    Ok(CbrTape {
        input: x.clone(),
        bn: bn_tape,
        output: relu_forward(&b),
    })
}

pub(crate) fn cbr_backward<T: Scalar>(
    conv: &ConvLayer,
    bn: &BnLayer,
    params: &ParameterSet<T>,
    rules: &Rulebook,
    tape: CbrTape<T>,
    dy: &Matrix<T>,
    grads: &mut GradientSet<T>,
    faults: Faults,
) -> Matrix<T> {
    let db = relu_backward(&tape.output, dy);
    let dh = bn.backward(tape.bn, &db, grads);
    conv.backward(params, rules, &tape.input, &dh, grads, faults.flip_conv_backward)
}

/// Deliberate defects injected into backward passes, for checking that the
/// gradient verification actually detects broken adjoints.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Faults {
    pub flip_conv_backward: bool,
}

// ------------------------------------------------------------ residual block

/// `ReLU(BN(Conv(ReLU(BN(Conv(x))))) + shortcut(x))`; the shortcut is the
/// identity when channel counts match and a pointwise convolution otherwise.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub(crate) conv1: ConvLayer,
    pub(crate) bn1: BnLayer,
    pub(crate) conv2: ConvLayer,
    pub(crate) bn2: BnLayer,
    pub(crate) shortcut: Option<ConvLayer>,
}

#[derive(Debug)]
pub struct BlockTape<T> {
    input: Matrix<T>,
    first: CbrTape<T>,
    bn2: BnTape<T>,
    pub(crate) output: Matrix<T>,
}

/// Rulebooks for one resolution level: the `K³` neighborhood and the
/// pointwise identity used by `1³` convolutions.
#[derive(Debug, Clone)]
pub struct LevelRules {
    pub neighborhood: Arc<Rulebook>,
    pub pointwise: Arc<Rulebook>,
}

impl LevelRules {
    pub fn new(coords: &crate::voxel::CoordMap, kernel_size: usize) -> Result<Self> {
        let offsets = crate::nn::conv::kernel_offsets(kernel_size)?;
        Ok(Self {
            neighborhood: Arc::new(Rulebook::submanifold(coords, &offsets)),
            pointwise: Arc::new(Rulebook::submanifold(coords, &[[0, 0, 0]])),
        })
    }
}

impl ResidualBlock {
    pub(crate) fn new(layout: &mut Layout, name: &str, volume: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            conv1: ConvLayer::new(layout, &format!("{name}.conv1"), volume, c_in, c_out),
            bn1: BnLayer::new(layout, &format!("{name}.bn1"), c_out),
            conv2: ConvLayer::new(layout, &format!("{name}.conv2"), volume, c_out, c_out),
            bn2: BnLayer::new(layout, &format!("{name}.bn2"), c_out),
            shortcut: (c_in != c_out).then(|| ConvLayer::new(layout, &format!("{name}.shortcut"), 1, c_in, c_out)),
        }
    }

    pub(crate) fn forward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        rules: &LevelRules,
        x: &Matrix<T>,
        ctx: &mut FwdCtx<T>,
    ) -> Result<BlockTape<T>> {
        let first = cbr_forward(&self.conv1, &self.bn1, params, &rules.neighborhood, x, ctx)?;
        let h2 = self.conv2.forward(params, &rules.neighborhood, first.output())?;
        let (mut z, bn2) = self.bn2.forward(params, &h2, ctx)?;
        match &self.shortcut {
            Some(sc) => z.add_assign(&sc.forward(params, &rules.pointwise, x)?),
            None => z.add_assign(x),
        }
        Ok(BlockTape {
            input: x.clone(),
            first,
            bn2,
            output: relu_forward(&z),
        })
    }

    pub(crate) fn backward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        rules: &LevelRules,
        tape: BlockTape<T>,
        dy: &Matrix<T>,
        grads: &mut GradientSet<T>,
        faults: Faults,
    ) -> Matrix<T> {
        let dz = relu_backward(&tape.output, dy);
        let mut dx = match &self.shortcut {
            Some(sc) => sc.backward(params, &rules.pointwise, &tape.input, &dz, grads, faults.flip_conv_backward),
            None => dz.clone(),
        };
        let dh2 = self.bn2.backward(tape.bn2, &dz, grads);
        let dr1 = self.conv2.backward(
            params,
            &rules.neighborhood,
            tape.first.output(),
            &dh2,
            grads,
            faults.flip_conv_backward,
        );
        let d_first = cbr_backward(&self.conv1, &self.bn1, params, &rules.neighborhood, tape.first, &dr1, grads, faults);
        dx.add_assign(&d_first);
        dx
    }
}

/// Standalone residual block with its own parameter registry, for use and
/// testing outside the U-Net.
#[derive(Debug, Clone)]
pub struct StandaloneBlock {
    pub block: ResidualBlock,
    pub kernel_size: usize,
    pub eps: f64,
}

impl StandaloneBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel_size: usize,
        rng: &mut R,
    ) -> Result<(Self, ParameterSet<T>)> {
        let volume = crate::nn::conv::kernel_offsets(kernel_size)?.len();
        let mut layout = Layout::default();
        let block = ResidualBlock::new(&mut layout, "block", volume, c_in, c_out);
        let params = crate::nn::unet::materialize(&layout, rng)?;
        Ok((
            Self {
                block,
                kernel_size,
                eps: 1e-5,
            },
            params,
        ))
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        x: &SparseTensor<T>,
        mode: Mode,
    ) -> Result<(SparseTensor<T>, BlockTape<T>, LevelRules, Vec<StatUpdate<T>>)> {
        let rules = LevelRules::new(&x.coords, self.kernel_size)?;
        let mut ctx = FwdCtx {
            eps: T::lit(self.eps),
            mode,
            updates: Vec::new(),
        };
        let tape = self.block.forward(params, &rules, &x.features, &mut ctx)?;
        let out = SparseTensor::new(x.coords.clone(), tape.output.clone())?;
        Ok((out, tape, rules, ctx.updates))
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        rules: &LevelRules,
        tape: BlockTape<T>,
        dy: &Matrix<T>,
    ) -> (Matrix<T>, GradientSet<T>) {
        self.backward_with_faults(params, rules, tape, dy, Faults::default())
    }

    pub fn backward_with_faults<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        rules: &LevelRules,
        tape: BlockTape<T>,
        dy: &Matrix<T>,
        faults: Faults,
    ) -> (Matrix<T>, GradientSet<T>) {
        let mut grads = GradientSet::zeros_like(params);
        let dx = self.block.backward(params, rules, tape, dy, &mut grads, faults);
        (dx, grads)
    }

    pub fn conv_weight_ids(&self) -> Vec<ParamId> {
        let b = &self.block;
        let mut ids = vec![b.conv1.weight, b.conv2.weight];
        ids.extend(b.shortcut.as_ref().map(|s| s.weight));
        ids
    }
}

//! Self-checks runnable from a built binary: central finite differences
//! against every analytic backward pass, and brute-force oracles for the
//! geometric and loss kernels.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{compute_correspondences, compute_overlap};
use crate::geometry::{brute_force_nearest, NeighborIndex, PointCloud};
use crate::linalg::{dist2, Matrix};
use crate::loss::{hardest_contrastive, point_info_nce, LossConfig, LossVariant, MatchBatch, NegativePool};
use crate::nn::{
    batch_norm_backward, batch_norm_forward, kernel_offsets, relu_backward, relu_forward, sparse_conv_backward,
    sparse_conv_forward, transpose_conv_backward, transpose_conv_forward, ConvKernel, Faults, GradientSet, Mode,
    ParameterSet, StandaloneBlock, UNet, UNetConfig,
};
use crate::train::{poly_lr, sgd_step, OptimizerState, TrainConfig};
use crate::voxel::{CoordMap, SparseTensor, VoxelCoord};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Oracles,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradcheck" => Ok(Self::Gradcheck),
            "oracles" => Ok(Self::Oracles),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!("unknown suite {other:?} (gradcheck, oracles, all)"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Randomized instances per gradient check.
    pub instances: usize,
    pub faults: Faults,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            faults: Faults::default(),
        }
    }
}

/// Outcome of one named check: the worst error seen against its tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub millis: u128,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<30} worst {:.3e} (tol {:.0e}, {} instances, {} ms)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.instances,
            self.millis
        )
    }
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    if matches!(suite, Suite::Gradcheck | Suite::All) {
        checks.extend(gradcheck_suite(opts)?);
    }
    if matches!(suite, Suite::Oracles | Suite::All) {
        checks.extend(oracle_suite(opts)?);
    }
    Ok(checks)
}

fn timed(
    name: &'static str,
    tolerance: f64,
    instances: usize,
    mut body: impl FnMut(usize) -> Result<f64>,
) -> Result<Check> {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for k in 0..instances {
        let e = body(k)?;
        // NaN must fail the check.
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
    }
    Ok(Check {
        name,
        instances,
        worst,
        tolerance,
        millis: start.elapsed().as_millis(),
    })
}

// ------------------------------------------------------------ finite differences

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x` along the coordinates in `idx`.
pub fn central_differences(x: &mut [f64], idx: &[usize], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    idx.iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + h;
            let fp = f(x);
            x[i] = orig - h;
            let fm = f(x);
            x[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn subset<R: Rng>(n: usize, max: usize, rng: &mut R) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut v = rand::seq::index::sample(rng, n, max).into_vec();
        v.sort_unstable();
        v
    }
}

fn pick(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

fn random_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Up to `n` distinct voxels in a cube of side `side`.
pub fn random_coords<R: Rng>(n: usize, side: i32, rng: &mut R) -> CoordMap {
    let mut map = CoordMap::with_capacity(n);
    for _ in 0..n {
        let c: VoxelCoord = [0; 3].map(|_| rng.random_range(0..side));
        map.insert(c);
    }
    map
}

fn weighted_sum(m: &Matrix<f64>, r: &Matrix<f64>) -> f64 {
    m.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum()
}

fn flip_if(mut m: Matrix<f64>, flip: bool) -> Matrix<f64> {
    if flip {
        m.scale(-1.0);
    }
    m
}

const H: f64 = 1e-6;

// ------------------------------------------------------------ gradcheck suite

fn gradcheck_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let n = opts.instances;
    let flip = opts.faults.flip_conv_backward;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();

    out.push(timed("sparse_conv", 1e-4, n, |k| {
        let stride = if k % 2 == 0 { 1 } else { 2 };
        let ksize = if stride == 1 { 3 } else { 2 };
        let (ci, co) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let coords = Arc::new(random_coords(rng.random_range(20..=200), 7, &mut rng));
        let x = random_matrix(coords.len(), ci, 1.0, &mut rng);
        let mut kernel = ConvKernel::zeros(ksize, ci, co)?;
        kernel.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let input = SparseTensor::new(coords.clone(), x.clone())?;
        let (y, tape) = sparse_conv_forward(&input, &kernel, stride)?;
        let r = random_matrix(y.len(), co, 1.0, &mut rng);
        let (dx, dk) = sparse_conv_backward(tape, &r)?;
        let dx = flip_if(dx, flip);
        let f = |xs: &[f64], ks: &[f64]| -> f64 {
            let t = SparseTensor::new(coords.clone(), Matrix::from_vec(x.rows(), ci, xs.to_vec())).expect("shape");
            let kk = ConvKernel {
                data: ks.to_vec(),
                ..kernel.clone()
            };
            weighted_sum(&sparse_conv_forward(&t, &kk, stride).expect("conv").0.features, &r)
        };
        let ix = subset(x.as_slice().len(), 60, &mut rng);
        let ik = subset(kernel.data.len(), 60, &mut rng);
        let mut xs = x.as_slice().to_vec();
        let gx = central_differences(&mut xs, &ix, H, |v| f(v, &kernel.data));
        let mut ks = kernel.data.clone();
        let gk = central_differences(&mut ks, &ik, H, |v| f(x.as_slice(), v));
        Ok(relative_error(&pick(dx.as_slice(), &ix), &gx).max(relative_error(&pick(&dk.data, &ik), &gk)))
    })?);

    out.push(timed("transpose_conv", 1e-4, n, |_| {
        let (ci, co) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let fine = Arc::new(random_coords(rng.random_range(20..=200), 8, &mut rng));
        let coarse = Arc::new(fine.downsample());
        let x = random_matrix(coarse.len(), ci, 1.0, &mut rng);
        let mut kernel = ConvKernel::zeros(2, ci, co)?;
        kernel.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let input = SparseTensor::new(coarse.clone(), x.clone())?;
        let (y, tape) = transpose_conv_forward(&input, &fine, &kernel)?;
        let r = random_matrix(y.len(), co, 1.0, &mut rng);
        let (dx, dk) = transpose_conv_backward(tape, &r)?;
        let dx = flip_if(dx, flip);
        let f = |xs: &[f64], ks: &[f64]| -> f64 {
            let t = SparseTensor::new(coarse.clone(), Matrix::from_vec(x.rows(), ci, xs.to_vec())).expect("shape");
            let kk = ConvKernel {
                data: ks.to_vec(),
                ..kernel.clone()
            };
            weighted_sum(&transpose_conv_forward(&t, &fine, &kk).expect("conv").0.features, &r)
        };
        let ix = subset(x.as_slice().len(), 60, &mut rng);
        let ik = subset(kernel.data.len(), 60, &mut rng);
        let mut xs = x.as_slice().to_vec();
        let gx = central_differences(&mut xs, &ix, H, |v| f(v, &kernel.data));
        let mut ks = kernel.data.clone();
        let gk = central_differences(&mut ks, &ik, H, |v| f(x.as_slice(), v));
        Ok(relative_error(&pick(dx.as_slice(), &ix), &gx).max(relative_error(&pick(&dk.data, &ik), &gk)))
    })?);

    out.push(timed("batch_norm", 1e-4, n, |_| {
        let (rows, c) = (rng.random_range(2..=200), rng.random_range(1..=8));
        let x = random_matrix(rows, c, 2.0, &mut rng);
        let gamma: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let (rm, rv) = (vec![0.0; c], vec![1.0; c]);
        let r = random_matrix(rows, c, 1.0, &mut rng);
        let f = |xs: &[f64], g: &[f64], b: &[f64]| -> f64 {
            let m = Matrix::from_vec(rows, c, xs.to_vec());
            weighted_sum(&batch_norm_forward(&m, g, b, &rm, &rv, 1e-5, Mode::Train).expect("bn").0, &r)
        };
        let (_, tape, _) = batch_norm_forward(&x, &gamma, &beta, &rm, &rv, 1e-5, Mode::Train)?;
        let (dx, dg, db) = batch_norm_backward(tape, &r);
        let ix = subset(rows * c, 60, &mut rng);
        let all_c: Vec<usize> = (0..c).collect();
        let mut xs = x.as_slice().to_vec();
        let gx = central_differences(&mut xs, &ix, H, |v| f(v, &gamma, &beta));
        let mut gs = gamma.clone();
        let gg = central_differences(&mut gs, &all_c, H, |v| f(x.as_slice(), v, &beta));
        let mut bs = beta.clone();
        let gb = central_differences(&mut bs, &all_c, H, |v| f(x.as_slice(), &gamma, v));
        Ok(relative_error(&pick(dx.as_slice(), &ix), &gx)
            .max(relative_error(&dg, &gg))
            .max(relative_error(&db, &gb)))
    })?);

    out.push(timed("relu", 1e-4, n, |_| {
        let (rows, c) = (rng.random_range(1..=200), rng.random_range(1..=8));
        // Keep every input at least 0.05 away from the kink.
        let x = Matrix::from_vec(
            rows,
            c,
            (0..rows * c)
                .map(|_| {
                    let m = rng.random_range(0.05..1.0);
                    if rng.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect(),
        );
        let r = random_matrix(rows, c, 1.0, &mut rng);
        let y = relu_forward(&x);
        let dx = relu_backward(&y, &r);
        let ix = subset(rows * c, 60, &mut rng);
        let mut xs = x.as_slice().to_vec();
        let gx = central_differences(&mut xs, &ix, H, |v| {
            weighted_sum(&relu_forward(&Matrix::from_vec(rows, c, v.to_vec())), &r)
        });
        Ok(relative_error(&pick(dx.as_slice(), &ix), &gx))
    })?);

    out.push(timed("residual_block", 1e-4, n, |k| {
        let ci = rng.random_range(1..=8);
        let co = if k % 2 == 0 { ci } else { rng.random_range(1..=8) };
        let (block, params) = StandaloneBlock::new::<f64, _>(ci, co, 3, &mut rng)?;
        let coords = Arc::new(random_coords(rng.random_range(20..=200), 6, &mut rng));
        let x = random_matrix(coords.len(), ci, 1.0, &mut rng);
        let input = SparseTensor::new(coords.clone(), x.clone())?;
        let (y, tape, rules, _) = block.forward(&params, &input, Mode::Train)?;
        let r = random_matrix(y.len(), co, 1.0, &mut rng);
        let (dx, grads) = block.backward_with_faults(&params, &rules, tape, &r.clone(), opts.faults);
        let f = |p: &ParameterSet<f64>, xs: &[f64]| -> f64 {
            let t = SparseTensor::new(coords.clone(), Matrix::from_vec(x.rows(), ci, xs.to_vec())).expect("shape");
            weighted_sum(&block.forward(p, &t, Mode::Train).expect("block").0.features, &r)
        };
        let ix = subset(x.as_slice().len(), 40, &mut rng);
        let mut xs = x.as_slice().to_vec();
        let gx = central_differences(&mut xs, &ix, H, |v| f(&params, v));
        let (ga, gn) = param_fd(&params, &grads, 60, &mut rng, |p| f(p, x.as_slice()));
        Ok(relative_error(&pick(dx.as_slice(), &ix), &gx).max(relative_error(&ga, &gn)))
    })?);

    out.push(timed("unet_end_to_end", 1e-3, n, |k| {
        let cfg = UNetConfig {
            in_channels: 1 + k % 2,
            levels: 2 + k % 2,
            channels: if k % 2 == 0 { vec![4, 8] } else { vec![4, 6, 8] },
            blocks_per_level: 1,
            kernel_size: 3,
            out_dim: 4,
            ..UNetConfig::default()
        };
        let net = UNet::new(&cfg)?;
        let params = net.init_params::<f64>(rng.random())?;
        let coords = Arc::new(random_coords(rng.random_range(60..=200), 8, &mut rng));
        let x = random_matrix(coords.len(), cfg.in_channels, 1.0, &mut rng);
        let input = SparseTensor::new(coords.clone(), x.clone())?;
        let (y, tape) = net.forward(&params, &input, Mode::Train)?;
        let r = random_matrix(y.len(), cfg.out_dim, 1.0, &mut rng);
        let mut grads = GradientSet::zeros_like(&params);
        let dx = net.backward_with_faults(&params, tape, &r, &mut grads, opts.faults)?;
        let f = |p: &ParameterSet<f64>, xs: &[f64]| -> f64 {
            let t = SparseTensor::new(coords.clone(), Matrix::from_vec(x.rows(), cfg.in_channels, xs.to_vec()))
                .expect("shape");
            weighted_sum(&net.forward(p, &t, Mode::Train).expect("unet").0.features, &r)
        };
        let ix = subset(x.as_slice().len(), 30, &mut rng);
        let mut xs = x.as_slice().to_vec();
        let gx = central_differences(&mut xs, &ix, H, |v| f(&params, v));
        let (ga, gn) = param_fd(&params, &grads, 60, &mut rng, |p| f(p, x.as_slice()));
        Ok(relative_error(&pick(dx.as_slice(), &ix), &gx).max(relative_error(&ga, &gn)))
    })?);

    out.push(timed("point_info_nce", 1e-6, n, |_| {
        let (rows, d) = (rng.random_range(2..=32), rng.random_range(2..=8));
        let f1 = random_matrix(rows, d, 1.0, &mut rng);
        let f2 = random_matrix(rows, d, 1.0, &mut rng);
        let tau = rng.random_range(0.1..1.0);
        let o = point_info_nce(&MatchBatch::new(f1.clone(), f2.clone())?, tau)?;
        let loss = |a: &[f64], b: &[f64]| {
            let batch = MatchBatch::new(Matrix::from_vec(rows, d, a.to_vec()), Matrix::from_vec(rows, d, b.to_vec()))
                .expect("shape");
            point_info_nce(&batch, tau).expect("loss").loss
        };
        let all: Vec<usize> = (0..rows * d).collect();
        let mut a = f1.as_slice().to_vec();
        let g1 = central_differences(&mut a, &all, H, |v| loss(v, f2.as_slice()));
        let mut b = f2.as_slice().to_vec();
        let g2 = central_differences(&mut b, &all, H, |v| loss(f1.as_slice(), v));
        Ok(relative_error(o.grad_f1.as_slice(), &g1).max(relative_error(o.grad_f2.as_slice(), &g2)))
    })?);

    out.push(timed("hardest_contrastive", 1e-5, n, |_| loop {
        if let Some(e) = hardest_instance(&mut rng)? {
            break Ok(e);
        }
    })?);

    Ok(out)
}

/// Analytic vs numeric gradients on a random subset of trainable entries.
fn param_fd<R: Rng>(
    params: &ParameterSet<f64>,
    grads: &GradientSet<f64>,
    max: usize,
    rng: &mut R,
    mut f: impl FnMut(&ParameterSet<f64>) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    let slots: Vec<(usize, usize)> = params
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind.trainable())
        .flat_map(|(i, e)| (0..e.data.len()).map(move |j| (i, j)))
        .collect();
    let chosen = subset(slots.len(), max, rng);
    let mut p = params.clone();
    let mut analytic = Vec::with_capacity(chosen.len());
    let mut numeric = Vec::with_capacity(chosen.len());
    for c in chosen {
        let (i, j) = slots[c];
        analytic.push(grads.by_index(i)[j]);
        let orig = p.entries()[i].data[j];
        p.entries_mut()[i].data[j] = orig + H;
        let fp = f(&p);
        p.entries_mut()[i].data[j] = orig - H;
        let fm = f(&p);
        p.entries_mut()[i].data[j] = orig;
        numeric.push((fp - fm) / (2.0 * H));
    }
    (analytic, numeric)
}

/// One randomized margin-loss instance; `None` if it lands within 1e-2 of a
/// hinge or a mining tie, where the loss is not differentiable.
fn hardest_instance<R: Rng>(rng: &mut R) -> Result<Option<f64>> {
    let (rows, d, pool) = (rng.random_range(1..=12), rng.random_range(2..=6), rng.random_range(0..=12));
    let unit = |m: Matrix<f64>| crate::loss::l2_normalize_rows(&m);
    let f1 = unit(random_matrix(rows, d, 1.0, rng))?;
    let f2 = unit(random_matrix(rows, d, 1.0, rng))?;
    let p1 = unit(random_matrix(pool, d, 1.0, rng))?;
    let p2 = unit(random_matrix(pool, d, 1.0, rng))?;
    let src: Vec<usize> = (0..pool).map(|_| rng.random_range(0..rows + 4)).collect();
    let cfg = LossConfig {
        variant: LossVariant::HardestContrastive,
        m_p: rng.random_range(0.1..0.6),
        m_n: rng.random_range(0.8..1.6),
        ..LossConfig::default()
    };
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let near = |v: f64, m: f64| (v - m).abs() < 1e-2;
    for i in 0..rows {
        if near(dist(f1.row(i), f2.row(i)), cfg.m_p) {
            return Ok(None);
        }
        for (anchor, pool_m) in [(f1.row(i), &p1), (f2.row(i), &p2)] {
            let mut ds: Vec<f64> = (0..pool)
                .filter(|&k| src[k] != i)
                .map(|k| dist(anchor, pool_m.row(k)))
                .collect();
            ds.sort_by(f64::total_cmp);
            if ds.first().is_some_and(|&m| near(m, cfg.m_n)) || (ds.len() > 1 && ds[1] - ds[0] < 1e-2) {
                return Ok(None);
            }
        }
    }
    let batch = MatchBatch::new(f1.clone(), f2.clone())?;
    let pool1 = NegativePool::new(p1.clone(), src.clone())?;
    let pool2 = NegativePool::new(p2.clone(), src.clone())?;
    let o = hardest_contrastive(&batch, &pool1, &pool2, &cfg)?;
    let loss = |a: &[f64], b: &[f64], q1: &[f64], q2: &[f64]| -> f64 {
        let m = |v: &[f64], r| Matrix::from_vec(r, d, v.to_vec());
        let bt = MatchBatch::new(m(a, rows), m(b, rows)).expect("shape");
        let n1 = NegativePool::new(m(q1, pool), src.clone()).expect("pool");
        let n2 = NegativePool::new(m(q2, pool), src.clone()).expect("pool");
        hardest_contrastive(&bt, &n1, &n2, &cfg).expect("loss").loss
    };
    let (a, b, q1, q2) = (f1.as_slice(), f2.as_slice(), p1.as_slice(), p2.as_slice());
    let all = |n: usize| (0..n).collect::<Vec<_>>();
    let g1 = central_differences(&mut a.to_vec(), &all(a.len()), H, |v| loss(v, b, q1, q2));
    let g2 = central_differences(&mut b.to_vec(), &all(b.len()), H, |v| loss(a, v, q1, q2));
    let gq1 = central_differences(&mut q1.to_vec(), &all(q1.len()), H, |v| loss(a, b, v, q2));
    let gq2 = central_differences(&mut q2.to_vec(), &all(q2.len()), H, |v| loss(a, b, q1, v));
    let analytic: Vec<f64> = [
        o.grad_f1.as_slice(),
        o.grad_f2.as_slice(),
        o.grad_pool_for_f1.as_slice(),
        o.grad_pool_for_f2.as_slice(),
    ]
    .concat();
    let numeric = [g1, g2, gq1, gq2].concat();
    Ok(Some(relative_error(&analytic, &numeric)))
}

// ------------------------------------------------------------ oracle suite

/// Direct softmax cross-entropy, computed without the max shift.
fn info_nce_oracle(f1: &Matrix<f64>, f2: &Matrix<f64>, tau: f64) -> f64 {
    let n = f1.rows();
    let mut total = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| crate::linalg::dot(f1.row(i), f2.row(j)) / tau).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        total += -(logits[i].exp() / z).ln();
    }
    total / n as f64
}

/// Dense-grid convolution evaluated at every active site.
fn dense_conv_oracle(coords: &CoordMap, x: &Matrix<f64>, kernel: &ConvKernel<f64>) -> Result<Matrix<f64>> {
    let offsets = kernel_offsets(kernel.kernel_size)?;
    let side = coords.coords().iter().flatten().copied().max().unwrap_or(0) + 1;
    let s = side as usize;
    let idx = |c: &VoxelCoord| (c[0] as usize * s + c[1] as usize) * s + c[2] as usize;
    let mut grid = vec![vec![0.0; kernel.c_in]; s * s * s];
    for (r, c) in coords.coords().iter().enumerate() {
        grid[idx(c)].copy_from_slice(x.row(r));
    }
    let mut out = Matrix::zeros(coords.len(), kernel.c_out);
    for (r, c) in coords.coords().iter().enumerate() {
        for (k, o) in offsets.iter().enumerate() {
            let n = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
            if n.iter().any(|&v| v < 0 || v >= side) {
                continue;
            }
            let v = &grid[idx(&n)];
            for i in 0..kernel.c_in {
                for j in 0..kernel.c_out {
                    let w = kernel.data[(k * kernel.c_in + i) * kernel.c_out + j];
                    out.row_mut(r)[j] += v[i] * w;
                }
            }
        }
    }
    Ok(out)
}

fn random_cloud<R: Rng>(n: usize, extent: f64, rng: &mut R) -> Result<PointCloud<f64>> {
    PointCloud::new((0..n).map(|_| [0; 3].map(|_| rng.random_range(0.0..extent))).collect())
}

fn oracle_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x0AC1E);
    let mut out = Vec::new();

    out.push(timed("info_nce_vs_softmax", 1e-9, 100, |_| {
        let (n, d) = (rng.random_range(1..=64), rng.random_range(1..=16));
        let f1 = random_matrix(n, d, 1.0, &mut rng);
        let f2 = random_matrix(n, d, 1.0, &mut rng);
        let tau = rng.random_range(0.05..1.0);
        let got = point_info_nce(&MatchBatch::new(f1.clone(), f2.clone())?, tau)?.loss;
        Ok((got - info_nce_oracle(&f1, &f2, tau)).abs())
    })?);

    out.push(timed("info_nce_uniform", 1e-9, 1, |_| {
        let f = Matrix::filled(256, 8, 0.25);
        let got = point_info_nce(&MatchBatch::new(f.clone(), f)?, 0.07)?.loss;
        Ok((got - 256f64.ln()).abs())
    })?);

    out.push(timed("hardest_hand_instances", 1e-12, 1, |_| {
        let cfg = LossConfig {
            variant: LossVariant::HardestContrastive,
            ..LossConfig::default()
        };
        let one = MatchBatch::new(Matrix::from_rows(&[vec![0.0f64, 0.0]]), Matrix::from_rows(&[vec![0.5, 0.0]]))?;
        let e = NegativePool::empty(2);
        let a = (hardest_contrastive(&one, &e, &e, &cfg)?.loss - 0.16).abs();
        let f = Matrix::from_rows(&[vec![1.0f64, 0.0], vec![-1.0, 0.0]]);
        let pool = NegativePool::new(f.clone(), vec![0, 1])?;
        let b = hardest_contrastive(&MatchBatch::new(f.clone(), f)?, &pool, &pool, &cfg)?.loss.abs();
        Ok(a.max(b))
    })?);

    out.push(timed("conv_vs_dense_grid", 1e-10, 50, |_| {
        let (ci, co) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let coords = Arc::new(random_coords(rng.random_range(1..=150), 6, &mut rng));
        let x = random_matrix(coords.len(), ci, 1.0, &mut rng);
        let mut kernel = ConvKernel::zeros(3, ci, co)?;
        kernel.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let (y, _) = sparse_conv_forward(&SparseTensor::new(coords.clone(), x.clone())?, &kernel, 1)?;
        Ok(y.features.max_abs_diff(&dense_conv_oracle(&coords, &x, &kernel)?))
    })?);

    out.push(timed("nearest_neighbor_vs_brute", 0.0, 50, |_| {
        let pc = random_cloud(rng.random_range(1..=500), 2.0, &mut rng)?;
        let idx = NeighborIndex::from_cloud(&pc);
        let mut bad = 0.0;
        for _ in 0..50 {
            let q = [0; 3].map(|_| rng.random_range(-0.5..2.5));
            let (i, d) = idx.nearest(&q).expect("non-empty");
            let (bi, bd) = brute_force_nearest(&pc, &q);
            if i != bi || d != bd {
                bad = 1.0;
            }
        }
        Ok(bad)
    })?);

    out.push(timed("correspondences_vs_exhaustive", 0.0, 20, |_| {
        let x1 = random_cloud(rng.random_range(1..=400), 1.0, &mut rng)?;
        let x2 = random_cloud(rng.random_range(1..=400), 1.0, &mut rng)?;
        let radius = rng.random_range(0.01..0.1);
        let mut expect = Vec::new();
        let mut hits1 = 0;
        for (i, p) in x1.points().iter().enumerate() {
            let (j, d) = brute_force_nearest(&x2, p);
            if d <= radius {
                expect.push((i, j));
                hits1 += 1;
            }
        }
        let hits2 = x2
            .points()
            .iter()
            .filter(|q| x1.points().iter().any(|p| dist2(p, q).sqrt() <= radius))
            .count();
        let overlap = (hits1 as f64 / x1.len() as f64).min(hits2 as f64 / x2.len() as f64);
        let ok = compute_correspondences(&x1, &x2, radius).matches() == expect.as_slice()
            && compute_overlap(&x1, &x2, radius) == overlap;
        Ok(if ok { 0.0 } else { 1.0 })
    })?);

    out.push(timed("poly_lr_closed_form", 1e-12, 1000, |_| {
        let cfg = TrainConfig {
            max_iters: rng.random_range(1..=100_000),
            base_lr: rng.random_range(0.01..1.0),
            ..TrainConfig::default()
        };
        let t = rng.random_range(0..=cfg.max_iters);
        let expect = cfg.base_lr * (1.0 - t as f64 / cfg.max_iters as f64).powf(0.9);
        Ok((poly_lr(t, &cfg) - expect).abs())
    })?);

    out.push(timed("sgd_two_step_expansion", 1e-12, 20, |_| {
        let mut params = ParameterSet::new();
        let p0: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        params.register("w.weight", vec![5], p0.clone())?;
        let g: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut grads = GradientSet::zeros_like(&params);
        grads.by_index_mut(0).copy_from_slice(&g);
        let (lr, m) = (rng.random_range(0.01..0.5), rng.random_range(0.0..0.99));
        let mut state = OptimizerState::new(&params);
        sgd_step(&mut params, &grads, &mut state, lr, m, 0.0)?;
        sgd_step(&mut params, &grads, &mut state, lr, m, 0.0)?;
        let err = (0..5)
            .map(|i| (params.entries()[0].data[i] - (p0[i] - lr * g[i] * (2.0 + m))).abs())
            .fold(0.0, f64::max);
        Ok(err)
    })?);

    Ok(out)
}

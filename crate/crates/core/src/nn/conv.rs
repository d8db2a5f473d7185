//! Gather–scatter sparse convolution over voxel coordinate sets.
//!
//! A [`Rulebook`] lists, per kernel offset, the `(input row, output row)`
//! pairs that interact. Forward is `out[o] += in[i] · W[k]` over every pair of
//! offset `k`; the transposed convolution walks the same pairs reversed, which
//! makes it the exact adjoint of the corresponding strided convolution.

use std::sync::Arc;

use crate::linalg::Matrix;
use crate::voxel::{CoordMap, SparseTensor, VoxelCoord};
use crate::{Error, Result, Scalar};

/// Kernel offsets in lexicographic order. Odd sizes are centered at zero;
/// size 2 spans `{0, 1}³`.
pub fn kernel_offsets(kernel_size: usize) -> Result<Vec<VoxelCoord>> {
    let (lo, hi) = match kernel_size {
        0 => return Err(Error::Config("kernel size must be positive".into())),
        2 => (0, 1),
        k if k % 2 == 1 => (-((k as i32 - 1) / 2), (k as i32 - 1) / 2),
        k => return Err(Error::Config(format!("kernel size {k} must be odd or 2"))),
    };
    let mut out = Vec::new();
    for x in lo..=hi {
        for y in lo..=hi {
            for z in lo..=hi {
                out.push([x, y, z]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rulebook {
    pub n_in: usize,
    pub n_out: usize,
    /// One list of `(input row, output row)` per kernel offset.
    pub pairs: Vec<Vec<(u32, u32)>>,
}

impl Rulebook {
    /// Same-resolution convolution: output site `c` reads input `c + o`.
    pub fn submanifold(coords: &CoordMap, offsets: &[VoxelCoord]) -> Self {
        let mut pairs = vec![Vec::new(); offsets.len()];
        for (out_row, c) in coords.coords().iter().enumerate() {
            for (k, o) in offsets.iter().enumerate() {
                let n = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
                if let Some(in_row) = coords.get(&n) {
                    pairs[k].push((in_row as u32, out_row as u32));
                }
            }
        }
        Self {
            n_in: coords.len(),
            n_out: coords.len(),
            pairs,
        }
    }

    /// Stride-2 convolution from `fine` onto `coarse`: output site `q` reads
    /// input `2q + o`.
    pub fn strided(fine: &CoordMap, coarse: &CoordMap, offsets: &[VoxelCoord]) -> Self {
        let mut pairs = vec![Vec::new(); offsets.len()];
        for (out_row, q) in coarse.coords().iter().enumerate() {
            for (k, o) in offsets.iter().enumerate() {
                let n = [2 * q[0] + o[0], 2 * q[1] + o[1], 2 * q[2] + o[2]];
                if let Some(in_row) = fine.get(&n) {
                    pairs[k].push((in_row as u32, out_row as u32));
                }
            }
        }
        Self {
            n_in: fine.len(),
            n_out: coarse.len(),
            pairs,
        }
    }

    /// Rulebook of the adjoint (transposed) operator.
    pub fn transposed(&self) -> Self {
        Self {
            n_in: self.n_out,
            n_out: self.n_in,
            pairs: self
                .pairs
                .iter()
                .map(|p| p.iter().map(|&(i, o)| (o, i)).collect())
                .collect(),
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.pairs.len()
    }
}

/// `out = Σ_k Σ_{(i,o) ∈ pairs[k]} in[i] · W[k]`, with `W` laid out as
/// `[kernel_volume, c_in, c_out]`.
pub fn conv_apply<T: Scalar>(rules: &Rulebook, input: &Matrix<T>, weight: &[T], c_out: usize) -> Result<Matrix<T>> {
    let c_in = input.cols();
    if weight.len() != rules.kernel_volume() * c_in * c_out {
        return Err(Error::ChannelMismatch {
            expected: rules.kernel_volume() * c_in * c_out,
            got: weight.len(),
        });
    }
    if input.rows() != rules.n_in {
        return Err(Error::ChannelMismatch {
            expected: rules.n_in,
            got: input.rows(),
        });
    }
    let mut out = Matrix::zeros(rules.n_out, c_out);
    if c_in == 0 || c_out == 0 {
        return Ok(out);
    }
    for (k, pairs) in rules.pairs.iter().enumerate() {
        let wk = &weight[k * c_in * c_out..(k + 1) * c_in * c_out];
        for &(i, o) in pairs {
            let x = input.row(i as usize);
            let y = out.row_mut(o as usize);
            for (&xa, wrow) in x.iter().zip(wk.chunks_exact(c_out)) {
                if xa == T::zero() {
                    continue;
                }
                for (yb, &w) in y.iter_mut().zip(wrow) {
                    *yb += xa * w;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv_apply`]: returns the input gradient and accumulates the
/// weight gradient into `dweight`.
pub fn conv_apply_backward<T: Scalar>(
    rules: &Rulebook,
    input: &Matrix<T>,
    weight: &[T],
    dout: &Matrix<T>,
    dweight: &mut [T],
) -> Matrix<T> {
    let c_in = input.cols();
    let c_out = dout.cols();
    let mut din = Matrix::zeros(rules.n_in, c_in);
    if c_in == 0 || c_out == 0 {
        return din;
    }
    // Transposed kernel slice, so the input gradient is a sum of scaled rows.
    let mut wt = vec![T::zero(); c_in * c_out];
    for (k, pairs) in rules.pairs.iter().enumerate() {
        let range = k * c_in * c_out..(k + 1) * c_in * c_out;
        let wk = &weight[range.clone()];
        for a in 0..c_in {
            for b in 0..c_out {
                wt[b * c_in + a] = wk[a * c_out + b];
            }
        }
        let dwk = &mut dweight[range];
        for &(i, o) in pairs {
            let g = dout.row(o as usize);
            let dx = din.row_mut(i as usize);
            for (&gb, wrow) in g.iter().zip(wt.chunks_exact(c_in)) {
                if gb == T::zero() {
                    continue;
                }
                for (d, &w) in dx.iter_mut().zip(wrow) {
                    *d += gb * w;
                }
            }
            let x = input.row(i as usize);
            for (&xa, dwrow) in x.iter().zip(dwk.chunks_exact_mut(c_out)) {
                if xa == T::zero() {
                    continue;
                }
                for (dw, &gb) in dwrow.iter_mut().zip(g) {
                    *dw += xa * gb;
                }
            }
        }
    }
    din
}

/// Weight tensor of a single sparse convolution, `[K³ or 8, c_in, c_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T> {
    pub kernel_size: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn zeros(kernel_size: usize, c_in: usize, c_out: usize) -> Result<Self> {
        let vol = kernel_offsets(kernel_size)?.len();
        Ok(Self {
            kernel_size,
            c_in,
            c_out,
            data: vec![T::zero(); vol * c_in * c_out],
        })
    }

    pub fn volume(&self) -> usize {
        self.data.len() / (self.c_in * self.c_out).max(1)
    }

    pub fn tap_mut(&mut self, k: usize) -> &mut [T] {
        let n = self.c_in * self.c_out;
        &mut self.data[k * n..(k + 1) * n]
    }
}

/// Everything [`sparse_conv_backward`] needs; consumed by value.
#[derive(Debug)]
pub struct ConvTape<T> {
    rules: Arc<Rulebook>,
    input: Matrix<T>,
    kernel: ConvKernel<T>,
}

/// Sparse convolution with stride 1 (output sites = input sites) or stride 2
/// (output sites = unique `floor(c / 2)`, reading inputs at `2q + o`).
pub fn sparse_conv_forward<T: Scalar>(
    input: &SparseTensor<T>,
    kernel: &ConvKernel<T>,
    stride: usize,
) -> Result<(SparseTensor<T>, ConvTape<T>)> {
    if input.channels() != kernel.c_in {
        return Err(Error::ChannelMismatch {
            expected: kernel.c_in,
            got: input.channels(),
        });
    }
    let offsets = kernel_offsets(kernel.kernel_size)?;
    let (coords, rules) = match stride {
        1 => {
            if kernel.kernel_size % 2 == 0 {
                return Err(Error::Config("stride-1 convolution needs an odd kernel".into()));
            }
            (input.coords.clone(), Rulebook::submanifold(&input.coords, &offsets))
        }
        2 => {
            let coarse = Arc::new(input.coords.downsample());
            let rules = Rulebook::strided(&input.coords, &coarse, &offsets);
            (coarse, rules)
        }
        s => return Err(Error::Config(format!("unsupported stride {s}"))),
    };
    let rules = Arc::new(rules);
    let out = conv_apply(&rules, &input.features, &kernel.data, kernel.c_out)?;
    let tape = ConvTape {
        rules,
        input: input.features.clone(),
        kernel: kernel.clone(),
    };
    Ok((SparseTensor::new(coords, out)?, tape))
}

/// Returns `(input gradient, kernel gradient)`.
pub fn sparse_conv_backward<T: Scalar>(tape: ConvTape<T>, dout: &Matrix<T>) -> Result<(Matrix<T>, ConvKernel<T>)> {
    if dout.rows() != tape.rules.n_out || dout.cols() != tape.kernel.c_out {
        return Err(Error::ChannelMismatch {
            expected: tape.kernel.c_out,
            got: dout.cols(),
        });
    }
    let mut dk = ConvKernel {
        data: vec![T::zero(); tape.kernel.data.len()],
        ..tape.kernel.clone()
    };
    let din = conv_apply_backward(&tape.rules, &tape.input, &tape.kernel.data, dout, &mut dk.data);
    Ok((din, dk))
}

/// Stride-2 transposed convolution from `coarse` onto the stored `fine`
/// coordinate set it was downsampled from.
pub fn transpose_conv_forward<T: Scalar>(
    coarse: &SparseTensor<T>,
    fine: &Arc<CoordMap>,
    kernel: &ConvKernel<T>,
) -> Result<(SparseTensor<T>, ConvTape<T>)> {
    if coarse.channels() != kernel.c_in {
        return Err(Error::ChannelMismatch {
            expected: kernel.c_in,
            got: coarse.channels(),
        });
    }
    let expected = fine.downsample();
    if expected.len() != coarse.coords.len()
        || expected.coords().iter().any(|c| coarse.coords.get(c).is_none())
    {
        return Err(Error::MissingCoordinateMap(
            "target coordinates were not downsampled onto the input coordinates".into(),
        ));
    }
    let offsets = kernel_offsets(kernel.kernel_size)?;
    let rules = Arc::new(Rulebook::strided(fine, &coarse.coords, &offsets).transposed());
    let out = conv_apply(&rules, &coarse.features, &kernel.data, kernel.c_out)?;
    let tape = ConvTape {
        rules,
        input: coarse.features.clone(),
        kernel: kernel.clone(),
    };
    Ok((SparseTensor::new(fine.clone(), out)?, tape))
}

pub fn transpose_conv_backward<T: Scalar>(
    tape: ConvTape<T>,
    dout: &Matrix<T>,
) -> Result<(Matrix<T>, ConvKernel<T>)> {
    sparse_conv_backward(tape, dout)
}

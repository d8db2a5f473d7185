use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::format_err;
use crate::io::{read_f64, read_u32};
use crate::linalg::Matrix;
use crate::nn::conv::{kernel_offsets, Rulebook};
use crate::nn::layers::{
    cbr_backward, cbr_forward, BlockTape, BnLayer, CbrTape, ConvLayer, Faults, FwdCtx, LevelRules, Layout, Mode,
    ResidualBlock, StatUpdate,
};
use crate::nn::params::{read_checkpoint_magic, write_magic, GradientSet, ParamKind, ParameterSet};
use crate::voxel::{CoordMap, SparseTensor};
use crate::{Error, Result, Scalar};

/// Kernel size of the stride-2 down/up sampling convolutions.
const RESAMPLE_KERNEL: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub levels: usize,
    /// Width of each resolution level, finest first.
    pub channels: Vec<usize>,
    pub blocks_per_level: usize,
    pub kernel_size: usize,
    pub out_dim: usize,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            levels: 3,
            channels: vec![16, 32, 64],
            blocks_per_level: 1,
            kernel_size: 3,
            out_dim: 32,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("network: {m}")));
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.channels.len() != self.levels {
            return bad(format!("{} channel widths for {} levels", self.channels.len(), self.levels));
        }
        if self.channels.iter().chain([&self.in_channels, &self.out_dim]).any(|&c| c == 0) {
            return bad("channel counts must be at least 1".into());
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel_size {} must be odd", self.kernel_size));
        }
        if !(self.bn_epsilon > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("bn_epsilon must be > 0 and bn_momentum in (0, 1]".into());
        }
        Ok(())
    }

    fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        for v in [self.in_channels, self.levels, self.blocks_per_level, self.kernel_size, self.out_dim] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for &c in &self.channels {
            w.write_all(&(c as u32).to_le_bytes())?;
        }
        w.write_all(&self.bn_epsilon.to_le_bytes())?;
        w.write_all(&self.bn_momentum.to_le_bytes())?;
        Ok(())
    }

    fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0usize; 5];
        for v in &mut head {
            *v = read_u32(r)? as usize;
        }
        let [in_channels, levels, blocks_per_level, kernel_size, out_dim] = head;
        if levels > 16 {
            return Err(format_err("checkpoint", format!("implausible level count {levels}")));
        }
        let channels = (0..levels).map(|_| read_u32(r).map(|c| c as usize)).collect::<Result<_>>()?;
        let cfg = Self {
            in_channels,
            levels,
            channels,
            blocks_per_level,
            kernel_size,
            out_dim,
            bn_epsilon: read_f64(r)?,
            bn_momentum: read_f64(r)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
struct EncoderLevel {
    /// Stride-2 conv + BN from the previous level; absent at the finest level.
    down: Option<(ConvLayer, BnLayer)>,
    blocks: Vec<ResidualBlock>,
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    up: ConvLayer,
    up_bn: BnLayer,
    blocks: Vec<ResidualBlock>,
}

/// Sparse residual U-Net producing one `out_dim` feature per input voxel.
///
/// Stem conv → per level: (stride-2 conv, residual blocks) → per level on the
/// way back: (transposed conv, concat with the encoder skip, residual blocks)
/// → pointwise head. Every conv except the head is followed by BN + ReLU.
#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    stem: (ConvLayer, BnLayer),
    encoder: Vec<EncoderLevel>,
    /// `decoder[l]` produces level `l`; there is none for the coarsest level.
    decoder: Vec<DecoderLevel>,
    head: ConvLayer,
    layout: Layout,
}

struct EncTape<T> {
    down: Option<CbrTape<T>>,
    blocks: Vec<BlockTape<T>>,
}

struct DecTape<T> {
    up: CbrTape<T>,
    blocks: Vec<BlockTape<T>>,
    skip_width: usize,
}

/// Cached activations and coordinate maps of one forward pass. Consumed by
/// [`UNet::backward`].
pub struct ForwardTape<T> {
    coords: Vec<Arc<CoordMap>>,
    level_rules: Vec<LevelRules>,
    down_rules: Vec<Arc<Rulebook>>,
    stem: CbrTape<T>,
    encoder: Vec<EncTape<T>>,
    decoder: Vec<Option<DecTape<T>>>,
    head_input: Matrix<T>,
    updates: Vec<StatUpdate<T>>,
}

impl<T: Scalar> ForwardTape<T> {
    /// Running-stat updates collected in train mode (empty in eval mode).
    pub fn stat_updates(&self) -> &[StatUpdate<T>] {
        &self.updates
    }

    /// Coordinate sets per level, finest first.
    pub fn level_coords(&self) -> &[Arc<CoordMap>] {
        &self.coords
    }
}

impl UNet {
    pub fn new(cfg: &UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let vol = kernel_offsets(cfg.kernel_size)?.len();
        let rvol = kernel_offsets(RESAMPLE_KERNEL)?.len();
        let ch = &cfg.channels;
        let mut layout = Layout::default();
        let stem = (
            ConvLayer::new(&mut layout, "stem.conv", vol, cfg.in_channels, ch[0]),
            BnLayer::new(&mut layout, "stem.bn", ch[0]),
        );
        let mut encoder = Vec::new();
        for l in 0..cfg.levels {
            let down = (l > 0).then(|| {
                (
                    ConvLayer::new(&mut layout, &format!("enc{l}.down"), rvol, ch[l - 1], ch[l]),
                    BnLayer::new(&mut layout, &format!("enc{l}.down_bn"), ch[l]),
                )
            });
            let blocks = (0..cfg.blocks_per_level)
                .map(|b| ResidualBlock::new(&mut layout, &format!("enc{l}.block{b}"), vol, ch[l], ch[l]))
                .collect();
            encoder.push(EncoderLevel { down, blocks });
        }
        let mut decoder = Vec::new();
        for l in 0..cfg.levels - 1 {
            let up = ConvLayer::new(&mut layout, &format!("dec{l}.up"), rvol, ch[l + 1], ch[l]);
            let up_bn = BnLayer::new(&mut layout, &format!("dec{l}.up_bn"), ch[l]);
            let blocks = (0..cfg.blocks_per_level.max(1))
                .map(|b| {
                    let c_in = if b == 0 { 2 * ch[l] } else { ch[l] };
                    ResidualBlock::new(&mut layout, &format!("dec{l}.block{b}"), vol, c_in, ch[l])
                })
                .collect();
            decoder.push(DecoderLevel { up, up_bn, blocks });
        }
        let head = ConvLayer::new(&mut layout, "head", 1, ch[0], cfg.out_dim);
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            encoder,
            decoder,
            head,
            layout,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Parameter names and shapes in registration order.
    pub fn parameter_layout(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.layout.entries.iter().map(|(n, d)| (n.as_str(), d.as_slice()))
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParameterSet<T>> {
        materialize(&self.layout, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Checks that `params` has exactly this network's names and shapes.
    pub fn check_params<T: Scalar>(&self, params: &ParameterSet<T>) -> Result<()> {
        if params.len() != self.layout.entries.len() {
            return Err(Error::ParamMismatch(format!(
                "expected {} tensors, found {}",
                self.layout.entries.len(),
                params.len()
            )));
        }
        for ((name, dims), e) in self.layout.entries.iter().zip(params.entries()) {
            if *name != e.name || *dims != e.dims {
                return Err(Error::ParamMismatch(format!(
                    "expected {name} {dims:?}, found {} {:?}",
                    e.name, e.dims
                )));
            }
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        input: &SparseTensor<T>,
        mode: Mode,
    ) -> Result<(SparseTensor<T>, ForwardTape<T>)> {
        self.check_params(params)?;
        if input.channels() != self.cfg.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.cfg.in_channels,
                got: input.channels(),
            });
        }
        let levels = self.cfg.levels;
        let mut coords = vec![input.coords.clone()];
        for l in 1..levels {
            let next = Arc::new(coords[l - 1].downsample());
            coords.push(next);
        }
        let level_rules = coords
            .iter()
            .map(|c| LevelRules::new(c, self.cfg.kernel_size))
            .collect::<Result<Vec<_>>>()?;
        let roff = kernel_offsets(RESAMPLE_KERNEL)?;
        // down_rules[l - 1] maps level l - 1 onto level l
        let down_rules: Vec<_> = (1..levels)
            .map(|l| Arc::new(Rulebook::strided(&coords[l - 1], &coords[l], &roff)))
            .collect();
        let up_rules: Vec<_> = down_rules.iter().map(|r| r.transposed()).collect();

        let mut ctx = FwdCtx {
            eps: T::lit(self.cfg.bn_epsilon),
            mode,
            updates: Vec::new(),
        };
        let stem = cbr_forward(
            &self.stem.0,
            &self.stem.1,
            params,
            &level_rules[0].neighborhood,
            &input.features,
            &mut ctx,
        )?;
        let mut x = stem.output().clone();
        let mut enc_tapes = Vec::with_capacity(levels);
        let mut skips = Vec::with_capacity(levels);
        for (l, level) in self.encoder.iter().enumerate() {
            let down = match &level.down {
                Some((conv, bn)) => {
                    let t = cbr_forward(conv, bn, params, &down_rules[l - 1], &x, &mut ctx)?;
                    x = t.output().clone();
                    Some(t)
                }
                None => None,
            };
            let mut blocks = Vec::with_capacity(level.blocks.len());
            for b in &level.blocks {
                let t = b.forward(params, &level_rules[l], &x, &mut ctx)?;
                x = t.output.clone();
                blocks.push(t);
            }
            skips.push(x.clone());
            enc_tapes.push(EncTape { down, blocks });
        }
        let mut dec_tapes: Vec<Option<DecTape<T>>> = (0..levels).map(|_| None).collect();
        for l in (0..levels - 1).rev() {
            let level = &self.decoder[l];
            let up = cbr_forward(&level.up, &level.up_bn, params, &up_rules[l], &x, &mut ctx)?;
            x = up.output().hconcat(&skips[l]);
            let mut blocks = Vec::with_capacity(level.blocks.len());
            for b in &level.blocks {
                let t = b.forward(params, &level_rules[l], &x, &mut ctx)?;
                x = t.output.clone();
                blocks.push(t);
            }
            dec_tapes[l] = Some(DecTape {
                up,
                blocks,
                skip_width: skips[l].cols(),
            });
        }
        let out = self.head.forward(params, &level_rules[0].pointwise, &x)?;
        if !out.is_finite() {
            return Err(Error::NonFinite("network output"));
        }
        let tape = ForwardTape {
            coords,
            level_rules,
            down_rules,
            stem,
            encoder: enc_tapes,
            decoder: dec_tapes,
            head_input: x,
            updates: ctx.updates,
        };
        Ok((SparseTensor::new(input.coords.clone(), out)?, tape))
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input features.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        tape: ForwardTape<T>,
        dout: &Matrix<T>,
        grads: &mut GradientSet<T>,
    ) -> Result<Matrix<T>> {
        self.backward_with_faults(params, tape, dout, grads, Faults::default())
    }

    pub fn backward_with_faults<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        tape: ForwardTape<T>,
        dout: &Matrix<T>,
        grads: &mut GradientSet<T>,
        faults: Faults,
    ) -> Result<Matrix<T>> {
        if !grads.is_congruent(params) {
            return Err(Error::ParamMismatch("gradient set shape differs from parameters".into()));
        }
        if dout.rows() != tape.coords[0].len() || dout.cols() != self.cfg.out_dim {
            return Err(Error::ChannelMismatch {
                expected: self.cfg.out_dim,
                got: dout.cols(),
            });
        }
        let levels = self.cfg.levels;
        let ForwardTape {
            level_rules,
            down_rules,
            stem,
            encoder: enc_tapes,
            decoder: dec_tapes,
            head_input,
            ..
        } = tape;
        let flip = faults.flip_conv_backward;
        let mut d = self
            .head
            .backward(params, &level_rules[0].pointwise, &head_input, dout, grads, flip);

        let mut dskips: Vec<Option<Matrix<T>>> = (0..levels).map(|_| None).collect();
        for (l, dt) in dec_tapes.into_iter().enumerate() {
            let Some(dt) = dt else { continue };
            let level = &self.decoder[l];
            for (b, bt) in level.blocks.iter().zip(dt.blocks).rev() {
                d = b.backward(params, &level_rules[l], bt, &d, grads, faults);
            }
            let up_width = d.cols() - dt.skip_width;
            let (dup, dskip) = d.hsplit(up_width);
            dskips[l] = Some(dskip);
            let up_rules = down_rules[l].transposed();
            d = cbr_backward(&level.up, &level.up_bn, params, &up_rules, dt.up, &dup, grads, faults);
        }
        // `d` now holds the gradient of the coarsest encoder output.
        for (l, et) in enc_tapes.into_iter().enumerate().rev() {
            if l < levels - 1 {
                let mut total = dskips[l].take().expect("decoder visited every finer level");
                total.add_assign(&d);
                d = total;
            }
            let level = &self.encoder[l];
            for (b, bt) in level.blocks.iter().zip(et.blocks).rev() {
                d = b.backward(params, &level_rules[l], bt, &d, grads, faults);
            }
            if let (Some((conv, bn)), Some(dt)) = (&level.down, et.down) {
                d = cbr_backward(conv, bn, params, &down_rules[l - 1], dt, &d, grads, faults);
            }
        }
        Ok(cbr_backward(
            &self.stem.0,
            &self.stem.1,
            params,
            &level_rules[0].neighborhood,
            stem,
            &d,
            grads,
            faults,
        ))
    }

    /// Writes `"PCCK"`, the config echo and every named tensor.
    pub fn write_checkpoint<T: Scalar, W: Write>(&self, params: &ParameterSet<T>, w: &mut W) -> Result<()> {
        self.check_params(params)?;
        write_magic(w)?;
        self.cfg.write_to(w)?;
        params.write_tensors(w)
    }
}

/// Reads a network checkpoint, validating tensors against the echoed config.
pub fn read_checkpoint<T: Scalar, R: Read>(r: &mut R) -> Result<(UNetConfig, ParameterSet<T>)> {
    read_checkpoint_magic(r)?;
    let cfg = UNetConfig::read_from(r)?;
    let params = ParameterSet::read_tensors(r)?;
    UNet::new(&cfg)?.check_params(&params)?;
    Ok((cfg, params))
}

/// Conv kernels: uniform on `±√(6 / fan_in)` (variance `2 / fan_in`);
/// BN: `γ = 1`, `β = 0`, running mean 0, running variance 1.
pub(crate) fn materialize<T: Scalar, R: Rng + ?Sized>(layout: &Layout, rng: &mut R) -> Result<ParameterSet<T>> {
    let mut params = ParameterSet::new();
    for (name, dims) in &layout.entries {
        let n: usize = dims.iter().product();
        let id = params.register(name.clone(), dims.clone(), vec![T::zero(); n])?;
        let kind = params.entry(id).kind;
        let data = params.get_mut(id);
        match kind {
            ParamKind::ConvKernel => {
                let fan_in = (dims[0] * dims[1]) as f64;
                let bound = (6.0 / fan_in).sqrt();
                for v in data.iter_mut() {
                    *v = T::lit(rng.random_range(-bound..bound));
                }
            }
            ParamKind::BnScale | ParamKind::RunningVar => data.fill(T::one()),
            ParamKind::BnShift | ParamKind::RunningMean => {}
        }
    }
    Ok(params)
}

pub fn init_params<T: Scalar>(cfg: &UNetConfig, seed: u64) -> Result<ParameterSet<T>> {
    UNet::new(cfg)?.init_params(seed)
}

pub fn unet_forward<T: Scalar>(
    input: &SparseTensor<T>,
    params: &ParameterSet<T>,
    cfg: &UNetConfig,
    mode: Mode,
) -> Result<(SparseTensor<T>, ForwardTape<T>)> {
    UNet::new(cfg)?.forward(params, input, mode)
}

/// `running ← (1 − momentum)·running + momentum·batch` for every collected update.
pub fn apply_stat_updates<T: Scalar>(params: &mut ParameterSet<T>, updates: &[StatUpdate<T>], momentum: f64) {
    let m = T::lit(momentum);
    let keep = T::one() - m;
    for u in updates {
        for (r, &b) in params.get_mut(u.mean).iter_mut().zip(&u.stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in params.get_mut(u.var).iter_mut().zip(&u.stats.var) {
            *r = keep * *r + m * b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::CoordMap;

    fn tiny() -> UNetConfig {
        UNetConfig {
            levels: 2,
            channels: vec![4, 8],
            out_dim: 5,
            ..UNetConfig::default()
        }
    }

    fn input(n: i32) -> SparseTensor<f64> {
        let coords: Vec<_> = (0..n).map(|i| [i % 5, (i / 5) % 5, i / 25]).collect();
        let map = Arc::new(CoordMap::from_unique(coords).unwrap());
        SparseTensor::new(map, Matrix::filled(n as usize, 1, 1.0)).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(UNetConfig::default().validate().is_ok());
        let mut c = tiny();
        c.kernel_size = 4;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.channels = vec![4];
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.levels = 0;
        c.channels.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn full_resolution_output() {
        let net = UNet::new(&tiny()).unwrap();
        let params = net.init_params::<f64>(1).unwrap();
        let x = input(40);
        let (y, _) = net.forward(&params, &x, Mode::Train).unwrap();
        assert_eq!(y.coords.coords(), x.coords.coords());
        assert_eq!(y.features.cols(), 5);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = init_params::<f64>(&tiny(), 3).unwrap();
        assert_eq!(a, init_params(&tiny(), 3).unwrap());
        assert_ne!(a, init_params(&tiny(), 4).unwrap());
        for e in a.entries() {
            match e.kind {
                ParamKind::BnScale => assert!(e.data.iter().all(|&v| v == 1.0)),
                ParamKind::BnShift => assert!(e.data.iter().all(|&v| v == 0.0)),
                _ => {}
            }
        }
    }

    #[test]
    fn mismatched_params_rejected() {
        let params = init_params::<f64>(&UNetConfig::default(), 0).unwrap();
        let net = UNet::new(&tiny()).unwrap();
        assert!(matches!(net.forward(&params, &input(10), Mode::Eval), Err(Error::ParamMismatch(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = UNet::new(&tiny()).unwrap();
        let params = net.init_params::<f64>(9).unwrap();
        let mut buf = Vec::new();
        net.write_checkpoint(&params, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"PCCK");
        let (cfg, back) = read_checkpoint::<f64, _>(&mut buf.as_slice()).unwrap();
        assert_eq!(cfg, tiny());
        assert_eq!(back, params);
    }

    #[test]
    fn single_level_network_works() {
        let cfg = UNetConfig {
            levels: 1,
            channels: vec![3],
            out_dim: 2,
            ..UNetConfig::default()
        };
        let net = UNet::new(&cfg).unwrap();
        let params = net.init_params::<f64>(0).unwrap();
        let (y, tape) = net.forward(&params, &input(12), Mode::Train).unwrap();
        let mut g = GradientSet::zeros_like(&params);
        let dx = net.backward(&params, tape, &Matrix::filled(12, 2, 1.0), &mut g).unwrap();
        assert_eq!(y.features.rows(), 12);
        assert_eq!(dx.rows(), 12);
    }
}

//! Architectural building blocks.
//!
//! Each block is a small struct holding the names of its parameters. It is
//! constructed once against a [`Registry`] (which records shapes and
//! initializers) and evaluated any number of times against a [`Ctx`].

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Ctx, Init, Registry, PRELU_INIT};
use crate::tensor::Real;

fn join(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

fn check_channels<T: Real>(op: &'static str, x: &Var<'_, T>, expected: usize) -> Result<[usize; 4]> {
    let dims = x.value().dims4()?;
    if dims[1] != expected {
        return Err(Error::dim(
            op,
            format!("expected {expected} channels, got shape {:?}", x.shape()),
        ));
    }
    Ok(dims)
}

/// Convolution with bias and "same" zero padding (or stride 2 for downsampling).
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: String,
    pub bias: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(reg: &mut Registry, prefix: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self::with_bias(reg, prefix, cin, cout, k, Init::Zeros)
    }

    pub fn with_bias(reg: &mut Registry, prefix: &str, cin: usize, cout: usize, k: usize, bias: Init) -> Self {
        Self::declare(reg, prefix, cin, cout, k, Init::KaimingUniform { fan_in: cin * k * k }, bias)
    }

    /// Output head whose weights start at zero, so its initial output is the bias.
    pub fn head(reg: &mut Registry, prefix: &str, cin: usize, cout: usize, k: usize, bias: Init) -> Self {
        Self::declare(reg, prefix, cin, cout, k, Init::Zeros, bias)
    }

    fn declare(reg: &mut Registry, prefix: &str, cin: usize, cout: usize, k: usize, weight: Init, bias: Init) -> Self {
        let weight = reg.declare(join(prefix, "weight"), vec![cout, cin, k, k], weight);
        let bias = reg.declare(join(prefix, "bias"), vec![cout], bias);
        Conv {
            weight,
            bias,
            cin,
            cout,
            k,
            stride: 1,
        }
    }

    pub fn strided(reg: &mut Registry, prefix: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Conv {
            stride,
            ..Self::new(reg, prefix, cin, cout, k)
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        check_channels("conv", &x, self.cin)?;
        let (w, b) = (ctx.p(&self.weight)?, ctx.p(&self.bias)?);
        if self.stride == 2 {
            x.resample_down(w, Some(b))
        } else {
            x.conv2d(w, Some(b), self.stride, self.k / 2)
        }
    }

    /// Nearest 2x upsampling followed by this convolution.
    pub fn forward_up<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        check_channels("conv", &x, self.cin)?;
        x.resample_up(ctx.p(&self.weight)?, Some(ctx.p(&self.bias)?))
    }
}

/// PReLU with one shared trainable slope.
#[derive(Clone, Debug)]
pub struct PRelu {
    pub slope: String,
}

impl PRelu {
    pub fn new(reg: &mut Registry, prefix: &str) -> Self {
        PRelu {
            slope: reg.declare(join(prefix, "slope"), vec![1], Init::Const(PRELU_INIT)),
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.prelu(ctx.p(&self.slope)?)
    }
}

/// Conv followed by PReLU.
#[derive(Clone, Debug)]
pub struct ConvAct {
    pub conv: Conv,
    pub act: PRelu,
}

impl ConvAct {
    pub fn new(reg: &mut Registry, prefix: &str, cin: usize, cout: usize, k: usize) -> Self {
        ConvAct {
            conv: Conv::new(reg, prefix, cin, cout, k),
            act: PRelu::new(reg, &join(prefix, "act")),
        }
    }

    pub fn strided(reg: &mut Registry, prefix: &str, cin: usize, cout: usize, stride: usize) -> Self {
        ConvAct {
            conv: Conv::strided(reg, prefix, cin, cout, 3, stride),
            act: PRelu::new(reg, &join(prefix, "act")),
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.act.forward(ctx, self.conv.forward(ctx, x)?)
    }
}

/// Two-stage residual refinement `x - res2(res1(x) - x)`, each stage a 3x3 conv + PReLU.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub res1: ConvAct,
    pub res2: ConvAct,
    pub channels: usize,
}

impl ResidualBlock {
    pub fn new(reg: &mut Registry, prefix: &str, channels: usize) -> Self {
        ResidualBlock {
            res1: ConvAct::new(reg, &join(prefix, "res1"), channels, channels, 3),
            res2: ConvAct::new(reg, &join(prefix, "res2"), channels, channels, 3),
            channels,
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        check_channels("residual_block", &x, self.channels)?;
        let r1 = self.res1.forward(ctx, x)?;
        let r2 = self.res2.forward(ctx, r1.sub(x)?)?;
        x.sub(r2)
    }
}

/// Squeeze-excitation gate: per-channel scalars `sigmoid(w2 relu(w1 mean_hw(u)))`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    /// `[C/r, C]`
    pub w1: String,
    /// `[C, C/r]`
    pub w2: String,
    pub channels: usize,
    pub reduced: usize,
}

impl ChannelAttention {
    pub fn new(reg: &mut Registry, prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(format!(
                "{channels} channels not divisible by reduction ratio {reduction}"
            )));
        }
        let reduced = channels / reduction;
        Ok(ChannelAttention {
            w1: reg.declare(
                join(prefix, "w1"),
                vec![reduced, channels],
                Init::KaimingUniform { fan_in: channels },
            ),
            w2: reg.declare(
                join(prefix, "w2"),
                vec![channels, reduced],
                Init::KaimingUniform { fan_in: reduced },
            ),
            channels,
            reduced,
        })
    }

    /// The `[N, C, 1, 1]` attention scalars for feature `u`.
    pub fn scales<'t, T: Real>(&self, ctx: &Ctx<'t, T>, u: Var<'t, T>) -> Result<Var<'t, T>> {
        check_channels("channel_attention", &u, self.channels)?;
        let z = u.global_avg_pool()?;
        let w1 = ctx.p(&self.w1)?.reshape(&[self.reduced, self.channels, 1, 1])?;
        let w2 = ctx.p(&self.w2)?.reshape(&[self.channels, self.reduced, 1, 1])?;
        z.conv2d(w1, None, 1, 0)?.relu()?.conv2d(w2, None, 1, 0)?.sigmoid()
    }

    /// `u_c * s_c` for every channel plane.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, u: Var<'t, T>) -> Result<Var<'t, T>> {
        u.mul(self.scales(ctx, u)?)
    }
}

/// Intermediate values of one residual channel-attention evaluation.
pub struct RcabTrace<'t, T: Real> {
    /// Conv-processed feature.
    pub u: Var<'t, T>,
    pub scales: Var<'t, T>,
    /// Attention-scaled branch.
    pub attended: Var<'t, T>,
    pub out: Var<'t, T>,
}

/// Residual channel attention: `x + u * s` with `u = conv(prelu(conv(x)))`.
#[derive(Clone, Debug)]
pub struct Rcab {
    pub body1: ConvAct,
    pub body2: Conv,
    pub attention: ChannelAttention,
}

impl Rcab {
    pub fn new(reg: &mut Registry, prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        let body1 = ConvAct::new(reg, &join(prefix, "body1"), channels, channels, 3);
        let body2 = Conv::new(reg, &join(prefix, "body2"), channels, channels, 3);
        let attention = ChannelAttention::new(reg, &join(prefix, "ca"), channels, reduction)?;
        Ok(Rcab {
            body1,
            body2,
            attention,
        })
    }

    pub fn trace<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<RcabTrace<'t, T>> {
        let u = self.body2.forward(ctx, self.body1.forward(ctx, x)?)?;
        let scales = self.attention.scales(ctx, u)?;
        let attended = u.mul(scales)?;
        let out = x.add(attended)?;
        Ok(RcabTrace {
            u,
            scales,
            attended,
            out,
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.trace(ctx, x)?.out)
    }
}

/// U-shaped encoder-decoder. Each level halves resolution with a stride-2
/// conv and doubles width; each decoder level upsamples, concatenates the
/// same-resolution encoder feature and fuses with a 3x3 conv.
#[derive(Clone, Debug)]
pub struct EncoderDecoder {
    pub downs: Vec<ConvAct>,
    pub bottleneck: [ConvAct; 2],
    /// Deepest level first.
    pub ups: Vec<(Conv, ConvAct)>,
    pub width: usize,
    pub depth: usize,
}

impl EncoderDecoder {
    pub fn new(reg: &mut Registry, prefix: &str, width: usize, depth: usize) -> Self {
        let level = |l: usize| width << l;
        let downs = (1..=depth)
            .map(|l| ConvAct::strided(reg, &join(prefix, &format!("down{l}")), level(l - 1), level(l), 2))
            .collect();
        let deepest = level(depth);
        let bottleneck = [
            ConvAct::new(reg, &join(prefix, "mid1"), deepest, deepest, 3),
            ConvAct::new(reg, &join(prefix, "mid2"), deepest, deepest, 3),
        ];
        let ups = (1..=depth)
            .rev()
            .map(|l| {
                let up = Conv::new(reg, &join(prefix, &format!("up{l}")), level(l), level(l - 1), 3);
                let fuse = ConvAct::new(
                    reg,
                    &join(prefix, &format!("fuse{l}")),
                    2 * level(l - 1),
                    level(l - 1),
                    3,
                );
                (up, fuse)
            })
            .collect();
        EncoderDecoder {
            downs,
            bottleneck,
            ups,
            width,
            depth,
        }
    }

    /// Runs the block; `skip_gain` multiplies every encoder skip (1 normally, 0 to ablate).
    pub fn forward_with_skips<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>, skip_gain: f64) -> Result<Var<'t, T>> {
        let [_, _, h, w] = check_channels("encoder_decoder", &x, self.width)?;
        let unit = 1usize << self.depth;
        if h % unit != 0 || w % unit != 0 {
            return Err(Error::dim(
                "encoder_decoder",
                format!("extent {h}x{w} not divisible by {unit}"),
            ));
        }
        let mut skips = vec![x];
        let mut cur = x;
        for down in &self.downs {
            cur = down.forward(ctx, cur)?;
            skips.push(cur);
        }
        skips.pop();
        for stage in &self.bottleneck {
            cur = stage.forward(ctx, cur)?;
        }
        for (up, fuse) in &self.ups {
            let skip = skips.pop().expect("one skip per level");
            let skip = if skip_gain == 1.0 { skip } else { skip.affine(skip_gain, 0.0)? };
            let lifted = up.forward_up(ctx, cur)?;
            cur = fuse.forward(ctx, ctx.tape().concat(&[lifted, skip])?)?;
        }
        Ok(cur)
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_with_skips(ctx, x, 1.0)
    }
}

/// Supervised gate closing the first stage: predicts a 3-channel image,
/// derives a sigmoid mask from it and re-weights the features.
#[derive(Clone, Debug)]
pub struct Ssb {
    pub pred: Conv,
    pub mask: Conv,
    pub width: usize,
}

impl Ssb {
    pub fn new(reg: &mut Registry, prefix: &str, width: usize) -> Self {
        Ssb {
            pred: Conv::new(reg, &join(prefix, "pred"), width, 3, 3),
            mask: Conv::new(reg, &join(prefix, "mask"), 3, width, 3),
            width,
        }
    }

    /// Returns `(features * mask + features, aux_pred)`.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, features: Var<'t, T>, image: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        check_channels("ssb", &image, 3)?;
        let aux = self.pred.forward(ctx, features)?.add(image)?;
        let mask = self.mask.forward(ctx, aux)?.sigmoid()?;
        let out = features.mul(mask)?.add(features)?;
        Ok((out, aux))
    }
}

/// Spatial feature transform `Sc * s1 + Sh`, with `Sc`, `Sh` predicted from a condition map.
#[derive(Clone, Debug)]
pub struct Sft {
    pub scale: Conv,
    pub shift: Conv,
}

impl Sft {
    /// The scale head starts with bias 1 so the transform begins near the identity.
    pub fn new(reg: &mut Registry, prefix: &str, cond_channels: usize, channels: usize) -> Self {
        Sft {
            scale: Conv::with_bias(reg, &join(prefix, "scale"), cond_channels, channels, 3, Init::Const(1.0)),
            shift: Conv::new(reg, &join(prefix, "shift"), cond_channels, channels, 3),
        }
    }

    pub fn heads<'t, T: Real>(&self, ctx: &Ctx<'t, T>, condition: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        Ok((self.scale.forward(ctx, condition)?, self.shift.forward(ctx, condition)?))
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, s1: Var<'t, T>, condition: Var<'t, T>) -> Result<Var<'t, T>> {
        let [_, _, h, w] = s1.value().dims4()?;
        let [_, _, ch, cw] = condition.value().dims4()?;
        if (h, w) != (ch, cw) {
            return Err(Error::dim(
                "sft_modulate",
                format!("condition {ch}x{cw} not aligned with features {h}x{w}"),
            ));
        }
        let (sc, sh) = self.heads(ctx, condition)?;
        sc.mul(s1)?.add(sh)
    }
}

/// Independent conv/ReLU stacks for the R, G and B planes; outputs are concatenated `[R | G | B]`.
#[derive(Clone, Debug)]
pub struct DetailEnhance {
    pub branches: [(Conv, Conv); 3],
    pub per_channel: usize,
}

impl DetailEnhance {
    pub fn new(reg: &mut Registry, prefix: &str, per_channel: usize) -> Self {
        let branch = |reg: &mut Registry, tag: &str| {
            (
                Conv::new(reg, &join(prefix, &format!("{tag}1")), 1, per_channel, 3),
                Conv::new(reg, &join(prefix, &format!("{tag}2")), per_channel, per_channel, 3),
            )
        };
        DetailEnhance {
            branches: [branch(reg, "r"), branch(reg, "g"), branch(reg, "b")],
            per_channel,
        }
    }

    pub fn out_channels(&self) -> usize {
        3 * self.per_channel
    }

    pub fn branch<'t, T: Real>(&self, ctx: &Ctx<'t, T>, plane: Var<'t, T>, index: usize) -> Result<Var<'t, T>> {
        let (c1, c2) = &self.branches[index];
        c2.forward(ctx, c1.forward(ctx, plane)?.relu()?)?.relu()
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, xa: Var<'t, T>) -> Result<Var<'t, T>> {
        check_channels("detail_enhance", &xa, 3)?;
        let outs = (0..3)
            .map(|c| self.branch(ctx, xa.slice_channels(c, 1)?, c))
            .collect::<Result<Vec<_>>>()?;
        ctx.tape().concat(&outs)
    }
}

/// Conv, instance norm, PReLU.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv,
    pub gamma: String,
    pub beta: String,
    pub act: PRelu,
}

impl ConvNormAct {
    pub fn new(reg: &mut Registry, prefix: &str, cin: usize, cout: usize) -> Self {
        ConvNormAct {
            conv: Conv::new(reg, prefix, cin, cout, 3),
            gamma: reg.declare(join(prefix, "norm.gamma"), vec![cout], Init::Const(1.0)),
            beta: reg.declare(join(prefix, "norm.beta"), vec![cout], Init::Zeros),
            act: PRelu::new(reg, &join(prefix, "act")),
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.conv.forward(ctx, x)?;
        let y = y.instance_norm(ctx.p(&self.gamma)?, ctx.p(&self.beta)?)?;
        self.act.forward(ctx, y)
    }
}

/// Per-channel illumination estimate and Retinex division `x_A / L`.
#[derive(Clone, Debug)]
pub struct ColorCorrect {
    pub stack: [ConvNormAct; 3],
    pub residual: [ResidualBlock; 2],
    pub head: Conv,
    pub floor: f64,
}

impl ColorCorrect {
    pub fn new(reg: &mut Registry, prefix: &str, cin: usize, mid: usize, floor: f64) -> Self {
        ColorCorrect {
            stack: [
                ConvNormAct::new(reg, &join(prefix, "cna1"), cin, mid),
                ConvNormAct::new(reg, &join(prefix, "cna2"), mid, mid),
                ConvNormAct::new(reg, &join(prefix, "cna3"), mid, mid),
            ],
            residual: [
                ResidualBlock::new(reg, &join(prefix, "rb1"), mid),
                ResidualBlock::new(reg, &join(prefix, "rb2"), mid),
            ],
            head: Conv::new(reg, &join(prefix, "head"), mid, 3, 3),
            floor,
        }
    }

    /// Illumination map in `[floor, 1]`, one plane per colour channel.
    pub fn illumination<'t, T: Real>(&self, ctx: &Ctx<'t, T>, refined: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = refined;
        for stage in &self.stack {
            h = stage.forward(ctx, h)?;
        }
        for block in &self.residual {
            h = block.forward(ctx, h)?;
        }
        self.head.forward(ctx, h)?.sigmoid()?.clamp(self.floor, 1.0)
    }

    /// Stabilized point-wise division of `xa` by an illumination map.
    pub fn divide<'t, T: Real>(xa: Var<'t, T>, illumination: Var<'t, T>) -> Result<Var<'t, T>> {
        xa.div(illumination)
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, xa: Var<'t, T>, refined: Var<'t, T>) -> Result<Var<'t, T>> {
        check_channels("color_correct", &xa, 3)?;
        Self::divide(xa, self.illumination(ctx, refined)?)
    }
}

/// Concatenate, 1x1 fuse, channel-attention calibrate, 3x3 integrate.
#[derive(Clone, Debug)]
pub struct FeatureAggregate {
    pub fuse: Conv,
    pub attention: ChannelAttention,
    pub integrate: Conv,
    pub width: usize,
}

impl FeatureAggregate {
    pub fn new(reg: &mut Registry, prefix: &str, width: usize, reduction: usize) -> Result<Self> {
        Ok(FeatureAggregate {
            fuse: Conv::new(reg, &join(prefix, "fuse"), 2 * width, width, 1),
            attention: ChannelAttention::new(reg, &join(prefix, "ca"), width, reduction)?,
            integrate: Conv::new(reg, &join(prefix, "integrate"), width, width, 3),
            width,
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        if a.shape() != b.shape() {
            return Err(Error::dim(
                "feature_aggregate",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let fused = self.fuse.forward(ctx, ctx.tape().concat(&[a, b])?)?;
        let calibrated = self.attention.forward(ctx, fused)?;
        self.integrate.forward(ctx, calibrated)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exposure {
    Lighten,
    Darken,
}

/// Lightening (encoded + offset) or darkening (encoded - offset) block with a half-width bottleneck.
#[derive(Clone, Debug)]
pub struct ExposureBlock {
    pub encode: ConvAct,
    pub offset: ConvAct,
    pub decode: Conv,
    pub mode: Exposure,
    pub width: usize,
}

impl ExposureBlock {
    pub fn new(reg: &mut Registry, prefix: &str, width: usize, mode: Exposure) -> Result<Self> {
        if width < 2 || width % 2 != 0 {
            return Err(Error::config(format!("exposure block width {width} must be even")));
        }
        let half = width / 2;
        Ok(ExposureBlock {
            encode: ConvAct::new(reg, &join(prefix, "encode"), width, half, 3),
            offset: ConvAct::new(reg, &join(prefix, "offset"), half, half, 3),
            decode: Conv::new(reg, &join(prefix, "decode"), half, width, 3),
            mode,
            width,
        })
    }

    /// `(encoded, offset)` before they are combined.
    pub fn parts<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        if x.value().dims4()?[1] != self.width {
            return Err(Error::config(format!(
                "exposure block of width {} given {:?}",
                self.width,
                x.shape()
            )));
        }
        let encoded = self.encode.forward(ctx, x)?;
        let offset = self.offset.forward(ctx, encoded)?;
        Ok((encoded, offset))
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (encoded, offset) = self.parts(ctx, x)?;
        let shifted = match self.mode {
            Exposure::Lighten => encoded.add(offset)?,
            Exposure::Darken => encoded.sub(offset)?,
        };
        self.decode.forward(ctx, shifted)
    }
}

/// Intermediate values of the back-projection residual.
pub struct BackProjection<'t, T: Real> {
    /// `L1(x_F)`.
    pub pred: Var<'t, T>,
    /// `D(L1(x_F))`.
    pub darkened: Var<'t, T>,
    /// `lambda * x_F - D(L1(x_F))`, the input of `L2`.
    pub residual_map: Var<'t, T>,
    /// `L2(residual_map)`.
    pub rf: Var<'t, T>,
}

/// Lighten, darken, re-lighten: `R_F = L2(lambda x_F - D(L1(x_F)))`.
#[derive(Clone, Debug)]
pub struct IasResidual {
    pub l1: ExposureBlock,
    pub d: ExposureBlock,
    pub l2: ExposureBlock,
    pub lambda: String,
}

impl IasResidual {
    pub fn new(reg: &mut Registry, prefix: &str, width: usize, lambda_init: f64) -> Result<Self> {
        Ok(IasResidual {
            l1: ExposureBlock::new(reg, &join(prefix, "l1"), width, Exposure::Lighten)?,
            d: ExposureBlock::new(reg, &join(prefix, "d"), width, Exposure::Darken)?,
            l2: ExposureBlock::new(reg, &join(prefix, "l2"), width, Exposure::Lighten)?,
            lambda: reg.declare(join(prefix, "lambda"), vec![1], Init::Const(lambda_init)),
        })
    }

    pub fn trace<'t, T: Real>(&self, ctx: &Ctx<'t, T>, xf: Var<'t, T>) -> Result<BackProjection<'t, T>> {
        let pred = self.l1.forward(ctx, xf)?;
        let darkened = self.d.forward(ctx, pred)?;
        let residual_map = xf.scale_by(ctx.p(&self.lambda)?)?.sub(darkened)?;
        let rf = self.l2.forward(ctx, residual_map)?;
        Ok(BackProjection {
            pred,
            darkened,
            residual_map,
            rf,
        })
    }

    /// Returns `(rf, pred)`.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, xf: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let t = self.trace(ctx, xf)?;
        Ok((t.rf, t.pred))
    }
}

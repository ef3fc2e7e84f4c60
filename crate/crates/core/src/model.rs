//! The three-stage network: feature extraction, joint refinement and
//! illumination adjustment, wired end to end.

use crate::autograd::{Tape, Var};
use crate::blocks::{
    ColorCorrect, Conv, DetailEnhance, EncoderDecoder, FeatureAggregate, IasResidual, Rcab, ResidualBlock, Sft, Ssb,
};
use crate::error::{Error, Result};
use crate::kernels::reflect_index;
use crate::kv::KvMap;
use crate::params::{Ctx, Init, ParamStore, Registry};
use crate::tensor::{Real, Tensor};

/// Initial bias of the final projection; with its zero weights the untrained output is mid-grey.
pub const OUTPUT_BIAS_INIT: f64 = 0.5;

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Feature width of the first and last stage.
    pub width: usize,
    /// Encoder-decoder levels.
    pub ed_depth: usize,
    /// Middle width of the illumination branch.
    pub jrs_mid: usize,
    /// Channel attention reduction ratio.
    pub reduction: usize,
    /// Initial value of the trainable back-projection weight.
    pub lambda_bp_init: f64,
    /// Lower bound of the illumination map.
    pub illum_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 6] = [
        "width",
        "ed_depth",
        "jrs_mid",
        "reduction",
        "lambda_bp_init",
        "illum_floor",
    ];

    /// CPU-sized profile used by the training tests.
    pub fn desk() -> Self {
        ModelConfig {
            width: 16,
            ed_depth: 2,
            jrs_mid: 32,
            reduction: 4,
            lambda_bp_init: 1.0,
            illum_floor: 0.01,
        }
    }

    /// Full-width profile (64 features, 128-channel illumination branch).
    pub fn paper() -> Self {
        ModelConfig {
            width: 64,
            jrs_mid: 128,
            ..Self::desk()
        }
    }

    /// Smallest profile, used for whole-model gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            width: 8,
            jrs_mid: 8,
            ..Self::desk()
        }
    }

    /// Channels per colour branch of the detail-enhancement stacks.
    pub fn detail_width(&self) -> usize {
        (self.width / 4).max(1)
    }

    /// Spatial extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.ed_depth
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.jrs_mid == 0 || self.reduction == 0 {
            return Err(Error::config("all extents must be positive"));
        }
        if self.width % self.reduction != 0 {
            return Err(Error::config(format!(
                "width {} not divisible by reduction {}",
                self.width, self.reduction
            )));
        }
        if self.width % 2 != 0 {
            return Err(Error::config(format!("width {} must be even", self.width)));
        }
        if self.jrs_mid < 3 {
            return Err(Error::config("jrs_mid must be at least 3"));
        }
        if self.ed_depth > 6 {
            return Err(Error::config(format!("ed_depth {} too large", self.ed_depth)));
        }
        if !(self.illum_floor > 0.0 && self.illum_floor < 1.0) {
            return Err(Error::config("illum_floor must lie in (0, 1)"));
        }
        if !self.lambda_bp_init.is_finite() {
            return Err(Error::config("lambda_bp_init must be finite"));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        fn conv(cin: usize, cout: usize, k: usize) -> usize {
            cout * cin * k * k + cout
        }
        let (w, m, r, e) = (self.width, self.jrs_mid, self.reduction, self.detail_width());
        let level = |l: usize| w << l;
        let attention = 2 * w * (w / r);
        let residual = |c: usize| 2 * (conv(c, c, 3) + 1);

        let stem = conv(3, w, 3);
        let rcab = conv(w, w, 3) + 1 + conv(w, w, 3) + attention;
        let mut ed = 2 * (conv(level(self.ed_depth), level(self.ed_depth), 3) + 1);
        for l in 1..=self.ed_depth {
            ed += conv(level(l - 1), level(l), 3) + 1;
            ed += conv(level(l), level(l - 1), 3) + conv(2 * level(l - 1), level(l - 1), 3) + 1;
        }
        let ssb = conv(w, 3, 3) + conv(3, w, 3);
        let fes = stem + 2 * residual(w) + rcab + ed + ssb;

        let detail = 3 * (conv(1, e, 3) + conv(e, e, 3));
        let sft = 2 * conv(w, 3 * e, 3);
        let cna = |cin: usize| conv(cin, m, 3) + 2 * m + 1;
        let color = cna(3 * e) + 2 * cna(m) + 2 * residual(m) + conv(m, 3, 3);
        let jrs = conv(w, 3, 3) + detail + sft + color;

        let half = w / 2;
        let exposure = conv(w, half, 3) + 1 + conv(half, half, 3) + 1 + conv(half, w, 3);
        let aggregate = conv(2 * w, w, 1) + attention + conv(w, w, 3);
        let ias = 2 * conv(3, w, 3) + aggregate + 3 * exposure + 1 + conv(w, 3, 3);

        fes + jrs + ias
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("width", self.width);
        kv.insert("ed_depth", self.ed_depth);
        kv.insert("jrs_mid", self.jrs_mid);
        kv.insert("reduction", self.reduction);
        kv.insert("lambda_bp_init", self.lambda_bp_init);
        kv.insert("illum_floor", self.illum_floor);
        kv
    }

    /// Reads the model keys of `kv` on top of `self`; other keys are ignored.
    pub fn updated_from(mut self, kv: &KvMap) -> Result<Self> {
        if let Some(v) = kv.parsed("width")? {
            self.width = v;
        }
        if let Some(v) = kv.parsed("ed_depth")? {
            self.ed_depth = v;
        }
        if let Some(v) = kv.parsed("jrs_mid")? {
            self.jrs_mid = v;
        }
        if let Some(v) = kv.parsed("reduction")? {
            self.reduction = v;
        }
        if let Some(v) = kv.parsed("lambda_bp_init")? {
            self.lambda_bp_init = v;
        }
        if let Some(v) = kv.parsed("illum_floor")? {
            self.illum_floor = v;
        }
        self.validate()?;
        Ok(self)
    }
}

/// Feature extraction stage.
#[derive(Clone, Debug)]
pub struct Fes {
    pub stem: Conv,
    pub residual: [ResidualBlock; 2],
    pub rcab: Rcab,
    pub ed: EncoderDecoder,
    pub ssb: Ssb,
}

/// Joint refinement stage.
#[derive(Clone, Debug)]
pub struct Jrs {
    pub proj: Conv,
    pub detail: DetailEnhance,
    pub sft: Sft,
    pub color: ColorCorrect,
}

/// Illumination adjustment stage.
#[derive(Clone, Debug)]
pub struct Ias {
    pub lift_prev: Conv,
    pub lift_orig: Conv,
    pub aggregate: FeatureAggregate,
    pub residual: IasResidual,
    pub project: Conv,
}

/// Intermediate values of the refinement stage.
pub struct JrsTrace<'t, T: Real> {
    pub xa: Var<'t, T>,
    pub refined: Var<'t, T>,
    pub illumination: Var<'t, T>,
    pub xj: Var<'t, T>,
}

/// Intermediate values of the adjustment stage.
pub struct IasTrace<'t, T: Real> {
    pub xf: Var<'t, T>,
    pub pred: Var<'t, T>,
    pub rf: Var<'t, T>,
    /// Projection of `pred + rf` before clamping.
    pub raw: Var<'t, T>,
    pub y: Var<'t, T>,
}

/// All stage outputs of one forward pass.
pub struct Forward<'t, T: Real> {
    pub features: Var<'t, T>,
    pub aux_pred: Var<'t, T>,
    pub xj: Var<'t, T>,
    pub y: Var<'t, T>,
}

/// The assembled network. Holds only structure; weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Jcrnet {
    pub cfg: ModelConfig,
    pub fes: Fes,
    pub jrs: Jrs,
    pub ias: Ias,
    registry: Registry,
}

impl Jcrnet {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut reg = Registry::new();
        let w = cfg.width;

        let fes = Fes {
            stem: Conv::new(&mut reg, "fes.stem", 3, w, 3),
            residual: [
                ResidualBlock::new(&mut reg, "fes.rb1", w),
                ResidualBlock::new(&mut reg, "fes.rb2", w),
            ],
            rcab: Rcab::new(&mut reg, "fes.rcab", w, cfg.reduction)?,
            ed: EncoderDecoder::new(&mut reg, "fes.ed", w, cfg.ed_depth),
            ssb: Ssb::new(&mut reg, "fes.ssb", w),
        };

        let detail = DetailEnhance::new(&mut reg, "jrs.detail", cfg.detail_width());
        let refined = detail.out_channels();
        let jrs = Jrs {
            proj: Conv::head(&mut reg, "jrs.proj", w, 3, 3, Init::Zeros),
            sft: Sft::new(&mut reg, "jrs.sft", w, refined),
            color: ColorCorrect::new(&mut reg, "jrs.color", refined, cfg.jrs_mid, cfg.illum_floor),
            detail,
        };

        let ias = Ias {
            lift_prev: Conv::new(&mut reg, "ias.lift_prev", 3, w, 3),
            lift_orig: Conv::new(&mut reg, "ias.lift_orig", 3, w, 3),
            aggregate: FeatureAggregate::new(&mut reg, "ias.agg", w, cfg.reduction)?,
            residual: IasResidual::new(&mut reg, "ias.bp", w, cfg.lambda_bp_init)?,
            project: Conv::head(&mut reg, "ias.project", w, 3, 3, Init::Const(OUTPUT_BIAS_INIT)),
        };

        Ok(Jcrnet {
            cfg,
            fes,
            jrs,
            ias,
            registry: reg,
        })
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn init_params(&self, seed: u64) -> ParamStore<f32> {
        self.registry.initialize(seed)
    }

    pub fn check_input<T: Real>(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.dims4()?;
        if c != 3 {
            return Err(Error::dim("enhance", format!("expected 3 channels, got {c}")));
        }
        let unit = self.cfg.size_multiple();
        if h % unit != 0 || w % unit != 0 || h == 0 || w == 0 {
            return Err(Error::dim(
                "enhance",
                format!("extent {h}x{w} must be a positive multiple of {unit}"),
            ));
        }
        Ok(())
    }

    /// Returns `(features, aux_pred)`.
    pub fn forward_fes<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.check_input(&x.value())?;
        let f = &self.fes;
        let h = f.stem.forward(ctx, x)?;
        let h = f.residual[1].forward(ctx, f.residual[0].forward(ctx, h)?)?;
        let h = f.rcab.forward(ctx, h)?;
        let h = f.ed.forward(ctx, h)?;
        f.ssb.forward(ctx, h, x)
    }

    pub fn trace_jrs<'t, T: Real>(&self, ctx: &Ctx<'t, T>, features: Var<'t, T>, x: Var<'t, T>) -> Result<JrsTrace<'t, T>> {
        let j = &self.jrs;
        let xa = x.add(j.proj.forward(ctx, features)?)?;
        let detail = j.detail.forward(ctx, xa)?;
        let refined = j.sft.forward(ctx, detail, features)?;
        let illumination = j.color.illumination(ctx, refined)?;
        let xj = ColorCorrect::divide(xa, illumination)?;
        Ok(JrsTrace {
            xa,
            refined,
            illumination,
            xj,
        })
    }

    pub fn forward_jrs<'t, T: Real>(&self, ctx: &Ctx<'t, T>, features: Var<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.trace_jrs(ctx, features, x)?.xj)
    }

    pub fn trace_ias<'t, T: Real>(&self, ctx: &Ctx<'t, T>, xj: Var<'t, T>, x: Var<'t, T>) -> Result<IasTrace<'t, T>> {
        if xj.shape() != x.shape() {
            return Err(Error::dim("forward_ias", format!("{:?} vs {:?}", xj.shape(), x.shape())));
        }
        let s = &self.ias;
        let a = s.lift_prev.forward(ctx, xj)?;
        let b = s.lift_orig.forward(ctx, x)?;
        let xf = s.aggregate.forward(ctx, a, b)?;
        let (rf, pred) = s.residual.forward(ctx, xf)?;
        let raw = s.project.forward(ctx, pred.add(rf)?)?;
        let y = raw.clamp(0.0, 1.0)?;
        Ok(IasTrace { xf, pred, rf, raw, y })
    }

    pub fn forward_ias<'t, T: Real>(&self, ctx: &Ctx<'t, T>, xj: Var<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.trace_ias(ctx, xj, x)?.y)
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Forward<'t, T>> {
        let (features, aux_pred) = self.forward_fes(ctx, x)?;
        let xj = self.forward_jrs(ctx, features, x)?;
        let y = self.forward_ias(ctx, xj, x)?;
        Ok(Forward {
            features,
            aux_pred,
            xj,
            y,
        })
    }

    /// Inference on a `[N, 3, H, W]` batch with extents divisible by [`ModelConfig::size_multiple`].
    pub fn enhance<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        if x.data().iter().any(|&v| v < T::zero() || v > T::one()) {
            return Err(Error::config("input values must lie in [0, 1]"));
        }
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, params)?;
        let input = tape.constant(x.clone())?;
        let out = self.forward(&ctx, input)?.y.value();
        Ok((*out).clone())
    }

    /// Inference on any extent: reflect-pads up to the next valid size and crops back.
    pub fn enhance_padded<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, _, h, w] = x.dims4()?;
        let unit = self.cfg.size_multiple();
        let (ph, pw) = (h.div_ceil(unit) * unit, w.div_ceil(unit) * unit);
        if (ph, pw) == (h, w) {
            return self.enhance(params, x);
        }
        let padded = reflect_pad(x, ph, pw)?;
        crop(&self.enhance(params, &padded)?, h, w)
    }
}

/// Extends a 4-d tensor to `oh x ow` by mirroring at the bottom/right edges.
pub fn reflect_pad<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if oh < h || ow < w || h == 0 || w == 0 {
        return Err(Error::dim("reflect_pad", format!("{h}x{w} -> {oh}x{ow}")));
    }
    let mut data = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for i in 0..oh {
            let si = reflect_index(i as isize, h);
            for j in 0..ow {
                data.push(plane[si * w + reflect_index(j as isize, w)]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], data)
}

/// Top-left `h x w` window of a 4-d tensor.
pub fn crop<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [n, c, xh, xw] = x.dims4()?;
    if h > xh || w > xw {
        return Err(Error::dim("crop", format!("{xh}x{xw} -> {h}x{w}")));
    }
    let mut data = Vec::with_capacity(n * c * h * w);
    for plane in x.data().chunks(xh * xw) {
        for i in 0..h {
            data.extend_from_slice(&plane[i * xw..i * xw + w]);
        }
    }
    Tensor::new(vec![n, c, h, w], data)
}

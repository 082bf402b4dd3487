//! Full segmentation network: a small residual encoder producing `F2..F5`,
//! a pyramid pooling context head on `F5`, and an FPN decoder whose top-down
//! and fusion upsamplings are replaced by flow alignment.
//!
//! Parameter names are shared between the aligned and the plain-bilinear
//! variants; the aligned model only adds `*.fam*` flow subnets. Each prefix
//! draws its initial values from its own RNG stream, so shared layers start
//! identical in both variants for the same seed.

use std::collections::BTreeMap;

use log::warn;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::fam::{self, FamConfig};
use crate::kernels::conv::ConvGeometry;
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};
use crate::warp;

/// Pyramid levels produced by the encoder.
pub const LEVELS: [usize; 4] = [2, 3, 4, 5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channel widths of `F2..F5`.
    pub stage_channels: Vec<usize>,
    pub fpn_channels: usize,
    pub ppm_bins: Vec<usize>,
    pub use_ppm: bool,
    /// Flow alignment in the decoder; `false` gives the bilinear FPN baseline.
    pub use_fam: bool,
    pub num_classes: usize,
    pub norm_groups: usize,
    pub norm_eps: f64,
    pub fam: FamConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: vec![32, 64, 128, 256],
            fpn_channels: 64,
            ppm_bins: vec![1, 2, 3, 6],
            use_ppm: true,
            use_fam: true,
            num_classes: 5,
            norm_groups: 8,
            norm_eps: 1e-5,
            fam: FamConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Reduced widths used for desk-scale training runs.
    pub fn desk() -> Self {
        ModelConfig {
            stage_channels: vec![16, 32, 64, 128],
            fpn_channels: 32,
            ppm_bins: vec![1, 2],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.stage_channels.len() != 4 {
            errs.push(format!(
                "model.stage_channels must list 4 widths (got {})",
                self.stage_channels.len()
            ));
        }
        let mut widths = self.stage_channels.clone();
        widths.push(self.fpn_channels);
        if widths.iter().any(|&c| c == 0) {
            errs.push("model widths must all be positive".into());
        }
        if self.norm_groups == 0 {
            errs.push("model.norm_groups must be positive".into());
        } else if let Some(c) = widths.iter().find(|&&c| c % self.norm_groups != 0) {
            errs.push(format!(
                "model.norm_groups = {} does not divide channel width {c}",
                self.norm_groups
            ));
        }
        if self.ppm_bins.is_empty() && self.use_ppm {
            errs.push("model.ppm_bins must not be empty when use_ppm is set".into());
        }
        if self.ppm_bins.iter().any(|&b| b == 0) || self.ppm_bins.windows(2).any(|w| w[0] >= w[1]) {
            errs.push(format!(
                "model.ppm_bins must be positive and strictly increasing (got {:?})",
                self.ppm_bins
            ));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            errs.push(format!("model.num_classes must be in [2, 255] (got {})", self.num_classes));
        }
        if !(self.norm_eps > 0.0) {
            errs.push("model.norm_eps must be positive".into());
        }
        errs.extend(self.fam.validate());
        errs
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(crate::Error::Config(errs))
        }
    }

    fn width(&self, level: usize) -> usize {
        self.stage_channels[level - 2]
    }
}

pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(invalid!("input size {h}x{w} must be a positive multiple of 32 in both dimensions"));
    }
    Ok(())
}

fn rng_for(seed: u64, prefix: &str) -> ChaCha8Rng {
    crate::rng::stream(seed, prefix)
}

struct Init<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl Init<'_> {
    fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize, bias: bool) -> Result<()> {
        self.store
            .init_conv(prefix, c_in, c_out, k, bias, &mut rng_for(self.seed, prefix))
    }

    fn conv_norm(&mut self, conv: &str, norm: &str, c_in: usize, c_out: usize, k: usize) -> Result<()> {
        self.conv(conv, c_in, c_out, k, false)?;
        self.store.init_norm(norm, c_out)
    }

    fn fam(&mut self, prefix: &str, c: usize, cfg: &FamConfig) -> Result<()> {
        fam::init_fam_params(self.store, prefix, c, cfg, &mut rng_for(self.seed, prefix))
    }

    fn lateral(&mut self, level: usize, c_in: usize, fpn: usize) -> Result<()> {
        let p = format!("dec.lat{level}");
        self.conv_norm(&format!("{p}.conv1"), &format!("{p}.norm1"), c_in, fpn, 1)?;
        self.conv(&format!("{p}.conv2"), fpn, fpn, 1, true)
    }
}

/// Build a freshly initialized parameter set for `cfg`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.check()?;
    let mut store = ParamStore::new();
    let mut init = Init {
        store: &mut store,
        seed,
    };
    let fpn = cfg.fpn_channels;

    let c2 = cfg.width(2);
    init.conv_norm("enc.stem.conv1", "enc.stem.norm1", 3, c2, 3)?;
    init.conv_norm("enc.stem.conv2", "enc.stem.norm2", c2, c2, 3)?;
    for level in 3..=5 {
        let (c_prev, c) = (cfg.width(level - 1), cfg.width(level));
        let p = format!("enc.stage{level}");
        init.conv_norm(&format!("{p}.down"), &format!("{p}.down_norm"), c_prev, c, 3)?;
        init.conv_norm(&format!("{p}.block.conv1"), &format!("{p}.block.norm1"), c, c, 3)?;
        init.conv_norm(&format!("{p}.block.conv2"), &format!("{p}.block.norm2"), c, c, 3)?;
    }

    let c5 = cfg.width(5);
    if cfg.use_ppm {
        for &b in &cfg.ppm_bins {
            init.conv_norm(&format!("ppm.bin{b}.conv"), &format!("ppm.bin{b}.norm"), c5, fpn, 1)?;
        }
        init.conv_norm("ppm.fuse.conv", "ppm.fuse.norm", c5 + cfg.ppm_bins.len() * fpn, fpn, 3)?;
    } else {
        init.lateral(5, c5, fpn)?;
    }

    for level in [2, 3, 4] {
        init.lateral(level, cfg.width(level), fpn)?;
        init.conv(&format!("aux{level}.cls"), fpn, cfg.num_classes, 1, true)?;
    }
    if cfg.use_fam {
        for level in [2, 3, 4] {
            init.fam(&format!("dec.fam{level}"), fpn, &cfg.fam)?;
        }
        for level in [3, 4, 5] {
            init.fam(&format!("fuse.fam{level}"), fpn, &cfg.fam)?;
        }
    }
    init.conv_norm("head.conv", "head.norm", 4 * fpn, fpn, 3)?;
    init.conv("head.cls", fpn, cfg.num_classes, 1, true)?;
    Ok(store)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Encoder levels `F2..F5` and decoder outputs.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: BTreeMap<usize, Var>,
    /// Refined `F̃2..F̃4` after top-down alignment.
    pub refined: BTreeMap<usize, Var>,
    /// Context-enriched top level (PPM output, or compressed `F5` without PPM).
    pub top: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `N × classes × H × W` at input resolution.
    pub logits: Var,
    /// Auxiliary logits for `F̃2, F̃3, F̃4` at native resolution (train mode only).
    pub aux: Vec<Var>,
    /// Flow fields keyed by the producing module's prefix.
    pub flows: BTreeMap<String, Var>,
    pub pyramid: FeaturePyramid,
}

struct Ctx<'a> {
    params: &'a Bound,
    cfg: &'a ModelConfig,
}

impl Ctx<'_> {
    fn p(&self, name: &str) -> Result<Var> {
        self.params.var(name)
    }

    fn conv_norm_relu(
        &self,
        tape: &mut Tape,
        x: Var,
        conv: &str,
        norm: &str,
        stride: usize,
        relu: bool,
    ) -> Result<Var> {
        let w = self.p(&format!("{conv}.weight"))?;
        let k = tape.shape(w).h;
        let y = tape.conv2d(x, w, None, stride, k / 2)?;
        let y = tape.group_norm(
            y,
            self.cfg.norm_groups,
            self.p(&format!("{norm}.gamma"))?,
            self.p(&format!("{norm}.beta"))?,
            self.cfg.norm_eps,
        )?;
        if relu {
            tape.relu(y)
        } else {
            Ok(y)
        }
    }

    fn conv_bias(&self, tape: &mut Tape, x: Var, conv: &str) -> Result<Var> {
        let w = self.p(&format!("{conv}.weight"))?;
        let k = tape.shape(w).h;
        tape.conv2d(x, w, Some(self.p(&format!("{conv}.bias"))?), 1, k / 2)
    }

    fn lateral(&self, tape: &mut Tape, x: Var, level: usize) -> Result<Var> {
        let p = format!("dec.lat{level}");
        let y = self.conv_norm_relu(tape, x, &format!("{p}.conv1"), &format!("{p}.norm1"), 1, true)?;
        self.conv_bias(tape, y, &format!("{p}.conv2"))
    }

    /// Align `coarse` onto `fine`'s grid by flow alignment or plain bilinear
    /// upsampling, depending on the config.
    fn align(
        &self,
        tape: &mut Tape,
        coarse: Var,
        fine: Var,
        prefix: &str,
        flows: &mut BTreeMap<String, Var>,
    ) -> Result<Var> {
        if self.cfg.use_fam {
            let (aligned, flow) = fam::fam_forward(tape, coarse, fine, self.params, prefix, &self.cfg.fam)?;
            flows.insert(prefix.to_string(), flow);
            Ok(aligned)
        } else {
            let factor = tape.shape(fine).h / tape.shape(coarse).h;
            warp::upsample_bilinear(tape, coarse, factor)
        }
    }
}

/// Encoder: stem (two stride-2 convs) to `F2`, then three stages of a
/// stride-2 conv and one residual block.
pub fn encoder_forward(tape: &mut Tape, image: Var, params: &Bound, cfg: &ModelConfig) -> Result<BTreeMap<usize, Var>> {
    let s = tape.shape(image);
    if s.c != 3 {
        return Err(shape_err!("encoder expects a 3-channel image, got {s}"));
    }
    check_input_size(s.h, s.w)?;
    let ctx = Ctx { params, cfg };
    let mut levels = BTreeMap::new();
    let x = ctx.conv_norm_relu(tape, image, "enc.stem.conv1", "enc.stem.norm1", 2, true)?;
    let mut x = ctx.conv_norm_relu(tape, x, "enc.stem.conv2", "enc.stem.norm2", 2, true)?;
    levels.insert(2, x);
    for level in 3..=5 {
        let p = format!("enc.stage{level}");
        x = ctx.conv_norm_relu(tape, x, &format!("{p}.down"), &format!("{p}.down_norm"), 2, true)?;
        let y = ctx.conv_norm_relu(tape, x, &format!("{p}.block.conv1"), &format!("{p}.block.norm1"), 1, true)?;
        let y = ctx.conv_norm_relu(tape, y, &format!("{p}.block.conv2"), &format!("{p}.block.norm2"), 1, false)?;
        let sum = tape.add(x, y)?;
        x = tape.relu(sum)?;
        levels.insert(level, x);
    }
    Ok(levels)
}

/// Bins that fit inside an `h × w` map.
pub fn active_bins(bins: &[usize], h: usize, w: usize) -> impl Iterator<Item = (usize, bool)> + '_ {
    bins.iter().map(move |&b| (b, b <= h && b <= w))
}

/// Pyramid pooling head. Bins larger than the map contribute a zero branch.
pub fn ppm_forward(tape: &mut Tape, f5: Var, params: &Bound, cfg: &ModelConfig) -> Result<Var> {
    let ctx = Ctx { params, cfg };
    let s = tape.shape(f5);
    let mut branches = vec![f5];
    for (b, active) in active_bins(&cfg.ppm_bins, s.h, s.w) {
        if !active {
            warn!("ppm bin {b} exceeds the {}x{} top-level map; skipped", s.h, s.w);
            let zero = tape.constant(Tensor::zeros(Shape::new(s.n, cfg.fpn_channels, s.h, s.w)))?;
            branches.push(zero);
            continue;
        }
        let pooled = tape.avg_pool_adaptive(f5, b, b)?;
        let y = ctx.conv_norm_relu(tape, pooled, &format!("ppm.bin{b}.conv"), &format!("ppm.bin{b}.norm"), 1, true)?;
        branches.push(warp::resize_bilinear(tape, y, s.h, s.w)?);
    }
    let cat = tape.concat_channels(&branches)?;
    ctx.conv_norm_relu(tape, cat, "ppm.fuse.conv", "ppm.fuse.norm", 1, true)
}

/// Top-down aligned FPN and multi-level fusion.
pub fn decoder_forward(
    tape: &mut Tape,
    levels: &BTreeMap<usize, Var>,
    params: &Bound,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<ModelOutput> {
    let ctx = Ctx { params, cfg };
    let mut flows = BTreeMap::new();
    let level = |l: usize| {
        levels
            .get(&l)
            .copied()
            .ok_or_else(|| invalid!("feature pyramid is missing level {l}"))
    };

    let top = if cfg.use_ppm {
        ppm_forward(tape, level(5)?, params, cfg)?
    } else {
        ctx.lateral(tape, level(5)?, 5)?
    };

    let mut refined = BTreeMap::new();
    let mut upper = top;
    for l in [4, 3, 2] {
        let lat = ctx.lateral(tape, level(l)?, l)?;
        let aligned = ctx.align(tape, upper, lat, &format!("dec.fam{l}"), &mut flows)?;
        upper = tape.add(lat, aligned)?;
        refined.insert(l, upper);
    }

    let f2 = refined[&2];
    let mut parts = vec![f2];
    for (l, src) in [(3, refined[&3]), (4, refined[&4]), (5, top)] {
        parts.push(ctx.align(tape, src, f2, &format!("fuse.fam{l}"), &mut flows)?);
    }
    let cat = tape.concat_channels(&parts)?;
    let y = ctx.conv_norm_relu(tape, cat, "head.conv", "head.norm", 1, true)?;
    let y = ctx.conv_bias(tape, y, "head.cls")?;
    let logits = warp::upsample_bilinear(tape, y, 4)?;

    let mut aux = Vec::new();
    if mode == Mode::Train {
        for l in [2, 3, 4] {
            aux.push(ctx.conv_bias(tape, refined[&l], &format!("aux{l}.cls"))?);
        }
    }
    Ok(ModelOutput {
        logits,
        aux,
        flows,
        pyramid: FeaturePyramid {
            levels: levels.clone(),
            refined,
            top: Some(top),
        },
    })
}

pub fn model_forward(tape: &mut Tape, image: Var, params: &Bound, cfg: &ModelConfig, mode: Mode) -> Result<ModelOutput> {
    let levels = encoder_forward(tape, image, params, cfg)?;
    decoder_forward(tape, &levels, params, cfg, mode)
}

/// Eval-mode forward on plain tensors; returns the logits tensor.
pub fn predict(params: &ParamStore, cfg: &ModelConfig, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape)?;
    let x = tape.constant(image.clone())?;
    let out = model_forward(&mut tape, x, &bound, cfg, Mode::Eval)?;
    Ok(tape.value(out.logits).clone())
}

/// Analytic FLOPs of an eval-mode forward, with a per-module breakdown.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopReport {
    pub total: u64,
    pub breakdown: BTreeMap<String, u64>,
}

impl FlopReport {
    pub fn gflops(&self) -> f64 {
        self.total as f64 / 1e9
    }
}

/// Convolutions count `2·k²·C_in·C_out·H_out·W_out`; bilinear sampling counts
/// 8 per output element.
pub fn conv_flops(c_in: usize, c_out: usize, k: usize, h_out: usize, w_out: usize) -> u64 {
    2 * (k * k * c_in * c_out * h_out * w_out) as u64
}

pub fn count_flops(cfg: &ModelConfig, input: Shape) -> Result<FlopReport> {
    cfg.check()?;
    check_input_size(input.h, input.w)?;
    let n = input.n;
    let fpn = cfg.fpn_channels;
    let mut b: BTreeMap<String, u64> = BTreeMap::new();
    let mut add = |k: &str, v: u64| *b.entry(k.to_string()).or_default() += v;
    let conv = |c_in, c_out, k, h, w| n as u64 * conv_flops(c_in, c_out, k, h, w);
    let dim = |l: usize| (input.h >> l, input.w >> l);

    // Encoder; strides are checked through ConvGeometry for consistency.
    let g = ConvGeometry::new(input, Shape::new(cfg.width(2), 3, 3, 3), 2, 1)?;
    add("encoder", g.flops());
    let (h2, w2) = dim(2);
    add("encoder", conv(cfg.width(2), cfg.width(2), 3, h2, w2));
    for l in 3..=5 {
        let (h, w) = dim(l);
        add("encoder", conv(cfg.width(l - 1), cfg.width(l), 3, h, w));
        add("encoder", 2 * conv(cfg.width(l), cfg.width(l), 3, h, w));
    }

    let (h5, w5) = dim(5);
    let c5 = cfg.width(5);
    if cfg.use_ppm {
        for (bin, active) in active_bins(&cfg.ppm_bins, h5, w5) {
            if active {
                add("ppm", conv(c5, fpn, 1, bin, bin));
                add("ppm", 8 * (n * fpn * h5 * w5) as u64);
            }
        }
        add("ppm", conv(c5 + cfg.ppm_bins.len() * fpn, fpn, 3, h5, w5));
    } else {
        add("lateral", conv(c5, fpn, 1, h5, w5) + conv(fpn, fpn, 1, h5, w5));
    }

    let align = |h: usize, w: usize, factor: usize| -> u64 {
        if cfg.use_fam {
            fam::fam_flops(fpn, n, h, w, &cfg.fam)
        } else if factor == 1 {
            0
        } else {
            8 * (n * fpn * h * w) as u64
        }
    };
    for l in [4, 3, 2] {
        let (h, w) = dim(l);
        add("lateral", conv(cfg.width(l), fpn, 1, h, w) + conv(fpn, fpn, 1, h, w));
        add("align.top_down", align(h, w, 2));
    }
    for factor in [2, 4, 8] {
        add("align.fusion", align(h2, w2, factor));
    }
    add("head", conv(4 * fpn, fpn, 3, h2, w2) + conv(fpn, cfg.num_classes, 1, h2, w2));
    add("head", 8 * (n * cfg.num_classes * input.h * input.w) as u64);

    let total = b.values().sum();
    Ok(FlopReport { total, breakdown: b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            stage_channels: vec![4, 4, 8, 8],
            fpn_channels: 4,
            ppm_bins: vec![1, 2],
            num_classes: 3,
            norm_groups: 2,
            ..ModelConfig::default()
        }
    }

    fn image(n: usize, h: usize, seed: u64) -> Tensor {
        Tensor::uniform(Shape::new(n, 3, h, h), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn pyramid_shapes() {
        let cfg = tiny();
        let p = init_params(&cfg, 0).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape).unwrap();
        let x = tape.constant(image(1, 64, 0)).unwrap();
        let levels = encoder_forward(&mut tape, x, &bound, &cfg).unwrap();
        for (l, side) in [(2, 16), (3, 8), (4, 4), (5, 2)] {
            let s = tape.shape(levels[&l]);
            assert_eq!((s.h, s.w), (side, side), "F{l}");
            assert_eq!(s.c, cfg.width(l));
        }
    }

    #[test]
    fn output_shapes() {
        let cfg = ModelConfig {
            num_classes: 5,
            ..tiny()
        };
        let p = init_params(&cfg, 0).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape).unwrap();
        let x = tape.constant(image(1, 64, 1)).unwrap();
        let out = model_forward(&mut tape, x, &bound, &cfg, Mode::Train).unwrap();
        assert_eq!(tape.shape(out.logits), Shape::new(1, 5, 64, 64));
        let aux: Vec<_> = out.aux.iter().map(|&a| tape.shape(a)).collect();
        assert_eq!(
            aux,
            vec![Shape::new(1, 5, 16, 16), Shape::new(1, 5, 8, 8), Shape::new(1, 5, 4, 4)]
        );
        assert_eq!(out.flows.len(), 6);
    }

    #[test]
    fn indivisible_input_rejected_before_compute() {
        let cfg = tiny();
        let p = init_params(&cfg, 0).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape).unwrap();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 3, 48, 64))).unwrap();
        let before = tape.len();
        assert!(encoder_forward(&mut tape, x, &bound, &cfg).is_err());
        assert_eq!(tape.len(), before);
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let cfg = tiny();
        let p = init_params(&cfg, 3).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape).unwrap();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 3, 32, 32))).unwrap();
        let levels = encoder_forward(&mut tape, x, &bound, &cfg).unwrap();
        for v in levels.values() {
            assert!(tape.value(*v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn shared_layers_match_between_variants() {
        let fam = init_params(&tiny(), 9).unwrap();
        let plain = init_params(
            &ModelConfig {
                use_fam: false,
                ..tiny()
            },
            9,
        )
        .unwrap();
        assert!(plain.len() < fam.len());
        for (name, t) in plain.iter() {
            assert_eq!(fam.get(name), Some(t), "{name}");
        }
    }

    #[test]
    fn every_parameter_receives_gradient_at_init() {
        use crate::train::{total_loss, TrainConfig};
        use rand::Rng;
        let cfg = tiny();
        let p = init_params(&cfg, 5).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape).unwrap();
        let x = tape.constant(image(2, 64, 5)).unwrap();
        let out = model_forward(&mut tape, x, &bound, &cfg, Mode::Train).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let labels: Vec<u8> = (0..2 * 64 * 64).map(|_| r.gen_range(0..3)).collect();
        let tc = TrainConfig {
            ohem_keep_frac: 1.0,
            ..TrainConfig::default()
        };
        let loss = total_loss(&mut tape, &out, &labels, &tc).unwrap();
        tape.backward(loss.total).unwrap();
        let grads = bound.grads(&tape);
        for (name, g) in grads.iter() {
            let nonzero = g.data().iter().any(|&v| v != 0.0);
            // Behind a zero-initialised output conv the hidden flow layer
            // cannot receive gradient yet.
            let hidden_flow = name.contains(".flow") && !name.contains(&format!(".flow{}", cfg.fam.n_layers));
            assert_eq!(nonzero, !hidden_flow, "{name}");
        }
    }

    #[test]
    fn eval_mode_ignores_aux_heads() {
        let cfg = tiny();
        let p = init_params(&cfg, 4).unwrap();
        let mut q = p.clone();
        for (name, t) in q.iter_mut() {
            if name.starts_with("aux") {
                *t = Tensor::full(t.shape(), 3.0);
            }
        }
        let x = image(1, 32, 2);
        assert_eq!(predict(&p, &cfg, &x).unwrap(), predict(&q, &cfg, &x).unwrap());
    }

    #[test]
    fn config_validation_collects_every_problem() {
        let bad = ModelConfig {
            stage_channels: vec![6, 8, 8],
            ppm_bins: vec![3, 2],
            num_classes: 1,
            ..ModelConfig::default()
        };
        let errs = bad.validate();
        assert!(errs.len() >= 4, "{errs:?}");
    }

    #[test]
    fn conv_flops_hand_formula() {
        assert_eq!(conv_flops(64, 64, 3, 128, 128), 1_207_959_552);
        assert_eq!(conv_flops(64, 64, 3, 128, 128), 9 * conv_flops(64, 64, 1, 128, 128));
    }

    #[test]
    fn analytic_flops_match_executed_flops() {
        for cfg in [
            tiny(),
            ModelConfig {
                use_fam: false,
                ..tiny()
            },
            ModelConfig {
                use_ppm: false,
                ..tiny()
            },
            ModelConfig {
                ppm_bins: vec![1, 2, 3, 6],
                ..tiny()
            },
        ] {
            let p = init_params(&cfg, 0).unwrap();
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape).unwrap();
            let x = tape.constant(image(2, 64, 0)).unwrap();
            model_forward(&mut tape, x, &bound, &cfg, Mode::Eval).unwrap();
            let report = count_flops(&cfg, Shape::new(2, 3, 64, 64)).unwrap();
            assert_eq!(report.total, tape.flops(), "{cfg:?}");
        }
    }
}

//! The detector: a small convolutional backbone, a three-level feature
//! pyramid, channel decomposition of selected levels into object and
//! non-object halves, a projector mapping object features to the text
//! embedding space, and a dense detection head.
//!
//! The decomposition is a positional channel split; training pressure from
//! the alignment and disentanglement losses gives the halves their meaning.
//! The head is built for the object half's channel count, so a non-object
//! map cannot even be wired in by mistake, and inference never evaluates
//! the projector or the text encoder.

use serde::{Deserialize, Serialize};

use crate::caption::CaptionRecord;
use crate::data::rng_for;
use crate::error::{Error, Result};
use crate::tensor::{BnStats, ParamId, ParamKind, ParamStore, Tape, Tensor};
use rand::Rng;

/// Pyramid level at stride 8, 16 or 32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    P3,
    P4,
    P5,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::P3, Level::P4, Level::P5];

    pub fn stride(self) -> usize {
        match self {
            Level::P3 => 8,
            Level::P4 => 16,
            Level::P5 => 32,
        }
    }

    /// One square box prior per level; (16, 48, 112) at image size 128.
    pub fn prior(self, image_size: usize) -> f64 {
        let s = image_size as f64;
        match self {
            Level::P3 => 0.125 * s,
            Level::P4 => 0.375 * s,
            Level::P5 => 0.875 * s,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::P3 => "p3",
            Level::P4 => "p4",
            Level::P5 => "p5",
        }
    }
}

/// Which features feed the detection head on decomposed levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadSource {
    Obj,
    Nobj,
    Concat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Object-feature channel count; also the text embedding length.
    pub l: usize,
    pub decompose_levels: Vec<Level>,
    /// Object fraction of the 2L channels on decomposed levels.
    pub ratio: f64,
    pub pool_s: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub cbr_kernel: usize,
    pub head_source: HeadSource,
    pub symmetric_al: bool,
    pub abs_ds: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            l: 32,
            decompose_levels: vec![Level::P3, Level::P4],
            ratio: 0.5,
            pool_s: 4,
            heads: 2,
            num_classes: 3,
            image_size: 128,
            tau: 0.07,
            alpha: 1.0,
            beta: 1.0,
            cbr_kernel: 1,
            head_source: HeadSource::Obj,
            symmetric_al: false,
            abs_ds: false,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn l_obj(&self) -> usize {
        (2.0 * self.l as f64 * self.ratio).round() as usize
    }

    pub fn l_nobj(&self) -> usize {
        2 * self.l - self.l_obj()
    }

    pub fn is_decomposed(&self, level: Level) -> bool {
        self.decompose_levels.contains(&level)
    }

    /// Channel width of a pyramid level's output map.
    pub fn level_channels(&self, level: Level) -> usize {
        if self.is_decomposed(level) {
            2 * self.l
        } else {
            self.l
        }
    }

    /// Channel count entering the head at a level.
    pub fn head_in_channels(&self, level: Level) -> usize {
        if !self.is_decomposed(level) {
            return self.l;
        }
        match self.head_source {
            HeadSource::Obj => self.l_obj(),
            HeadSource::Nobj => self.l_nobj(),
            HeadSource::Concat => 2 * self.l,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l < 8 || self.l % 2 != 0 {
            return Err(Error::config(format!("l must be an even number >= 8, got {}", self.l)));
        }
        if self.heads == 0 || self.l % self.heads != 0 {
            return Err(Error::config(format!("l {} not divisible by heads {}", self.l, self.heads)));
        }
        if !(0.0 < self.ratio && self.ratio < 1.0) {
            return Err(Error::config(format!("ratio {} outside (0, 1)", self.ratio)));
        }
        if self.l_obj() == 0 || self.l_nobj() == 0 {
            return Err(Error::config(format!(
                "ratio {} leaves an empty half ({}/{})",
                self.ratio,
                self.l_obj(),
                self.l_nobj()
            )));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::config(format!(
                "image_size {} must be divisible by 32",
                self.image_size
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive".to_string()));
        }
        if self.cbr_kernel != 1 && self.cbr_kernel != 3 {
            return Err(Error::config(format!("cbr_kernel {} not in {{1, 3}}", self.cbr_kernel)));
        }
        if self.tau <= 0.0 {
            return Err(Error::config(format!("tau {} must be positive", self.tau)));
        }
        for &lv in &self.decompose_levels {
            let map = self.image_size / lv.stride();
            if self.pool_s == 0 || self.pool_s > map {
                return Err(Error::config(format!(
                    "pool_s {} outside 1..={} for decomposed level {}",
                    self.pool_s,
                    map,
                    lv.name()
                )));
            }
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

// ── layers ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone)]
struct ConvBnBlock {
    conv: Conv,
    bn: Bn,
}

#[derive(Debug, Clone)]
struct Projector {
    level: Level,
    cbr_conv: Conv,
    cbr_bn: Bn,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone)]
struct HeadBranch {
    c1: Conv,
    c2: Conv,
    obj: Conv,
    cls: Conv,
    boxr: Conv,
}

/// Forward mode: batch statistics + running update, batch statistics
/// without update (for gradient checks), or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FwdMode {
    Train,
    TrainFrozen,
    Eval,
}

impl FwdMode {
    fn bn_training(self) -> bool {
        matches!(self, FwdMode::Train | FwdMode::TrainFrozen)
    }

    fn bn_update(self) -> bool {
        matches!(self, FwdMode::Train)
    }
}

struct BnUpdate {
    mean: ParamId,
    var: ParamId,
    new_mean: Vec<f64>,
    new_var: Vec<f64>,
}

// ── prediction containers ──────────────────────────────────────────────────

/// Per-level dense outputs as tape handles (differentiable).
pub struct LevelPred {
    pub level: Level,
    /// `[B, 1, h, w]` objectness logits.
    pub obj: Tensor,
    /// `[B, C, h, w]` class logits.
    pub cls: Tensor,
    /// `[B, 4, h, w]` box regressors: sigmoid in-cell center offsets and
    /// log sizes relative to the level prior.
    pub boxr: Tensor,
}

pub struct DensePrediction {
    pub levels: Vec<LevelPred>,
}

/// Extracted (plain data) form of a prediction, used by evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPredData {
    pub level: Level,
    pub h: usize,
    pub w: usize,
    pub obj: Vec<f64>,
    pub cls: Vec<f64>,
    pub boxr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensePredData {
    pub batch: usize,
    pub num_classes: usize,
    pub levels: Vec<LevelPredData>,
}

impl DensePrediction {
    pub fn extract(&self, tape: &Tape, batch: usize, num_classes: usize) -> DensePredData {
        let levels = self
            .levels
            .iter()
            .map(|lp| {
                let s = lp.obj.shape();
                LevelPredData {
                    level: lp.level,
                    h: s[2],
                    w: s[3],
                    obj: tape.data(&lp.obj).to_vec(),
                    cls: tape.data(&lp.cls).to_vec(),
                    boxr: tape.data(&lp.boxr).to_vec(),
                }
            })
            .collect();
        DensePredData { batch, num_classes, levels }
    }
}

/// One decomposed level's original map and its halves.
pub struct DecomposedLevel {
    pub level: Level,
    pub f_ori: Tensor,
    pub f_obj: Tensor,
    pub f_nobj: Tensor,
}

/// Everything a training step needs from the forward pass.
pub struct TrainForward {
    pub pred: DensePrediction,
    pub decomposed: Vec<DecomposedLevel>,
    /// `[B, L]` image object embedding (mean of per-level projections).
    pub obj_embed: Tensor,
    /// `[B, L]` frozen text embeddings (no gradient).
    pub text_embed: Tensor,
}

// ── the model ──────────────────────────────────────────────────────────────

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    backbone: Vec<ConvBnBlock>,
    fpn_lateral: Vec<Conv>,
    fpn_smooth: Vec<Conv>,
    projectors: Vec<Projector>,
    head: Vec<HeadBranch>,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: rand_chacha::ChaCha8Rng,
}

impl<'a> Init<'a> {
    fn randn(&mut self) -> f64 {
        // Box-Muller; fixed scheme keeps initialization platform-stable
        let u1: f64 = self.rng.gen::<f64>().max(1e-300);
        let u2: f64 = self.rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize, stride: usize, pad: usize) -> Conv {
        self.conv_with_bias(name, c_out, c_in, k, stride, pad, 0.0)
    }

    fn conv_with_bias(
        &mut self,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias_init: f64,
    ) -> Conv {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let w: Vec<f64> = (0..c_out * c_in * k * k).map(|_| self.randn() * std).collect();
        let wid = self.store.register(&format!("{}.weight", name), &[c_out, c_in, k, k], w, ParamKind::Weight);
        let bid = self.store.register(
            &format!("{}.bias", name),
            &[c_out],
            vec![bias_init; c_out],
            ParamKind::Weight,
        );
        Conv { w: wid, b: bid, stride, pad }
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn {
        let gamma = self.store.register(&format!("{}.gamma", name), &[c], vec![1.0; c], ParamKind::Weight);
        let beta = self.store.register(&format!("{}.beta", name), &[c], vec![0.0; c], ParamKind::Weight);
        let mean =
            self.store.register(&format!("{}.running_mean", name), &[c], vec![0.0; c], ParamKind::Buffer);
        let var =
            self.store.register(&format!("{}.running_var", name), &[c], vec![1.0; c], ParamKind::Buffer);
        Bn { gamma, beta, mean, var }
    }

    fn linear(&mut self, name: &str, d_out: usize, d_in: usize) -> (ParamId, ParamId) {
        let std = (1.0 / d_in as f64).sqrt();
        let w: Vec<f64> = (0..d_out * d_in).map(|_| self.randn() * std).collect();
        let wid = self.store.register(&format!("{}.weight", name), &[d_out, d_in], w, ParamKind::Weight);
        let bid =
            self.store.register(&format!("{}.bias", name), &[d_out], vec![0.0; d_out], ParamKind::Weight);
        (wid, bid)
    }
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init { store: &mut params, rng: rng_for(seed, 0x6d6f_64656c_0000) };
        let l = cfg.l;

        // backbone: stem (/2) then four stride-2 blocks; taps after the
        // blocks at strides 8, 16, 32 with widths (L, 2L, 2L)
        let widths = [(1, l / 2), (l / 2, l), (l, l), (l, 2 * l), (2 * l, 2 * l)];
        let names = ["stem", "b1", "b2", "b3", "b4"];
        let mut backbone = Vec::new();
        for ((cin, cout), name) in widths.iter().zip(names.iter()) {
            let conv = init.conv(&format!("backbone.{}.conv", name), *cout, *cin, 3, 2, 1);
            let bn = init.bn(&format!("backbone.{}.bn", name), *cout);
            backbone.push(ConvBnBlock { conv, bn });
        }

        // FPN: 1x1 laterals to a uniform 2L top-down width, then a 3x3
        // smoothing conv per level mapping to the level's final width
        let tap_widths = [l, 2 * l, 2 * l];
        let mut fpn_lateral = Vec::new();
        let mut fpn_smooth = Vec::new();
        for (i, lv) in Level::ALL.iter().enumerate() {
            fpn_lateral.push(init.conv(&format!("fpn.lateral.{}", lv.name()), 2 * l, tap_widths[i], 1, 1, 0));
        }
        for lv in Level::ALL {
            let out = cfg.level_channels(lv);
            fpn_smooth.push(init.conv(&format!("fpn.smooth.{}", lv.name()), out, 2 * l, 3, 1, 1));
        }

        // per-decomposed-level projector
        let mut projectors = Vec::new();
        for lv in Level::ALL {
            if !cfg.is_decomposed(lv) {
                continue;
            }
            let k = cfg.cbr_kernel;
            let base = format!("proj.{}", lv.name());
            let cbr_conv = init.conv(&format!("{}.cbr.conv", base), l, cfg.l_obj(), k, 1, k / 2);
            let cbr_bn = init.bn(&format!("{}.cbr.bn", base), l);
            let (wq, bq) = init.linear(&format!("{}.attn.q", base), l, l);
            let (wk, bk) = init.linear(&format!("{}.attn.k", base), l, l);
            let (wv, bv) = init.linear(&format!("{}.attn.v", base), l, l);
            let (wo, bo) = init.linear(&format!("{}.attn.o", base), l, l);
            projectors.push(Projector { level: lv, cbr_conv, cbr_bn, wq, bq, wk, bk, wv, bv, wo, bo });
        }

        // dense head: per-level weights, shared structure
        let mut head = Vec::new();
        for lv in Level::ALL {
            let cin = cfg.head_in_channels(lv);
            let base = format!("head.{}", lv.name());
            let c1 = init.conv(&format!("{}.c1", base), l, cin, 3, 1, 1);
            let c2 = init.conv(&format!("{}.c2", base), l, l, 3, 1, 1);
            // objectness bias starts negative: most cells are background
            let obj = init.conv_with_bias(&format!("{}.obj", base), 1, l, 1, 1, 0, -2.0);
            let cls = init.conv(&format!("{}.cls", base), cfg.num_classes, l, 1, 1, 0);
            let boxr = init.conv(&format!("{}.box", base), 4, l, 1, 1, 0);
            head.push(HeadBranch { c1, c2, obj, cls, boxr });
        }

        Ok(Model { cfg, params, backbone, fpn_lateral, fpn_smooth, projectors, head })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_weights()
    }

    // ── forward pieces ─────────────────────────────────────────────────

    fn apply_conv(&self, tape: &mut Tape, x: &Tensor, conv: &Conv) -> Result<Tensor> {
        let w = tape.param(&self.params, conv.w);
        let b = tape.param(&self.params, conv.b);
        tape.conv2d(x, &w, &b, conv.stride, conv.pad)
    }

    fn apply_bn(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        bn: &Bn,
        mode: FwdMode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Tensor> {
        let gamma = tape.param(&self.params, bn.gamma);
        let beta = tape.param(&self.params, bn.beta);
        let mut stats = BnStats {
            mean: self.params.get(bn.mean).data.clone(),
            var: self.params.get(bn.var).data.clone(),
        };
        let out = tape.batch_norm2d(
            x,
            &gamma,
            &beta,
            &mut stats,
            mode.bn_training(),
            mode.bn_update(),
            self.cfg.bn_eps,
            self.cfg.bn_momentum,
        )?;
        if mode.bn_update() {
            updates.push(BnUpdate { mean: bn.mean, var: bn.var, new_mean: stats.mean, new_var: stats.var });
        }
        Ok(out)
    }

    fn conv_bn_relu(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        block: &ConvBnBlock,
        mode: FwdMode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Tensor> {
        let c = self.apply_conv(tape, x, &block.conv)?;
        let n = self.apply_bn(tape, &c, &block.bn, mode, updates)?;
        Ok(tape.relu(&n))
    }

    /// Backbone stage features at strides 8, 16, 32.
    fn backbone_forward(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        mode: FwdMode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let (_, _, h, w) = images.dims4();
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::config(format!("input {}x{} not divisible by 32", h, w)));
        }
        let mut x = images.clone();
        let mut taps = Vec::new();
        for (i, block) in self.backbone.iter().enumerate() {
            x = self.conv_bn_relu(tape, &x, block, mode, updates)?;
            if i >= 2 {
                taps.push(x.clone());
            }
        }
        let mut it = taps.into_iter();
        Ok((it.next().unwrap(), it.next().unwrap(), it.next().unwrap()))
    }

    /// FPN top-down pathway at uniform 2L width, then per-level smoothing
    /// to the level's configured output width.
    fn fpn_forward(
        &self,
        tape: &mut Tape,
        c3: &Tensor,
        c4: &Tensor,
        c5: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let l3 = self.apply_conv(tape, c3, &self.fpn_lateral[0])?;
        let l4 = self.apply_conv(tape, c4, &self.fpn_lateral[1])?;
        let l5 = self.apply_conv(tape, c5, &self.fpn_lateral[2])?;
        let t5 = l5;
        let u5 = tape.upsample_nearest2x(&t5);
        let t4 = tape.add(&l4, &u5);
        let u4 = tape.upsample_nearest2x(&t4);
        let t3 = tape.add(&l3, &u4);
        let p3 = self.apply_conv(tape, &t3, &self.fpn_smooth[0])?;
        let p4 = self.apply_conv(tape, &t4, &self.fpn_smooth[1])?;
        let p5 = self.apply_conv(tape, &t5, &self.fpn_smooth[2])?;
        Ok((p3, p4, p5))
    }

    /// Positional channel split of a decomposed level's map.
    pub fn decompose(&self, tape: &mut Tape, f_ori: &Tensor) -> Result<(Tensor, Tensor)> {
        tape.split_dim1(f_ori, self.cfg.l_obj())
    }

    /// CBR -> adaptive pool -> self-attention -> mean: `[B, L]`.
    fn project(
        &self,
        tape: &mut Tape,
        proj: &Projector,
        f_obj: &Tensor,
        mode: FwdMode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Tensor> {
        let c = self.apply_conv(tape, f_obj, &proj.cbr_conv)?;
        let n = self.apply_bn(tape, &c, &proj.cbr_bn, mode, updates)?;
        let r = tape.relu(&n);
        let s = self.cfg.pool_s;
        let pooled = tape.adaptive_avg_pool2d(&r, s)?;
        let (b, l, _, _) = pooled.dims4();
        let seq = tape.permute(&pooled, &[0, 2, 3, 1]);
        let seq = tape.reshape(&seq, &[b, s * s, l]);
        let wq = tape.param(&self.params, proj.wq);
        let bq = tape.param(&self.params, proj.bq);
        let wk = tape.param(&self.params, proj.wk);
        let bk = tape.param(&self.params, proj.bk);
        let wv = tape.param(&self.params, proj.wv);
        let bv = tape.param(&self.params, proj.bv);
        let wo = tape.param(&self.params, proj.wo);
        let bo = tape.param(&self.params, proj.bo);
        let attended =
            tape.multi_head_self_attention(&seq, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, self.cfg.heads)?;
        Ok(tape.mean_seq(&attended))
    }

    fn head_forward(&self, tape: &mut Tape, feats: &[(Level, Tensor)]) -> Result<DensePrediction> {
        let mut levels = Vec::new();
        for (i, lv) in Level::ALL.iter().enumerate() {
            let feat = &feats.iter().find(|(l, _)| l == lv).expect("all levels present").1;
            let expect = self.cfg.head_in_channels(*lv);
            if feat.shape()[1] != expect {
                return Err(Error::config(format!(
                    "head {} expects {} input channels, got {}",
                    lv.name(),
                    expect,
                    feat.shape()[1]
                )));
            }
            let branch = &self.head[i];
            let h1 = self.apply_conv(tape, feat, &branch.c1)?;
            let h1 = tape.relu(&h1);
            let h2 = self.apply_conv(tape, &h1, &branch.c2)?;
            let h2 = tape.relu(&h2);
            let obj = self.apply_conv(tape, &h2, &branch.obj)?;
            let cls = self.apply_conv(tape, &h2, &branch.cls)?;
            let boxr = self.apply_conv(tape, &h2, &branch.boxr)?;
            levels.push(LevelPred { level: *lv, obj, cls, boxr });
        }
        Ok(DensePrediction { levels })
    }

    fn apply_bn_updates(&mut self, updates: Vec<BnUpdate>) {
        for u in updates {
            self.params.get_mut(u.mean).data = u.new_mean;
            self.params.get_mut(u.var).data = u.new_var;
        }
    }

    #[allow(clippy::type_complexity)]
    fn forward_core(
        &self,
        tape: &mut Tape,
        images: &[f64],
        batch: usize,
        mode: FwdMode,
        nobj_perturb: Option<u64>,
    ) -> Result<(DensePrediction, Vec<DecomposedLevel>, Vec<(Level, Tensor)>, Vec<BnUpdate>)> {
        let s = self.cfg.image_size;
        if images.len() != batch * s * s {
            return Err(Error::config(format!(
                "image buffer holds {} values, expected {} for batch {} of {}x{}",
                images.len(),
                batch * s * s,
                batch,
                s,
                s
            )));
        }
        let mut updates = Vec::new();
        let input = tape.constant(images.to_vec(), &[batch, 1, s, s]);
        let (c3, c4, c5) = self.backbone_forward(tape, &input, mode, &mut updates)?;
        let (p3, p4, p5) = self.fpn_forward(tape, &c3, &c4, &c5)?;

        let mut decomposed = Vec::new();
        let mut head_feats = Vec::new();
        for (lv, p) in [(Level::P3, p3), (Level::P4, p4), (Level::P5, p5)] {
            if self.cfg.is_decomposed(lv) {
                let (f_obj, f_nobj) = self.decompose(tape, &p)?;
                if let Some(seed) = nobj_perturb {
                    let mut rng = rng_for(seed, lv.stride() as u64);
                    let noise: Vec<f64> =
                        (0..f_nobj.numel()).map(|_| rng.gen::<f64>() * 10.0 - 5.0).collect();
                    tape.overwrite_data(&f_nobj, &noise);
                }
                let head_in = match self.cfg.head_source {
                    HeadSource::Obj => f_obj.clone(),
                    HeadSource::Nobj => f_nobj.clone(),
                    HeadSource::Concat => tape.concat_dim1(&f_obj, &f_nobj),
                };
                head_feats.push((lv, head_in));
                decomposed.push(DecomposedLevel { level: lv, f_ori: p, f_obj, f_nobj });
            } else {
                head_feats.push((lv, p));
            }
        }
        let pred = self.head_forward(tape, &head_feats)?;
        Ok((pred, decomposed, head_feats, updates))
    }

    fn text_leaf(&self, tape: &mut Tape, captions: &[CaptionRecord]) -> Result<Tensor> {
        let l = self.cfg.l;
        let mut flat = Vec::with_capacity(captions.len() * l);
        for c in captions {
            if c.embedding.len() != l {
                return Err(Error::config(format!(
                    "caption embedding length {} != model L {}",
                    c.embedding.len(),
                    l
                )));
            }
            flat.extend_from_slice(&c.embedding);
        }
        // frozen text path: requires_grad stays false
        Ok(tape.constant(flat, &[captions.len(), l]))
    }

    /// Full training forward: detection branch on object features plus the
    /// projected object embeddings and frozen text embeddings.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        images: &[f64],
        batch: usize,
        captions: &[CaptionRecord],
    ) -> Result<TrainForward> {
        let out = self.forward_train_mode(tape, images, batch, captions, FwdMode::Train)?;
        Ok(out)
    }

    /// Training forward without touching batch-norm running state; used by
    /// gradient checks, which need the loss to be a pure function.
    pub fn forward_train_frozen(
        &self,
        tape: &mut Tape,
        images: &[f64],
        batch: usize,
        captions: &[CaptionRecord],
    ) -> Result<TrainForward> {
        let (fwd, updates) = self.forward_train_core(tape, images, batch, captions, FwdMode::TrainFrozen)?;
        debug_assert!(updates.is_empty());
        Ok(fwd)
    }

    /// Diagnostics forward with eval-mode normalization (works at any batch
    /// size); computes the same outputs as training without gradients.
    pub fn forward_diagnostics(
        &self,
        tape: &mut Tape,
        images: &[f64],
        batch: usize,
        captions: &[CaptionRecord],
    ) -> Result<TrainForward> {
        let (fwd, _) = self.forward_train_core(tape, images, batch, captions, FwdMode::Eval)?;
        Ok(fwd)
    }

    fn forward_train_mode(
        &mut self,
        tape: &mut Tape,
        images: &[f64],
        batch: usize,
        captions: &[CaptionRecord],
        mode: FwdMode,
    ) -> Result<TrainForward> {
        let (fwd, updates) = self.forward_train_core(tape, images, batch, captions, mode)?;
        self.apply_bn_updates(updates);
        Ok(fwd)
    }

    fn forward_train_core(
        &self,
        tape: &mut Tape,
        images: &[f64],
        batch: usize,
        captions: &[CaptionRecord],
        mode: FwdMode,
    ) -> Result<(TrainForward, Vec<BnUpdate>)> {
        if captions.len() != batch {
            return Err(Error::config(format!(
                "{} captions for a batch of {} images",
                captions.len(),
                batch
            )));
        }
        if mode.bn_training() && batch < 2 {
            return Err(Error::config("training forward requires batch size >= 2".to_string()));
        }
        let (pred, decomposed, _, mut updates) = self.forward_core(tape, images, batch, mode, None)?;

        // per-level projections, averaged into one image embedding
        let mut embed: Option<Tensor> = None;
        for proj in &self.projectors {
            let lvl = decomposed
                .iter()
                .find(|d| d.level == proj.level)
                .expect("projector level is decomposed");
            let e = self.project(tape, proj, &lvl.f_obj, mode, &mut updates)?;
            embed = Some(match embed {
                None => e,
                Some(acc) => tape.add(&acc, &e),
            });
        }
        let obj_embed = match embed {
            Some(acc) => {
                let n = self.projectors.len() as f64;
                tape.scale(&acc, 1.0 / n)
            }
            None => {
                // no decomposed level: a zero embedding keeps shapes intact
                tape.constant(vec![0.0; batch * self.cfg.l], &[batch, self.cfg.l])
            }
        };
        let text_embed = self.text_leaf(tape, captions)?;
        Ok((TrainForward { pred, decomposed, obj_embed, text_embed }, updates))
    }

    /// Inference: eval-mode statistics, no gradients, no projector, no text.
    pub fn forward_infer(&self, images: &[f64], batch: usize) -> Result<DensePredData> {
        let mut tape = Tape::new_no_grad();
        let (pred, _, _, _) = self.forward_core(&mut tape, images, batch, FwdMode::Eval, None)?;
        Ok(pred.extract(&tape, batch, self.cfg.num_classes))
    }

    /// Inference with the non-object halves overwritten by seeded noise
    /// right after the split. Detections must be bit-identical to
    /// [`Model::forward_infer`]; nothing downstream reads those channels.
    pub fn forward_infer_perturb_nobj(&self, images: &[f64], batch: usize, seed: u64) -> Result<DensePredData> {
        let mut tape = Tape::new_no_grad();
        let (pred, _, _, _) = self.forward_core(&mut tape, images, batch, FwdMode::Eval, Some(seed))?;
        Ok(pred.extract(&tape, batch, self.cfg.num_classes))
    }

    /// Eval-mode forward keeping the tape alive; used by diagnostics that
    /// inspect decomposed feature maps.
    pub fn forward_features_eval(
        &self,
        tape: &mut Tape,
        images: &[f64],
        batch: usize,
    ) -> Result<(DensePrediction, Vec<DecomposedLevel>)> {
        let (pred, decomposed, _, _) = self.forward_core(tape, images, batch, FwdMode::Eval, None)?;
        Ok((pred, decomposed))
    }

    // ── checkpointing ──────────────────────────────────────────────────

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.params.save(path, &self.cfg.to_json_line())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (config_line, entries) = ParamStore::read_checkpoint(path)?;
        let cfg: ModelConfig = serde_json::from_str(&config_line)
            .map_err(|e| Error::parse(path.display().to_string(), format!("bad embedded config: {}", e)))?;
        let mut model = Model::new(cfg, 0)?;
        model.params.load_entries(&entries, &path.display().to_string())?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::{caption_record, HashEncoder};
    use crate::data::{generate_dataset, SceneSpec};

    fn small_cfg() -> ModelConfig {
        ModelConfig { l: 16, image_size: 64, num_classes: 3, ..Default::default() }
    }

    fn batch_for(model_cfg: &ModelConfig, n: usize) -> (Vec<f64>, Vec<CaptionRecord>) {
        let spec = SceneSpec::default_for_size(model_cfg.image_size, 3);
        let ds = generate_dataset(&spec, 0, n);
        let enc = HashEncoder::new(model_cfg.l).unwrap();
        let mut images = Vec::new();
        let mut captions = Vec::new();
        for img in &ds.images {
            images.extend_from_slice(&img.pixels);
            captions
                .push(caption_record(&img.boxes, img.width, img.height, &ds.categories, &enc).unwrap());
        }
        (images, captions)
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { ratio: 0.0, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { l: 30, heads: 4, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { image_size: 100, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { cbr_kernel: 2, ..Default::default() }.validate().is_err());
        // pool_s too big for P4 at image 64 (map is 4x4) is fine at 4, not 5
        assert!(ModelConfig { pool_s: 5, image_size: 64, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn decompose_split_points() {
        let cfg = ModelConfig::default(); // 2L = 64
        assert_eq!(cfg.l_obj(), 32);
        assert_eq!(cfg.l_nobj(), 32);
        let cfg = ModelConfig { ratio: 0.25, ..Default::default() };
        assert_eq!(cfg.l_obj(), 16);
        assert_eq!(cfg.l_nobj(), 48);
    }

    #[test]
    fn backbone_and_fpn_shapes_at_128() {
        let cfg = ModelConfig::default();
        let mut model = Model::new(cfg, 42).unwrap();
        let (images, captions) = batch_for(&model.cfg, 2);
        let mut tape = Tape::new();
        let fwd = model.forward_train(&mut tape, &images, 2, &captions).unwrap();
        let shapes: Vec<Vec<usize>> =
            fwd.decomposed.iter().map(|d| d.f_ori.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 64, 16, 16], vec![2, 64, 8, 8]]);
        // p5 feeds the head with L channels at 4x4
        let p5 = fwd.pred.levels.iter().find(|l| l.level == Level::P5).unwrap();
        assert_eq!(p5.obj.shape(), &[2, 1, 4, 4]);
        assert_eq!(fwd.obj_embed.shape(), &[2, 32]);
        assert_eq!(fwd.text_embed.shape(), &[2, 32]);
        assert!(!tape.requires_grad(&fwd.text_embed));
    }

    #[test]
    fn prediction_shapes_per_level() {
        let cfg = small_cfg();
        let mut model = Model::new(cfg, 1).unwrap();
        let (images, captions) = batch_for(&model.cfg, 4);
        let mut tape = Tape::new();
        let fwd = model.forward_train(&mut tape, &images, 4, &captions).unwrap();
        for lp in &fwd.pred.levels {
            let hw = 64 / lp.level.stride();
            assert_eq!(lp.obj.shape(), &[4, 1, hw, hw]);
            assert_eq!(lp.cls.shape(), &[4, 3, hw, hw]);
            assert_eq!(lp.boxr.shape(), &[4, 4, hw, hw]);
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = small_cfg();
        let model = Model::new(cfg.clone(), 0).unwrap();
        let l = cfg.l;
        let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
        let bn = |c: usize| 2 * c;
        // backbone
        let mut expect = 0;
        for (cin, cout) in [(1, l / 2), (l / 2, l), (l, l), (l, 2 * l), (2 * l, 2 * l)] {
            expect += conv(cout, cin, 3) + bn(cout);
        }
        // fpn
        for cin in [l, 2 * l, 2 * l] {
            expect += conv(2 * l, cin, 1);
        }
        for lv in Level::ALL {
            expect += conv(cfg.level_channels(lv), 2 * l, 3);
        }
        // projectors (P3, P4)
        for _ in 0..2 {
            expect += conv(l, cfg.l_obj(), cfg.cbr_kernel) + bn(l);
            expect += 4 * (l * l + l);
        }
        // head
        for lv in Level::ALL {
            let cin = cfg.head_in_channels(lv);
            expect += conv(l, cin, 3) + conv(l, l, 3);
            expect += conv(1, l, 1) + conv(cfg.num_classes, l, 1) + conv(4, l, 1);
        }
        assert_eq!(model.parameter_count(), expect);
    }

    #[test]
    fn zero_input_produces_finite_outputs() {
        let cfg = small_cfg();
        let mut model = Model::new(cfg, 9).unwrap();
        let images = vec![0.0; 2 * 64 * 64];
        let enc = HashEncoder::new(16).unwrap();
        let captions: Vec<CaptionRecord> = (0..2)
            .map(|_| caption_record(&[], 64, 64, &["person".to_string()], &enc).unwrap())
            .collect();
        let mut tape = Tape::new();
        let fwd = model.forward_train(&mut tape, &images, 2, &captions).unwrap();
        for lp in &fwd.pred.levels {
            assert!(tape.data(&lp.obj).iter().all(|v| v.is_finite()));
            assert!(tape.data(&lp.cls).iter().all(|v| v.is_finite()));
        }
        assert!(tape.data(&fwd.obj_embed).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn same_seed_same_init_and_forward() {
        let cfg = small_cfg();
        let a = Model::new(cfg.clone(), 42).unwrap();
        let b = Model::new(cfg, 42).unwrap();
        for (p, q) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.data, q.data);
        }
        let (images, _) = batch_for(&a.cfg, 2);
        let pa = a.forward_infer(&images, 2).unwrap();
        let pb = b.forward_infer(&images, 2).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn concat_of_halves_reproduces_original_exactly() {
        let cfg = small_cfg();
        let mut model = Model::new(cfg, 7).unwrap();
        let (images, captions) = batch_for(&model.cfg, 2);
        let mut tape = Tape::new();
        let fwd = model.forward_train(&mut tape, &images, 2, &captions).unwrap();
        for d in &fwd.decomposed {
            let back = tape.concat_dim1(&d.f_obj, &d.f_nobj);
            assert_eq!(tape.data(&back), tape.data(&d.f_ori));
        }
    }

    #[test]
    fn infer_matches_train_detection_branch_in_eval_mode() {
        let cfg = small_cfg();
        let mut model = Model::new(cfg, 3).unwrap();
        let (images, captions) = batch_for(&model.cfg, 2);
        // burn in some running stats first
        let mut tape = Tape::new();
        let _ = model.forward_train(&mut tape, &images, 2, &captions).unwrap();

        let infer = model.forward_infer(&images, 2).unwrap();
        let mut tape2 = Tape::new_no_grad();
        let diag = model.forward_diagnostics(&mut tape2, &images, 2, &captions).unwrap();
        let from_train = diag.pred.extract(&tape2, 2, model.cfg.num_classes);
        assert_eq!(infer, from_train);
    }

    #[test]
    fn perturbing_nobj_cannot_change_detections() {
        let cfg = small_cfg();
        let model = Model::new(cfg, 5).unwrap();
        let spec = SceneSpec::default_for_size(64, 11);
        let ds = generate_dataset(&spec, 0, 1);
        let clean = model.forward_infer(&ds.images[0].pixels, 1).unwrap();
        let noisy = model.forward_infer_perturb_nobj(&ds.images[0].pixels, 1, 999).unwrap();
        assert_eq!(clean, noisy);
    }

    #[test]
    fn nobj_head_arm_uses_nobj_channels() {
        let cfg = ModelConfig { head_source: HeadSource::Nobj, ratio: 0.25, ..small_cfg() };
        assert_eq!(cfg.head_in_channels(Level::P3), cfg.l_nobj());
        let cfg = ModelConfig { head_source: HeadSource::Concat, ..small_cfg() };
        assert_eq!(cfg.head_in_channels(Level::P3), 2 * cfg.l);
        // the obj default keeps head input strictly below 2L
        let cfg = small_cfg();
        assert!(cfg.head_in_channels(Level::P3) < 2 * cfg.l);
    }

    #[test]
    fn gradient_reaches_object_features_through_projector() {
        let cfg = small_cfg();
        let mut model = Model::new(cfg, 13).unwrap();
        let (images, captions) = batch_for(&model.cfg, 2);
        let mut tape = Tape::new();
        let fwd = model.forward_train(&mut tape, &images, 2, &captions).unwrap();
        let s = tape.sum_all(&fwd.obj_embed);
        tape.backward(&s).unwrap();
        let g = tape.grad(&fwd.decomposed[0].f_obj).expect("grad flows to f_obj");
        assert!(g.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let cfg = small_cfg();
        let mut model = Model::new(cfg, 21).unwrap();
        let (images, captions) = batch_for(&model.cfg, 2);
        let mut tape = Tape::new();
        let _ = model.forward_train(&mut tape, &images, 2, &captions).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        for (p, q) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(p.name, q.name);
            for (a, b) in p.data.iter().zip(q.data.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{}", p.name);
            }
        }
        let pa = model.forward_infer(&images, 2).unwrap();
        let pb = loaded.forward_infer(&images, 2).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn zero_weight_head_gives_zero_logits() {
        let cfg = small_cfg();
        let mut model = Model::new(cfg, 2).unwrap();
        // zero out one head branch entirely
        let names: Vec<String> = model
            .params
            .iter()
            .filter(|p| p.name.starts_with("head.p3"))
            .map(|p| p.name.clone())
            .collect();
        for n in names {
            let id = model.params.iter().position(|p| p.name == n).unwrap();
            model.params.get_mut(id).data.fill(0.0);
        }
        let (images, _) = batch_for(&model.cfg, 1);
        let pred = model.forward_infer(&images[..64 * 64], 1).unwrap();
        let p3 = pred.levels.iter().find(|l| l.level == Level::P3).unwrap();
        assert!(p3.obj.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mismatched_caption_count_is_rejected() {
        let cfg = small_cfg();
        let mut model = Model::new(cfg, 2).unwrap();
        let (images, captions) = batch_for(&model.cfg, 2);
        let mut tape = Tape::new();
        assert!(model.forward_train(&mut tape, &images, 2, &captions[..1]).is_err());
    }
}

//! The trainable components: a small residual convolutional backbone and
//! the MLP heads stacked on top of it.
//!
//! | component        | maps                 | role                                  |
//! |------------------|----------------------|---------------------------------------|
//! | `backbone`       | image → ℝ^D          | visual encoder, probed after training |
//! | `inv_head`       | ℝ^D → ℝ^P            | invariance projection, shared by views|
//! | `action_encoder` | ℝ^A → ℝ^P            | embeds the raw action vector          |
//! | `pair_head`      | ℝ^{2D} → ℝ^P         | embeds `concat(h_t, h_t')`            |
//! | `equi_predictor` | ℝ^{P+A} → ℝ^P        | predicts `z_t'` from `(z_t, a)`       |
//! | `inverse_head`   | ℝ^{2D} → ℝ^A         | regresses the normalized action       |
//! | `classifier`     | ℝ^D → ℝ^K            | supervised baseline only              |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, relu_backward_inplace, relu_inplace, BatchNorm,
    Conv2d, FeatureMap, Linear, Matrix, Module, Param,
};

/// Batch-statistics layers inside heads fall back to per-sample
/// normalization below this many rows.
pub const MIN_BATCH_FOR_BATCH_STATS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Channels of the patchifying stem.
    pub stem_channels: usize,
    /// Stem kernel size and stride.
    pub stem_patch: usize,
    /// One entry per stage; each stage halves the resolution.
    pub stage_channels: Vec<usize>,
    /// Append a residual 3×3 block to every stage.
    pub residual_blocks: bool,
    /// Output width D.
    pub embed_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            stem_patch: 4,
            stage_channels: vec![32, 64, 128, 256],
            residual_blocks: true,
            embed_dim: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub output_dim: usize,
}

impl Default for HeadConfig {
    /// Linear(256) → BatchNorm → ReLU → Linear(128).
    fn default() -> Self {
        Self {
            hidden_layers: 1,
            hidden_width: 256,
            output_dim: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub backbone: BackboneConfig,
    pub inv_head: HeadConfig,
    /// Shared by the action encoder, the pair head and the predictors.
    pub action_head: HeadConfig,
    /// Flat action width A (2 for yaw, 8 for pose).
    pub action_dim: usize,
    pub equi_predictor: bool,
    pub inverse_head: bool,
    pub num_classes: Option<usize>,
}

impl ModelConfig {
    pub fn new(image_size: usize, action_dim: usize) -> Self {
        Self {
            image_size,
            backbone: BackboneConfig::default(),
            inv_head: HeadConfig::default(),
            action_head: HeadConfig::default(),
            action_dim,
            equi_predictor: false,
            inverse_head: false,
            num_classes: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.inv_head.output_dim != self.action_head.output_dim {
            return bad("invariance and action heads must agree on the projection width P");
        }
        for h in [&self.inv_head, &self.action_head] {
            if h.output_dim == 0 || (h.hidden_layers > 0 && h.hidden_width == 0) {
                return bad("head widths must be positive");
            }
        }
        let b = &self.backbone;
        if b.stem_channels == 0 || b.embed_dim == 0 || b.stage_channels.iter().any(|&c| c == 0) {
            return bad("backbone widths must be positive");
        }
        if b.stem_patch == 0 || self.image_size % b.stem_patch != 0 {
            return bad("image size must be a multiple of the stem patch");
        }
        if self.action_dim == 0 {
            return bad("action dimension must be positive");
        }
        Ok(())
    }

    /// Content hash of the architecture; checkpoints refuse to load into a
    /// bundle with a different fingerprint.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

// ---------------------------------------------------------------------------
// Backbone pieces

#[derive(Clone, Debug)]
struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm,
    out: Option<Matrix>,
}

impl ConvBnRelu {
    fn new(cin: usize, cout: usize, k: usize, s: usize, p: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, k, s, p, rng),
            bn: BatchNorm::new(cout),
            out: None,
        }
    }

    fn forward_eval(&self, x: &FeatureMap) -> FeatureMap {
        let mut y = self.conv.forward_eval(x);
        y.data = self.bn.forward_eval(&y.data);
        relu_inplace(&mut y.data);
        y
    }

    fn forward_train(&mut self, x: &FeatureMap) -> FeatureMap {
        let mut y = self.conv.forward_train(x);
        y.data = self.bn.forward_train(&y.data);
        relu_inplace(&mut y.data);
        self.out = Some(y.data.clone());
        y
    }

    fn backward(&mut self, dy: FeatureMap, need_input_grad: bool) -> Option<FeatureMap> {
        let out = self.out.take().expect("backward without forward");
        let mut d = dy;
        relu_backward_inplace(&mut d.data, &out);
        d.data = self.bn.backward(&d.data);
        self.conv.backward(&d, need_input_grad)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_mut(&format!("{prefix}.conv"), f);
        self.bn.visit_mut(&format!("{prefix}.bn"), f);
    }
}

/// `y = relu(x + bn(conv3x3(x)))`.
#[derive(Clone, Debug)]
struct ResBlock {
    conv: Conv2d,
    bn: BatchNorm,
    out: Option<Matrix>,
}

impl ResBlock {
    fn new(c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(c, c, 3, 1, 1, rng),
            bn: BatchNorm::new(c),
            out: None,
        }
    }

    fn forward_eval(&self, x: &FeatureMap) -> FeatureMap {
        let mut y = self.conv.forward_eval(x);
        y.data = self.bn.forward_eval(&y.data);
        y.data.add_assign(&x.data);
        relu_inplace(&mut y.data);
        y
    }

    fn forward_train(&mut self, x: &FeatureMap) -> FeatureMap {
        let mut y = self.conv.forward_train(x);
        y.data = self.bn.forward_train(&y.data);
        y.data.add_assign(&x.data);
        relu_inplace(&mut y.data);
        self.out = Some(y.data.clone());
        y
    }

    fn backward(&mut self, dy: FeatureMap) -> FeatureMap {
        let out = self.out.take().expect("backward without forward");
        let mut d = dy;
        relu_backward_inplace(&mut d.data, &out);
        let mut branch = d.clone();
        branch.data = self.bn.backward(&branch.data);
        let mut dx = self.conv.backward(&branch, true).expect("input grad");
        dx.data.add_assign(&d.data);
        dx
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: ConvBnRelu,
    block: Option<ResBlock>,
}

/// Patchifying stem, strided stages with optional residual blocks, global
/// average pooling and a final linear embedding to width D.
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: ConvBnRelu,
    stages: Vec<Stage>,
    pub embed: Linear,
    pooled: Option<(usize, usize)>,
}

impl Backbone {
    fn new(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let stem = ConvBnRelu::new(3, cfg.stem_channels, cfg.stem_patch, cfg.stem_patch, 0, rng);
        let mut cin = cfg.stem_channels;
        let stages = cfg
            .stage_channels
            .iter()
            .map(|&c| {
                let down = ConvBnRelu::new(cin, c, 3, 2, 1, rng);
                let block = cfg.residual_blocks.then(|| ResBlock::new(c, rng));
                cin = c;
                Stage { down, block }
            })
            .collect();
        Self {
            stem,
            stages,
            embed: Linear::new(cin, cfg.embed_dim, rng),
            pooled: None,
        }
    }

    pub fn forward_eval(&self, x: &FeatureMap) -> Matrix {
        let mut y = self.stem.forward_eval(x);
        for s in &self.stages {
            y = s.down.forward_eval(&y);
            if let Some(b) = &s.block {
                y = b.forward_eval(&y);
            }
        }
        self.embed.forward_eval(&global_avg_pool(&y))
    }

    pub fn forward_train(&mut self, x: &FeatureMap) -> Matrix {
        let mut y = self.stem.forward_train(x);
        for s in &mut self.stages {
            y = s.down.forward_train(&y);
            if let Some(b) = &mut s.block {
                y = b.forward_train(&y);
            }
        }
        self.pooled = Some((y.h, y.w));
        self.embed.forward_train(&global_avg_pool(&y))
    }

    pub fn backward(&mut self, dh: &Matrix) {
        let (h, w) = self.pooled.take().expect("backward without forward");
        let dpool = self.embed.backward(dh);
        let mut d = global_avg_pool_backward(&dpool, h, w);
        for s in self.stages.iter_mut().rev() {
            if let Some(b) = &mut s.block {
                d = b.backward(d);
            }
            d = s.down.backward(d, true).expect("input grad");
        }
        self.stem.backward(d, false);
    }
}

impl Module for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stem.visit(&format!("{prefix}.stem"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.down.visit(&format!("{prefix}.stage{i}.down"), f);
            if let Some(b) = &s.block {
                b.conv.visit(&format!("{prefix}.stage{i}.block.conv"), f);
                b.bn.visit(&format!("{prefix}.stage{i}.block.bn"), f);
            }
        }
        self.embed.visit(&format!("{prefix}.embed"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_mut(&format!("{prefix}.stem"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.down.visit_mut(&format!("{prefix}.stage{i}.down"), f);
            if let Some(b) = &mut s.block {
                b.conv.visit_mut(&format!("{prefix}.stage{i}.block.conv"), f);
                b.bn.visit_mut(&format!("{prefix}.stage{i}.block.bn"), f);
            }
        }
        self.embed.visit_mut(&format!("{prefix}.embed"), f);
    }
}

// ---------------------------------------------------------------------------
// MLP heads

#[derive(Clone, Debug)]
struct Hidden {
    lin: Linear,
    bn: BatchNorm,
    out: Option<Matrix>,
}

/// `[Linear → BatchNorm → ReLU] × hidden_layers → Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub in_dim: usize,
    pub out_dim: usize,
    hidden: Vec<Hidden>,
    pub last: Linear,
}

impl Mlp {
    pub fn new(in_dim: usize, cfg: &HeadConfig, rng: &mut ChaCha8Rng) -> Self {
        Self::with_output(in_dim, cfg, cfg.output_dim, rng)
    }

    pub fn with_output(
        in_dim: usize,
        cfg: &HeadConfig,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut width = in_dim;
        let hidden = (0..cfg.hidden_layers)
            .map(|_| {
                let lin = Linear::new(width, cfg.hidden_width, rng);
                width = cfg.hidden_width;
                Hidden {
                    lin,
                    bn: BatchNorm::new(cfg.hidden_width)
                        .with_per_sample_fallback(MIN_BATCH_FOR_BATCH_STATS),
                    out: None,
                }
            })
            .collect();
        Self {
            in_dim,
            out_dim,
            hidden,
            last: Linear::new(width, out_dim, rng),
        }
    }

    pub fn hidden_layers(&self) -> usize {
        self.hidden.len()
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        if x.cols != self.in_dim {
            return Err(Error::Shape(format!(
                "head expects width {}, got {}",
                self.in_dim, x.cols
            )));
        }
        Ok(())
    }

    pub fn forward_eval(&self, x: &Matrix) -> Result<Matrix> {
        self.check(x)?;
        let mut y = x.clone();
        for h in &self.hidden {
            y = h.bn.forward_eval(&h.lin.forward_eval(&y));
            relu_inplace(&mut y);
        }
        Ok(self.last.forward_eval(&y))
    }

    /// Output of the `k`-th hidden ReLU (1-based), eval mode.
    pub fn hidden_activation(&self, x: &Matrix, k: usize) -> Result<Matrix> {
        self.check(x)?;
        if k == 0 || k > self.hidden.len() {
            return Err(Error::Shape(format!(
                "head has {} hidden layers, asked for layer {k}",
                self.hidden.len()
            )));
        }
        let mut y = x.clone();
        for h in &self.hidden[..k] {
            y = h.bn.forward_eval(&h.lin.forward_eval(&y));
            relu_inplace(&mut y);
        }
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Matrix) -> Result<Matrix> {
        self.check(x)?;
        let mut y = x.clone();
        for h in &mut self.hidden {
            y = h.lin.forward_train(&y);
            y = h.bn.forward_train(&y);
            relu_inplace(&mut y);
            h.out = Some(y.clone());
        }
        Ok(self.last.forward_train(&y))
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        match mode {
            Mode::Train => self.forward_train(x),
            Mode::Eval => self.forward_eval(x),
        }
    }

    pub fn backward(&mut self, dy: &Matrix) -> Matrix {
        let mut d = self.last.backward(dy);
        for h in self.hidden.iter_mut().rev() {
            let out = h.out.take().expect("backward without forward");
            relu_backward_inplace(&mut d, &out);
            d = h.bn.backward(&d);
            d = h.lin.backward(&d);
        }
        d
    }
}

impl Module for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, h) in self.hidden.iter().enumerate() {
            h.lin.visit(&format!("{prefix}.hidden{i}.linear"), f);
            h.bn.visit(&format!("{prefix}.hidden{i}.bn"), f);
        }
        self.last.visit(&format!("{prefix}.out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, h) in self.hidden.iter_mut().enumerate() {
            h.lin.visit_mut(&format!("{prefix}.hidden{i}.linear"), f);
            h.bn.visit_mut(&format!("{prefix}.hidden{i}.bn"), f);
        }
        self.last.visit_mut(&format!("{prefix}.out"), f);
    }
}

// ---------------------------------------------------------------------------
// Bundle

/// Selects one of the bundle's projection towers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Invariance,
    ActionEncoder,
    Pair,
}

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub inv_head: Mlp,
    pub action_encoder: Mlp,
    pub pair_head: Mlp,
    pub equi_predictor: Option<Mlp>,
    pub inverse_head: Option<Mlp>,
    pub classifier: Option<Linear>,
    pub mode: Mode,
}

impl ModelBundle {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.backbone.embed_dim;
        let p = config.inv_head.output_dim;
        let a = config.action_dim;
        let backbone = Backbone::new(&config.backbone, &mut rng);
        let inv_head = Mlp::new(d, &config.inv_head, &mut rng);
        let action_encoder = Mlp::new(a, &config.action_head, &mut rng);
        let pair_head = Mlp::new(2 * d, &config.action_head, &mut rng);
        let equi_predictor = config
            .equi_predictor
            .then(|| Mlp::new(p + a, &config.action_head, &mut rng));
        let inverse_head = config
            .inverse_head
            .then(|| Mlp::with_output(2 * d, &config.action_head, a, &mut rng));
        let classifier = config.num_classes.map(|k| Linear::new(d, k, &mut rng));
        Ok(Self {
            config,
            backbone,
            inv_head,
            action_encoder,
            pair_head,
            equi_predictor,
            inverse_head,
            classifier,
            mode: Mode::Train,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.backbone.embed_dim
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn check_images(&self, images: &FeatureMap) -> Result<()> {
        let s = self.config.image_size;
        if images.h != s || images.w != s || images.channels() != 3 {
            return Err(Error::Shape(format!(
                "expected {s}×{s}×3 images, got {}×{}×{}",
                images.h,
                images.w,
                images.channels()
            )));
        }
        Ok(())
    }

    /// `h = f(x)`. In eval mode a pure function of parameters and input.
    pub fn encode(&mut self, images: &FeatureMap) -> Result<Matrix> {
        self.check_images(images)?;
        Ok(match self.mode {
            Mode::Train => self.backbone.forward_train(images),
            Mode::Eval => self.backbone.forward_eval(images),
        })
    }

    /// Eval-mode encoding through a shared reference (safe for concurrent
    /// readers of a frozen bundle).
    pub fn encode_frozen(&self, images: &FeatureMap) -> Result<Matrix> {
        self.check_images(images)?;
        Ok(self.backbone.forward_eval(images))
    }

    /// Routes `input` through one projection tower. For [`Head::Pair`] the
    /// input must already be `concat(h_t, h_t')` in that order.
    pub fn project(&mut self, head: Head, input: &Matrix) -> Result<Matrix> {
        let mode = self.mode;
        match head {
            Head::Invariance => self.inv_head.forward(input, mode),
            Head::ActionEncoder => self.action_encoder.forward(input, mode),
            Head::Pair => self.pair_head.forward(input, mode),
        }
    }

    pub fn project_pair(&mut self, h_t: &Matrix, h_t2: &Matrix) -> Result<Matrix> {
        if h_t.rows != h_t2.rows {
            return Err(Error::Shape("pair halves differ in batch size".into()));
        }
        self.project(Head::Pair, &h_t.hcat(h_t2))
    }

    /// `ẑ_t' = predictor(concat(z_t, a))`.
    pub fn equi_predict(&mut self, z_t: &Matrix, actions: &Matrix) -> Result<Matrix> {
        let mode = self.mode;
        let pred = self
            .equi_predictor
            .as_mut()
            .ok_or(Error::MissingComponent("equivariant predictor"))?;
        if z_t.rows != actions.rows {
            return Err(Error::Shape("embedding and action batch sizes differ".into()));
        }
        pred.forward(&z_t.hcat(actions), mode)
    }

    /// `â = inverse_head(concat(h_t, h_t'))`.
    pub fn inverse_predict(&mut self, h_t: &Matrix, h_t2: &Matrix) -> Result<Matrix> {
        let mode = self.mode;
        let head = self
            .inverse_head
            .as_mut()
            .ok_or(Error::MissingComponent("inverse head"))?;
        if h_t.rows != h_t2.rows {
            return Err(Error::Shape("pair halves differ in batch size".into()));
        }
        head.forward(&h_t.hcat(h_t2), mode)
    }

    /// Parameter counts per component, in visitation order.
    pub fn parameter_report(&self) -> Vec<(String, usize)> {
        let count = |m: &dyn Module| m.num_trainable();
        let mut out = vec![
            ("backbone".to_string(), count(&self.backbone)),
            ("inv_head".to_string(), count(&self.inv_head)),
            ("action_encoder".to_string(), count(&self.action_encoder)),
            ("pair_head".to_string(), count(&self.pair_head)),
        ];
        if let Some(p) = &self.equi_predictor {
            out.push(("equi_predictor".into(), count(p)));
        }
        if let Some(p) = &self.inverse_head {
            out.push(("inverse_head".into(), count(p)));
        }
        if let Some(p) = &self.classifier {
            out.push(("classifier".into(), count(p)));
        }
        out
    }
}

impl Module for ModelBundle {
    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.backbone.visit("backbone", f);
        self.inv_head.visit("inv_head", f);
        self.action_encoder.visit("action_encoder", f);
        self.pair_head.visit("pair_head", f);
        if let Some(p) = &self.equi_predictor {
            p.visit("equi_predictor", f);
        }
        if let Some(p) = &self.inverse_head {
            p.visit("inverse_head", f);
        }
        if let Some(p) = &self.classifier {
            p.visit("classifier", f);
        }
    }

    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone.visit_mut("backbone", f);
        self.inv_head.visit_mut("inv_head", f);
        self.action_encoder.visit_mut("action_encoder", f);
        self.pair_head.visit_mut("pair_head", f);
        if let Some(p) = &mut self.equi_predictor {
            p.visit_mut("equi_predictor", f);
        }
        if let Some(p) = &mut self.inverse_head {
            p.visit_mut("inverse_head", f);
        }
        if let Some(p) = &mut self.classifier {
            p.visit_mut("classifier", f);
        }
    }
}

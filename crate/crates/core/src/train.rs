//! The optimization loop for every method, including the supervised
//! baseline.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::actions::{normalize_flat, ActionStats, DatasetStyle};
use crate::augment::AugConfig;
use crate::checkpoint::save_checkpoint;
use crate::dataset::{DatasetManifest, FrameRef};
use crate::error::{Error, IoContext, Result};
use crate::losses::{cross_entropy, equimod_loss, ciper_loss, BaseLoss, LossParams, Mat64, VicregWeights};
use crate::models::{BackboneConfig, HeadConfig, Mode, ModelBundle, ModelConfig};
use crate::nn::{AdamW, AdamWConfig, FeatureMap, Matrix, Module};
use crate::sampler::{build_batch_from, sample_positive, frame_action, PairStrategy, TripletBatch};
use crate::seed::{derive_seed, rng_for};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
/// Pairs drawn to estimate the action normalization statistics.
const ACTION_STATS_SAMPLES: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Simclr,
    SimclrTt,
    SimclrTtDirect,
    AaSimclr,
    SimclrCiper,
    SimclrEquimod,
    AaSimclrNoInv,
    Vicreg,
    VicregTt,
    VicregTtDirect,
    AaVicreg,
    VicregCiper,
    VicregEquimod,
    Supervised,
}

/// What a method optimizes besides (or instead of) the invariance term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    InvarianceOnly,
    ActionAware,
    ActionOnly,
    Ciper,
    Equimod,
    Supervised,
}

impl Method {
    pub const ALL: [Method; 14] = [
        Method::Simclr,
        Method::SimclrTt,
        Method::SimclrTtDirect,
        Method::AaSimclr,
        Method::SimclrCiper,
        Method::SimclrEquimod,
        Method::AaSimclrNoInv,
        Method::Vicreg,
        Method::VicregTt,
        Method::VicregTtDirect,
        Method::AaVicreg,
        Method::VicregCiper,
        Method::VicregEquimod,
        Method::Supervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Simclr => "simclr",
            Method::SimclrTt => "simclr_tt",
            Method::SimclrTtDirect => "simclr_tt_direct",
            Method::AaSimclr => "aa_simclr",
            Method::SimclrCiper => "simclr_ciper",
            Method::SimclrEquimod => "simclr_equimod",
            Method::AaSimclrNoInv => "aa_simclr_no_inv",
            Method::Vicreg => "vicreg",
            Method::VicregTt => "vicreg_tt",
            Method::VicregTtDirect => "vicreg_tt_direct",
            Method::AaVicreg => "aa_vicreg",
            Method::VicregCiper => "vicreg_ciper",
            Method::VicregEquimod => "vicreg_equimod",
            Method::Supervised => "supervised",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }

    pub fn base(self) -> BaseLoss {
        match self {
            Method::Vicreg
            | Method::VicregTt
            | Method::VicregTtDirect
            | Method::AaVicreg
            | Method::VicregCiper
            | Method::VicregEquimod => BaseLoss::VicReg,
            _ => BaseLoss::SimClr,
        }
    }

    pub fn objective(self) -> Objective {
        match self {
            Method::Simclr | Method::SimclrTt | Method::SimclrTtDirect => Objective::InvarianceOnly,
            Method::Vicreg | Method::VicregTt | Method::VicregTtDirect => Objective::InvarianceOnly,
            Method::AaSimclr | Method::AaVicreg => Objective::ActionAware,
            Method::AaSimclrNoInv => Objective::ActionOnly,
            Method::SimclrCiper | Method::VicregCiper => Objective::Ciper,
            Method::SimclrEquimod | Method::VicregEquimod => Objective::Equimod,
            Method::Supervised => Objective::Supervised,
        }
    }

    pub fn default_strategy(self) -> PairStrategy {
        match self {
            Method::Simclr | Method::Vicreg | Method::Supervised => PairStrategy::SelfPair,
            Method::SimclrTtDirect | Method::VicregTtDirect => PairStrategy::Adjacent,
            _ => PairStrategy::UniformClip,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `base · ½(1 + cos(π·t/(T−1)))`; the last step runs at zero.
    Cosine,
}

impl LrSchedule {
    pub fn lr(self, base: f64, step: usize, total_steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine if total_steps <= 1 => base,
            LrSchedule::Cosine => {
                let t = step as f64 / (total_steps - 1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Optional overrides of the style-dependent loss defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossOverrides {
    pub tau_i: Option<f64>,
    pub tau_a: Option<f64>,
    pub lambda: Option<f64>,
    pub vicreg_inv: Option<VicregWeights>,
    pub vicreg_action: Option<VicregWeights>,
    pub equimod_stop_grad: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    /// Triplets per step; the backbone sees twice as many images.
    pub batch_size: usize,
    /// Defaults by dataset style: 5e-4 (yaw) or 1e-3 (pose).
    pub base_lr: Option<f64>,
    /// Defaults by dataset style: constant (yaw) or cosine (pose).
    pub schedule: Option<LrSchedule>,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossOverrides,
    /// Defaults to the method's own strategy.
    pub pair_strategy: Option<PairStrategy>,
    pub aug: AugConfig,
    pub backbone: BackboneConfig,
    pub inv_head: HeadConfig,
    pub action_head: HeadConfig,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Run on a single worker thread.
    pub strict: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::AaSimclr,
            epochs: 30,
            batch_size: 64,
            base_lr: None,
            schedule: None,
            weight_decay: AdamWConfig::default().weight_decay,
            seed: 0,
            loss: LossOverrides::default(),
            pair_strategy: None,
            aug: AugConfig::default(),
            backbone: BackboneConfig::default(),
            inv_head: HeadConfig::default(),
            action_head: HeadConfig::default(),
            checkpoint_every: 0,
            strict: false,
        }
    }
}

/// A [`TrainConfig`] with every style-dependent default filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTrain {
    pub config: TrainConfig,
    pub base_lr: f64,
    pub schedule: LrSchedule,
    pub strategy: PairStrategy,
    pub loss: LossParams,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.base_lr.is_some_and(|lr| !(lr > 0.0)) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if let Some(s) = &self.pair_strategy {
            s.validate()?;
        }
        self.aug.validate()
    }

    pub fn resolve(&self, style: DatasetStyle, image_size: usize, num_classes: usize) -> Result<ResolvedTrain> {
        self.validate()?;
        let (lr, schedule) = match style {
            DatasetStyle::Yaw => (5e-4, LrSchedule::Constant),
            DatasetStyle::Pose => (1e-3, LrSchedule::Cosine),
        };
        let o = &self.loss;
        let mut loss = LossParams::for_style(self.method.base(), style);
        loss.tau_i = o.tau_i.unwrap_or(loss.tau_i);
        loss.tau_a = o.tau_a.unwrap_or(loss.tau_a);
        loss.lambda = o.lambda.unwrap_or(loss.lambda);
        loss.vicreg_inv = o.vicreg_inv.unwrap_or(loss.vicreg_inv);
        loss.vicreg_action = o.vicreg_action.unwrap_or(loss.vicreg_action);
        loss.equimod_stop_grad = o.equimod_stop_grad.unwrap_or(loss.equimod_stop_grad);
        loss.validate()?;
        let objective = self.method.objective();
        let model = ModelConfig {
            image_size,
            backbone: self.backbone.clone(),
            inv_head: self.inv_head.clone(),
            action_head: self.action_head.clone(),
            action_dim: style.action_dim(),
            equi_predictor: objective == Objective::Equimod,
            inverse_head: objective == Objective::Ciper,
            num_classes: (objective == Objective::Supervised).then_some(num_classes),
        };
        model.validate()?;
        Ok(ResolvedTrain {
            config: self.clone(),
            base_lr: self.base_lr.unwrap_or(lr),
            schedule: self.schedule.unwrap_or(schedule),
            strategy: self.pair_strategy.unwrap_or(self.method.default_strategy()),
            loss,
            model,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub inv: f64,
    pub action: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub wall_time_s: f64,
    pub param_norm: f64,
    pub mean_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Provenance of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub method: Method,
    pub seed: u64,
    pub resolved: ResolvedTrain,
    pub model_fingerprint: String,
    pub dataset_hash: String,
    pub train_frames: usize,
    pub steps_per_epoch: usize,
    pub action_stats: Option<ActionStats>,
    pub version: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl MetricsLog {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.total).collect()
    }

    pub fn read(path: &Path) -> Result<MetricsLog> {
        let text = fs::read_to_string(path).at(path)?;
        let mut log = MetricsLog::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line)? {
                MetricsRecord::Step(s) => log.steps.push(s),
                MetricsRecord::Epoch(e) => log.epochs.push(e),
            }
        }
        Ok(log)
    }
}

pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub metrics: MetricsLog,
    pub manifest: RunManifest,
    pub checkpoints: Vec<PathBuf>,
}

/// Batches per epoch: `ceil(N / B)`, except that a trailing batch of one
/// triplet is merged into the one before it.
pub fn epoch_batches(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(batch_size)
        .map(|s| s..(s + batch_size).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").end = last.end;
    }
    out
}

/// Per-component mean and standard deviation of the flat action between a
/// sample of train anchors and partners drawn with `strategy`.
pub fn estimate_action_stats(dataset: &DatasetManifest, strategy: PairStrategy, seed: u64) -> Result<ActionStats> {
    let refs = dataset.frame_refs();
    let mut rng = rng_for(&[seed, 0xac75]);
    let anchors: Vec<FrameRef> = if refs.len() <= ACTION_STATS_SAMPLES {
        refs
    } else {
        refs.choose_multiple(&mut rng, ACTION_STATS_SAMPLES).copied().collect()
    };
    let vectors = anchors
        .iter()
        .map(|&a| {
            let t2 = sample_positive(&dataset.clips[a.clip], a.frame, strategy, &mut rng)?;
            Ok(frame_action(dataset, a, FrameRef { clip: a.clip, frame: t2 })?.flat())
        })
        .collect::<Result<Vec<_>>>()?;
    ActionStats::from_vectors(&vectors)
}

/// Seed of the parameter initialization for a run seeded with `seed`.
pub fn model_init_seed(seed: u64) -> u64 {
    derive_seed(&[seed, 0x1417])
}

/// Trains `config.method` on `dataset` (already the train split). With
/// `out`, writes the config snapshot, run manifest, metrics, checkpoints
/// and a summary into that directory.
pub fn run_training(dataset: &DatasetManifest, config: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    if config.strict {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| train_inner(dataset, config, out))
    } else {
        train_inner(dataset, config, out)
    }
}

fn train_inner(dataset: &DatasetManifest, config: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let resolved = config.resolve(dataset.style, dataset.image_size, dataset.num_categories())?;
    let refs = dataset.frame_refs();
    if refs.len() < 2 {
        return Err(Error::Config("training needs at least 2 frames".into()));
    }
    let seed = config.seed;
    let objective = config.method.objective();
    let action_stats = match objective {
        Objective::Ciper => Some(estimate_action_stats(dataset, resolved.strategy, seed)?),
        _ => None,
    };
    let mut bundle = ModelBundle::new(resolved.model.clone(), model_init_seed(seed))?;
    bundle.set_mode(Mode::Train);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let batch_size = config.batch_size.min(refs.len());
    let steps_per_epoch = epoch_batches(refs.len(), batch_size).len();
    let total_steps = steps_per_epoch * config.epochs;
    let manifest = RunManifest {
        method: config.method,
        seed,
        resolved: resolved.clone(),
        model_fingerprint: resolved.model.fingerprint(),
        dataset_hash: dataset.content_hash(),
        train_frames: refs.len(),
        steps_per_epoch,
        action_stats: action_stats.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let mut sink = match out {
        Some(dir) => Some(RunWriter::create(dir, config, &manifest)?),
        None => None,
    };

    let mut metrics = MetricsLog::default();
    let mut checkpoints = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order = refs.clone();
        order.shuffle(&mut rng_for(&[seed, 0xe90c, epoch as u64]));
        let mut epoch_total = 0.0;
        let batches = epoch_batches(order.len(), batch_size);
        for (k, range) in batches.iter().enumerate() {
            let batch_seed = derive_seed(&[seed, epoch as u64, k as u64]);
            let batch = build_batch_from(dataset, &order[range.clone()], resolved.strategy, &config.aug, batch_seed)?;
            let lr = resolved.schedule.lr(resolved.base_lr, step, total_steps);
            let (total, inv, action) = train_step(&mut bundle, &batch, objective, &resolved.loss, action_stats.as_ref())?;
            if !total.is_finite() {
                return Err(Error::Diverged { step });
            }
            opt.step(lr, &mut bundle);
            let rec = StepRecord {
                step,
                epoch,
                total,
                inv,
                action,
                lr,
            };
            if let Some(s) = &mut sink {
                s.record(&MetricsRecord::Step(rec.clone()))?;
            }
            metrics.steps.push(rec);
            epoch_total += total;
            step += 1;
        }
        let rec = EpochRecord {
            epoch,
            wall_time_s: started.elapsed().as_secs_f64(),
            param_norm: bundle.param_norm(),
            mean_total: epoch_total / batches.len() as f64,
        };
        if let Some(s) = &mut sink {
            s.record(&MetricsRecord::Epoch(rec.clone()))?;
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 && epoch + 1 < config.epochs {
                let path = s.dir.join(format!("epoch_{:04}.ckpt", epoch + 1));
                save_checkpoint(&bundle, &path)?;
                checkpoints.push(path);
            }
        }
        metrics.epochs.push(rec);
    }
    bundle.set_mode(Mode::Eval);
    if let Some(s) = &mut sink {
        let path = s.dir.join(FINAL_CHECKPOINT);
        save_checkpoint(&bundle, &path)?;
        checkpoints.push(path);
        s.finish(&metrics, &manifest)?;
    }
    Ok(TrainOutcome {
        bundle,
        metrics,
        manifest,
        checkpoints,
    })
}

fn stack_views(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    FeatureMap {
        n: a.n + b.n,
        h: a.h,
        w: a.w,
        data: a.data.vstack(&b.data),
    }
}

fn add_rows(dst: &mut Matrix, start: usize, src: &Matrix) {
    let cols = dst.cols;
    debug_assert_eq!(cols, src.cols);
    let off = start * cols;
    for (d, s) in dst.data[off..off + src.data.len()].iter_mut().zip(&src.data) {
        *d += s;
    }
}

fn scaled(m: &Mat64, s: f64) -> Matrix {
    let data: Vec<f64> = m.data.iter().map(|v| v * s).collect();
    Matrix::from_f64(m.rows, m.cols, &data)
}

/// One forward/backward pass. Both views go through the backbone and the
/// invariance head as a single `2B` batch. Returns `(total, inv, action)`
/// where `action` is the auxiliary term before weighting.
pub fn train_step(
    bundle: &mut ModelBundle,
    batch: &TripletBatch,
    objective: Objective,
    loss: &LossParams,
    action_stats: Option<&ActionStats>,
) -> Result<(f64, f64, f64)> {
    bundle.zero_grad();
    bundle.set_mode(Mode::Train);
    let b = batch.len();
    let lambda = loss.lambda;

    if objective == Objective::Supervised {
        let h = bundle.encode(&batch.views_t)?;
        let labels: Vec<usize> = batch.labels.iter().map(|l| l.0).collect();
        let cls = bundle.classifier.as_mut().ok_or(Error::MissingComponent("classifier"))?;
        let logits = cls.forward_train(&h);
        let (value, g) = cross_entropy(&Mat64::from(&logits), &labels)?;
        let dh = cls.backward(&g.to_matrix());
        bundle.backbone.backward(&dh);
        return Ok((value, value, 0.0));
    }

    let h = bundle.encode(&stack_views(&batch.views_t, &batch.views_t2))?;
    let d = h.cols;
    let (h_t, h_t2) = (h.slice_rows(0, b), h.slice_rows(b, 2 * b));
    let mut dh = Matrix::zeros(2 * b, d);
    let mut inv = 0.0;
    let mut aux = 0.0;

    if objective != Objective::ActionOnly {
        let z = bundle.inv_head.forward_train(&h)?;
        let p = z.cols;
        let (z_t, z_t2) = (Mat64::from(&z.slice_rows(0, b)), Mat64::from(&z.slice_rows(b, 2 * b)));
        let l = loss.invariance(&z_t, &z_t2)?;
        inv = l.value;
        let mut dz = l.grad_a.to_matrix().vstack(&l.grad_b.to_matrix());
        if objective == Objective::Equimod {
            let pred_in = z.slice_rows(0, b).hcat(&batch.actions);
            let predictor = bundle
                .equi_predictor
                .as_mut()
                .ok_or(Error::MissingComponent("equivariant predictor"))?;
            let zhat = predictor.forward_train(&pred_in)?;
            let le = equimod_loss(&Mat64::from(&zhat), &z_t2, loss)?;
            aux = le.value;
            let dpred = predictor.backward(&scaled(&le.grad_a, lambda));
            add_rows(&mut dz, 0, &dpred.hsplit(p).0);
            if !loss.equimod_stop_grad {
                add_rows(&mut dz, b, &scaled(&le.grad_b, lambda));
            }
        }
        dh.add_assign(&bundle.inv_head.backward(&dz));
    }

    match objective {
        Objective::ActionAware | Objective::ActionOnly => {
            let za = bundle.action_encoder.forward_train(&batch.actions)?;
            let zp = bundle.pair_head.forward_train(&h_t.hcat(&h_t2))?;
            let l = loss.action(&Mat64::from(&za), &Mat64::from(&zp))?;
            aux = l.value;
            let w = if objective == Objective::ActionOnly { 1.0 } else { lambda };
            bundle.action_encoder.backward(&scaled(&l.grad_a, w));
            let dpair = bundle.pair_head.backward(&scaled(&l.grad_b, w));
            let (d1, d2) = dpair.hsplit(d);
            add_rows(&mut dh, 0, &d1);
            add_rows(&mut dh, b, &d2);
        }
        Objective::Ciper => {
            let stats = action_stats.ok_or(Error::MissingComponent("action statistics"))?;
            let mut target = Vec::with_capacity(b * batch.actions.cols);
            for r in 0..b {
                let flat: Vec<f64> = batch.actions.row(r).iter().map(|&v| v as f64).collect();
                target.extend(normalize_flat(&flat, stats)?);
            }
            let target = Mat64::new(b, batch.actions.cols, target);
            let head = bundle.inverse_head.as_mut().ok_or(Error::MissingComponent("inverse head"))?;
            let pred = head.forward_train(&h_t.hcat(&h_t2))?;
            let (value, g) = ciper_loss(&Mat64::from(&pred), &target)?;
            aux = value;
            let dpair = head.backward(&scaled(&g, lambda));
            let (d1, d2) = dpair.hsplit(d);
            add_rows(&mut dh, 0, &d1);
            add_rows(&mut dh, b, &d2);
        }
        _ => {}
    }
    bundle.backbone.backward(&dh);
    let total = match objective {
        Objective::InvarianceOnly => inv,
        Objective::ActionOnly => aux,
        _ => inv + lambda * aux,
    };
    Ok((total, inv, aux))
}

struct RunWriter {
    dir: PathBuf,
    metrics: BufWriter<File>,
}

impl RunWriter {
    fn create(dir: &Path, config: &TrainConfig, manifest: &RunManifest) -> Result<Self> {
        fs::create_dir_all(dir).at(dir)?;
        let p = dir.join(CONFIG_FILE);
        fs::write(&p, serde_json::to_string_pretty(config)?).at(&p)?;
        let p = dir.join(RUN_FILE);
        fs::write(&p, serde_json::to_string_pretty(manifest)?).at(&p)?;
        let p = dir.join(METRICS_FILE);
        let metrics = BufWriter::new(File::create(&p).at(&p)?);
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
        })
    }

    fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        let p = self.dir.join(METRICS_FILE);
        writeln!(self.metrics, "{line}").at(&p)
    }

    fn finish(&mut self, metrics: &MetricsLog, manifest: &RunManifest) -> Result<()> {
        let p = self.dir.join(METRICS_FILE);
        self.metrics.flush().at(&p)?;
        let first = metrics.steps.first().map_or(f64::NAN, |s| s.total);
        let last = metrics.steps.last().map_or(f64::NAN, |s| s.total);
        let wall: f64 = metrics.epochs.iter().map(|e| e.wall_time_s).sum();
        let mut text = String::new();
        text.push_str(&format!("method            {}\n", manifest.method));
        text.push_str(&format!("seed              {}\n", manifest.seed));
        text.push_str(&format!("model             {}\n", manifest.model_fingerprint));
        text.push_str(&format!("dataset           {}\n", manifest.dataset_hash));
        text.push_str(&format!("epochs            {}\n", metrics.epochs.len()));
        text.push_str(&format!("steps             {}\n", metrics.steps.len()));
        text.push_str(&format!("initial loss      {first:.6}\n"));
        text.push_str(&format!("final loss        {last:.6}\n"));
        text.push_str(&format!("wall time (s)     {wall:.1}\n"));
        let p = self.dir.join(SUMMARY_FILE);
        fs::write(&p, text).at(&p)
    }
}

/// Reads the run manifest of a run directory.
pub fn read_run_manifest(dir: &Path) -> Result<RunManifest> {
    let p = dir.join(RUN_FILE);
    Ok(serde_json::from_str(&fs::read_to_string(&p).at(&p)?)?)
}

//! Config-driven experiment matrix.
//!
//! A matrix expands an [`ExperimentConfig`] into variants (methods, the
//! augmentation ablations, the λ and window sweeps, and optionally a
//! random-initialization baseline), trains every variant for every seed
//! into its own run directory, evaluates the frozen encoder from the saved
//! checkpoint, and records the outcome as a `cell.json` next to the run.
//! Reports are a pure function of those cell records.
//!
//! ```text
//! <out>/runs/<variant>/seed_<s>/{config.json, run.json, metrics.jsonl,
//!                                 final.ckpt, split.json, analysis.json, cell.json}
//! <out>/report/{summary,accuracy,scatter,ablation,lambda,view_alignment,failures}.csv
//! <out>/report/report.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actions::DatasetStyle;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataset::{generate_synthetic, read_manifest, split_objects, DatasetManifest, SynthConfig};
use crate::error::{Error, IoContext, Result};
use crate::eval::{
    classifier_accuracy, embed_dataset, invariance_score, linear_probe, view_alignment_g, LayerTag, ProbeConfig,
};
use crate::models::ModelBundle;
use crate::sampler::PairStrategy;
use crate::train::{model_init_seed, run_training, Method, Objective, TrainConfig, CONFIG_FILE, FINAL_CHECKPOINT};

pub const CELL_FILE: &str = "cell.json";
pub const SPLIT_FILE: &str = "split.json";
pub const ANALYSIS_FILE: &str = "analysis.json";
pub const RUNS_DIR: &str = "runs";
pub const REPORT_DIR: &str = "report";
/// Suffix of the probe variant fit on one frame per training clip.
pub const ONE_VIEW: &str = "one_view";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Generator settings; used when `path` is absent.
    pub synthetic: SynthConfig,
    /// Directory holding a clip manifest.
    pub path: Option<PathBuf>,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            synthetic: SynthConfig::default(),
            path: None,
            train_fraction: 0.5,
            split_seed: 0,
        }
    }
}

impl DatasetSection {
    pub fn load(&self) -> Result<DatasetManifest> {
        match &self.path {
            Some(p) => read_manifest(p),
            None => generate_synthetic(&self.synthetic),
        }
    }

    pub fn split(&self, data: &DatasetManifest) -> Result<(DatasetManifest, DatasetManifest)> {
        split_objects(data, self.train_fraction, self.split_seed)
    }
}

/// Augmentation ablations, applied on top of the base augmentation config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Crop/resize only: no color jitter, no grayscale.
    Crop,
    /// One color draw shared by both views of a pair.
    UniColor,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Crop => "crop",
            Ablation::UniColor => "uni_color",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub probe: ProbeConfig,
    /// Probed layers; the first one drives the scatter, ablation and λ tables.
    pub layers: Vec<LayerTag>,
    /// Also fit each probe on one frame per training clip.
    pub one_view_per_clip: bool,
    pub invariance: bool,
    pub view_alignment: bool,
    /// Probe an untrained encoder per seed.
    pub random_baseline: bool,
    /// Window widths R (degrees) for methods that pair frames through time.
    pub window_sweep: Vec<f64>,
    /// λ values for the action-aware methods.
    pub lambda_sweep: Vec<f64>,
    pub ablations: Vec<Ablation>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            layers: vec![LayerTag::Backbone],
            one_view_per_clip: false,
            invariance: true,
            view_alignment: true,
            random_baseline: true,
            window_sweep: Vec::new(),
            lambda_sweep: Vec::new(),
            ablations: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSection,
    /// Shared by every cell; `method` and `seed` are set per cell.
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            methods: vec![Method::Simclr, Method::SimclrTt, Method::AaSimclr],
            seeds: vec![0, 1, 2],
            dataset: DatasetSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML document. Syntax and schema errors carry
    /// the line and column of the offending entry.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative dataset path is taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })?;
        if let (Some(p), Some(dir)) = (&cfg.dataset.path, path.parent()) {
            if p.is_relative() {
                cfg.dataset.path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.eval.layers.is_empty() {
            return bad("eval.layers must not be empty".into());
        }
        if let Some(l) = self.eval.lambda_sweep.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return bad(format!("lambda_sweep value {l} must be a finite non-negative number"));
        }
        for &r in &self.eval.window_sweep {
            PairStrategy::Window { window_deg: r }.validate()?;
        }
        if !(self.dataset.train_fraction > 0.0 && self.dataset.train_fraction < 1.0) {
            return bad("dataset.train_fraction must be in (0, 1)".into());
        }
        if self.dataset.path.is_none() {
            self.dataset.synthetic.validate()?;
        }
        self.train.validate()
    }

    /// Every variant of the matrix, in a stable order.
    pub fn variants(&self) -> Vec<Variant> {
        let mut out = Vec::new();
        if self.eval.random_baseline {
            out.push(Variant::random());
        }
        for &m in &self.methods {
            out.push(Variant::method(m));
        }
        for &a in &self.eval.ablations {
            for &m in self.methods.iter().filter(|m| m.objective() != Objective::Supervised) {
                out.push(Variant {
                    ablation: Some(a),
                    ..Variant::method(m)
                });
            }
        }
        for &l in &self.eval.lambda_sweep {
            for &m in self.methods.iter().filter(|m| m.objective() == Objective::ActionAware) {
                // The default λ is the plain method cell.
                if l != self.default_lambda(m) {
                    out.push(Variant {
                        lambda: Some(l),
                        ..Variant::method(m)
                    });
                }
            }
        }
        for &r in &self.eval.window_sweep {
            for &m in self.methods.iter().filter(|m| pairs_through_time(**m)) {
                out.push(Variant {
                    window_deg: Some(r),
                    ..Variant::method(m)
                });
            }
        }
        out
    }

    fn default_lambda(&self, m: Method) -> f64 {
        self.train.loss.lambda.unwrap_or(crate::losses::LossParams::for_style(m.base(), DatasetStyle::Yaw).lambda)
    }

    /// Train config of one cell.
    pub fn cell_train_config(&self, v: &Variant, seed: u64) -> TrainConfig {
        let mut t = self.train.clone();
        t.method = v.method.unwrap_or(Method::Simclr);
        t.seed = seed;
        match v.ablation {
            Some(Ablation::Crop) => {
                t.aug.enable_color_jitter = false;
                t.aug.enable_grayscale = false;
            }
            Some(Ablation::UniColor) => t.aug.uni_color = true,
            None => {}
        }
        if let Some(l) = v.lambda {
            t.loss.lambda = Some(l);
        }
        if let Some(r) = v.window_deg {
            t.pair_strategy = Some(PairStrategy::Window { window_deg: r });
        }
        t
    }
}

fn pairs_through_time(m: Method) -> bool {
    !matches!(m.default_strategy(), PairStrategy::SelfPair)
}

/// One row of the matrix before seeds are applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    /// `None` for the untrained baseline.
    pub method: Option<Method>,
    pub ablation: Option<Ablation>,
    pub lambda: Option<f64>,
    pub window_deg: Option<f64>,
}

impl Variant {
    pub fn random() -> Self {
        Self {
            method: None,
            ablation: None,
            lambda: None,
            window_deg: None,
        }
    }

    pub fn method(m: Method) -> Self {
        Self {
            method: Some(m),
            ..Self::random()
        }
    }

    /// Stable name, also the run directory: `random`, `simclr_tt`,
    /// `aa_simclr+crop`, `aa_simclr@lambda=0.1`, `simclr_tt@R=30`.
    pub fn key(&self) -> String {
        let mut k = self.method.map_or("random".to_string(), |m| m.name().to_string());
        if let Some(a) = self.ablation {
            k += &format!("+{}", a.name());
        }
        if let Some(l) = self.lambda {
            k += &format!("@lambda={l}");
        }
        if let Some(r) = self.window_deg {
            k += &format!("@R={r}");
        }
        k
    }
}

/// Data source and object-wise split of a run, recorded so that
/// evaluation can rebuild both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub dataset: DatasetSection,
    pub dataset_hash: String,
    pub train_instances: Vec<usize>,
    pub test_instances: Vec<usize>,
}

impl SplitRecord {
    pub fn new(section: &DatasetSection, full: &DatasetManifest, train: &DatasetManifest, test: &DatasetManifest) -> Self {
        Self {
            dataset: section.clone(),
            dataset_hash: full.content_hash(),
            train_instances: train.instance_ids().into_iter().collect(),
            test_instances: test.instance_ids().into_iter().collect(),
        }
    }

    /// Loads the recorded data source.
    pub fn load_dataset(&self) -> Result<DatasetManifest> {
        self.dataset.load()
    }

    /// Re-derives the split of `full`, which must be the dataset the run
    /// was trained on.
    pub fn apply(&self, full: &DatasetManifest) -> Result<(DatasetManifest, DatasetManifest)> {
        if full.content_hash() != self.dataset_hash {
            return Err(Error::Validation("dataset differs from the one the run was trained on".into()));
        }
        let (train, test) = self.dataset.split(full)?;
        let ids = |m: &DatasetManifest| m.instance_ids().into_iter().collect::<Vec<_>>();
        if ids(&train) != self.train_instances || ids(&test) != self.test_instances {
            return Err(Error::Validation("dataset does not reproduce the run's object split".into()));
        }
        Ok((train, test))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub accuracy: f64,
    pub train_accuracy: f64,
}

/// Frozen-encoder evaluation of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAnalysis {
    /// Keyed by layer, with a `/one_view` suffix for the one-view variant.
    pub probes: BTreeMap<String, ProbeRecord>,
    /// Adjacent-frame cosine on the test split, first layer.
    pub invariance: Option<f64>,
    /// The same on the training split.
    #[serde(default)]
    pub invariance_train: Option<f64>,
    /// View-alignment ratio G on the test split, first layer.
    pub view_alignment: Option<f64>,
    /// Supervised runs: classifier accuracy on the training split.
    pub classifier_train_accuracy: Option<f64>,
}

impl RunAnalysis {
    /// Accuracy of the primary probe (first layer, every frame).
    pub fn primary_accuracy(&self, layer: LayerTag) -> Option<f64> {
        self.probes.get(&layer.to_string()).map(|p| p.accuracy)
    }
}

/// Loads `final.ckpt` from `run_dir` and evaluates it on the recorded split
/// of `full`. Writes `analysis.json`.
pub fn analyze_run(run_dir: &Path, full: &DatasetManifest, eval: &EvalSection) -> Result<RunAnalysis> {
    let split: SplitRecord = read_json(&run_dir.join(SPLIT_FILE))?;
    let (train, test) = split.apply(full)?;
    let bundle = load_checkpoint(&run_dir.join(FINAL_CHECKPOINT))?;
    let analysis = analyze_bundle(&bundle, &train, &test, eval)?;
    write_json(&run_dir.join(ANALYSIS_FILE), &analysis)?;
    Ok(analysis)
}

pub fn analyze_bundle(
    bundle: &ModelBundle,
    train: &DatasetManifest,
    test: &DatasetManifest,
    eval: &EvalSection,
) -> Result<RunAnalysis> {
    let mut probes = BTreeMap::new();
    let mut invariance = None;
    let mut invariance_train = None;
    let mut view_alignment = None;
    for (i, &layer) in eval.layers.iter().enumerate() {
        let tr = embed_dataset(bundle, train, layer)?;
        let te = embed_dataset(bundle, test, layer)?;
        let mut variants = vec![(layer.to_string(), false)];
        if eval.one_view_per_clip {
            variants.push((format!("{layer}/{ONE_VIEW}"), true));
        }
        for (key, one_view) in variants {
            let cfg = ProbeConfig {
                one_view_per_clip: one_view,
                ..eval.probe.clone()
            };
            let r = linear_probe(&tr, &te, &cfg)?;
            probes.insert(
                key,
                ProbeRecord {
                    accuracy: r.accuracy,
                    train_accuracy: r.train_accuracy,
                },
            );
        }
        if i == 0 {
            if eval.invariance {
                invariance = Some(invariance_score(&te)?);
                invariance_train = Some(invariance_score(&tr)?);
            }
            if eval.view_alignment && test.style == DatasetStyle::Yaw {
                view_alignment = Some(view_alignment_g(&te, false)?);
            }
        }
    }
    let classifier_train_accuracy = match bundle.classifier {
        Some(_) => Some(classifier_accuracy(bundle, train)?),
        None => None,
    };
    Ok(RunAnalysis {
        probes,
        invariance,
        invariance_train,
        view_alignment,
        classifier_train_accuracy,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// Outcome of one (variant, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub variant: String,
    pub method: Option<Method>,
    pub ablation: Option<Ablation>,
    /// Effective λ and τ_a of the run (action-aware methods only).
    pub lambda: Option<f64>,
    pub tau_a: Option<f64>,
    pub window_deg: Option<f64>,
    pub seed: u64,
    /// Hash of the cell's train config.
    pub config_hash: String,
    pub status: CellStatus,
    pub error: Option<String>,
    /// Mean loss of the first and last epoch.
    pub loss_first: Option<f64>,
    pub loss_last: Option<f64>,
    pub analysis: Option<RunAnalysis>,
}

pub fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatrixOptions {
    /// Skip training for cells whose record reports success under the same
    /// train config; they are re-evaluated from their checkpoint.
    pub resume: bool,
    /// Overrides `train.strict` when set.
    pub strict: Option<bool>,
}

pub struct MatrixOutcome {
    pub cells: Vec<CellRecord>,
    pub report: Report,
}

impl MatrixOutcome {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.status == CellStatus::Failed).count()
    }
}

pub fn cell_dir(out: &Path, variant: &Variant, seed: u64) -> PathBuf {
    out.join(RUNS_DIR).join(variant.key()).join(format!("seed_{seed}"))
}

/// Trains and evaluates every cell, then writes the merged report. A
/// failing cell is recorded and the matrix moves on.
pub fn run_matrix(config: &ExperimentConfig, out: &Path, opts: &MatrixOptions) -> Result<MatrixOutcome> {
    config.validate()?;
    let full = config.dataset.load()?;
    let (train, test) = config.dataset.split(&full)?;
    let split = SplitRecord::new(&config.dataset, &full, &train, &test);
    let mut cells = Vec::new();
    for variant in config.variants() {
        for &seed in &config.seeds {
            let dir = cell_dir(out, &variant, seed);
            let mut tc = config.cell_train_config(&variant, seed);
            if let Some(s) = opts.strict {
                tc.strict = s;
            }
            let reusable = opts
                .resume
                .then(|| read_json::<CellRecord>(&dir.join(CELL_FILE)).ok())
                .flatten()
                .filter(|prev| prev.status == CellStatus::Ok && prev.config_hash == config_hash(&tc));
            let record = match reusable {
                // Training is skipped; evaluation reruns so the record
                // reflects the current eval section.
                Some(mut prev) => match analyze_run(&dir, &full, &config.eval) {
                    Ok(a) => {
                        prev.analysis = Some(a);
                        prev
                    }
                    Err(_) => run_cell(config, &variant, &tc, &full, &train, &split, &dir),
                },
                None => run_cell(config, &variant, &tc, &full, &train, &split, &dir),
            };
            write_json(&dir.join(CELL_FILE), &record)?;
            cells.push(record);
        }
    }
    let report = emit_report(out)?;
    Ok(MatrixOutcome { cells, report })
}

fn run_cell(
    config: &ExperimentConfig,
    variant: &Variant,
    tc: &TrainConfig,
    full: &DatasetManifest,
    train: &DatasetManifest,
    split: &SplitRecord,
    dir: &Path,
) -> CellRecord {
    let mut record = CellRecord {
        variant: variant.key(),
        method: variant.method,
        ablation: variant.ablation,
        lambda: None,
        tau_a: None,
        window_deg: variant.window_deg,
        seed: tc.seed,
        config_hash: config_hash(tc),
        status: CellStatus::Failed,
        error: None,
        loss_first: None,
        loss_last: None,
        analysis: None,
    };
    let result = (|| -> Result<()> {
        if dir.exists() {
            fs::remove_dir_all(dir).at(dir)?;
        }
        fs::create_dir_all(dir).at(dir)?;
        write_json(&dir.join(SPLIT_FILE), split)?;
        let resolved = tc.resolve(train.style, train.image_size, train.num_categories())?;
        if matches!(tc.method.objective(), Objective::ActionAware | Objective::ActionOnly) && variant.method.is_some() {
            record.lambda = Some(resolved.loss.lambda);
            record.tau_a = Some(resolved.loss.tau_a);
        }
        match variant.method {
            Some(_) => {
                let out = run_training(train, tc, Some(dir))?;
                record.loss_first = out.metrics.epochs.first().map(|e| e.mean_total);
                record.loss_last = out.metrics.epochs.last().map(|e| e.mean_total);
            }
            None => {
                let bundle = ModelBundle::new(resolved.model.clone(), model_init_seed(tc.seed))?;
                write_json(&dir.join(CONFIG_FILE), tc)?;
                save_checkpoint(&bundle, &dir.join(FINAL_CHECKPOINT))?;
            }
        }
        record.analysis = Some(analyze_run(dir, full, &config.eval)?);
        Ok(())
    })();
    match result {
        Ok(()) => record.status = CellStatus::Ok,
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

// ---------------------------------------------------------------------------
// Reports

/// Mean and sample (n − 1) standard deviation; the deviation is omitted for
/// a single value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Some(Stat { n, mean, std })
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.std {
            Some(s) => write!(f, "{:.4} ± {:.4}", self.mean, s),
            None => write!(f, "{:.4}", self.mean),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub accuracy: Option<Stat>,
    pub invariance: Option<Stat>,
    pub invariance_train: Option<Stat>,
    pub view_alignment: Option<Stat>,
    pub loss_first: Option<Stat>,
    pub loss_last: Option<Stat>,
    pub classifier_train_accuracy: Option<Stat>,
    pub seeds: Vec<u64>,
    pub config_hashes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub variant: String,
    pub probe: String,
    pub accuracy: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub variant: String,
    pub method: Option<Method>,
    pub window_deg: Option<f64>,
    pub tau_a: Option<f64>,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
    pub invariance: f64,
    pub invariance_train: Option<f64>,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: Method,
    /// `full` or an ablation name.
    pub augmentation: String,
    pub accuracy: Stat,
    /// Mean accuracy of `full` minus this row's mean.
    pub drop: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub method: Method,
    pub lambda: f64,
    pub accuracy: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub variant: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Layer of the primary probe.
    pub primary_probe: String,
    pub summary: Vec<SummaryRow>,
    pub accuracy: Vec<AccuracyRow>,
    pub scatter: Vec<ScatterRow>,
    pub ablation: Vec<AblationRow>,
    pub lambda: Vec<LambdaRow>,
    pub failed: Vec<FailedCell>,
}

impl Report {
    pub fn variant(&self, key: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.variant == key)
    }
}

/// Reads every `cell.json` under `<out>/runs`, sorted by variant and seed.
pub fn collect_cells(out: &Path) -> Result<Vec<CellRecord>> {
    let runs = out.join(RUNS_DIR);
    let mut cells = Vec::new();
    if !runs.is_dir() {
        return Err(Error::Validation(format!("{} has no run directories", out.display())));
    }
    for v in fs::read_dir(&runs).at(&runs)? {
        let v = v.at(&runs)?.path();
        if !v.is_dir() {
            continue;
        }
        for s in fs::read_dir(&v).at(&v)? {
            let cell = s.at(&v)?.path().join(CELL_FILE);
            if cell.exists() {
                cells.push(read_json::<CellRecord>(&cell)?);
            }
        }
    }
    cells.sort_by(|a, b| (&a.variant, a.seed).cmp(&(&b.variant, b.seed)));
    Ok(cells)
}

/// Builds the report tables from the cell records under `out` and writes
/// them to `<out>/report`.
pub fn emit_report(out: &Path) -> Result<Report> {
    let cells = collect_cells(out)?;
    let report = build_report(&cells);
    write_report(&report, &out.join(REPORT_DIR))?;
    Ok(report)
}

pub fn build_report(cells: &[CellRecord]) -> Report {
    let ok: Vec<&CellRecord> = cells.iter().filter(|c| c.status == CellStatus::Ok && c.analysis.is_some()).collect();
    let analysis = |c: &CellRecord| c.analysis.clone().expect("filtered");
    // The primary probe is the first probe key without a suffix, in
    // config order; every cell of a matrix shares the same keys.
    let primary = ok
        .first()
        .and_then(|c| {
            let a = analysis(c);
            a.probes.keys().find(|k| *k == "backbone").or_else(|| a.probes.keys().find(|k| !k.contains('/'))).cloned()
        })
        .unwrap_or_else(|| "backbone".into());
    let acc = |c: &CellRecord| c.analysis.as_ref().and_then(|a| a.probes.get(&primary)).map(|p| p.accuracy);

    let mut by_variant: BTreeMap<String, Vec<&CellRecord>> = BTreeMap::new();
    for c in &ok {
        by_variant.entry(c.variant.clone()).or_default().push(c);
    }

    let stat = |rows: &[&CellRecord], f: &dyn Fn(&CellRecord) -> Option<f64>| {
        let xs: Vec<f64> = rows.iter().filter_map(|c| f(c)).collect();
        Stat::of(&xs)
    };
    let mut summary = Vec::new();
    let mut accuracy = Vec::new();
    for (variant, rows) in &by_variant {
        summary.push(SummaryRow {
            variant: variant.clone(),
            accuracy: stat(rows, &acc),
            invariance: stat(rows, &|c| c.analysis.as_ref().and_then(|a| a.invariance)),
            invariance_train: stat(rows, &|c| c.analysis.as_ref().and_then(|a| a.invariance_train)),
            view_alignment: stat(rows, &|c| c.analysis.as_ref().and_then(|a| a.view_alignment)),
            loss_first: stat(rows, &|c| c.loss_first),
            loss_last: stat(rows, &|c| c.loss_last),
            classifier_train_accuracy: stat(rows, &|c| c.analysis.as_ref().and_then(|a| a.classifier_train_accuracy)),
            seeds: rows.iter().map(|c| c.seed).collect(),
            config_hashes: rows.iter().map(|c| c.config_hash.clone()).collect(),
        });
        let mut probes: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for c in rows {
            for (k, p) in &analysis(c).probes {
                probes.entry(k.clone()).or_default().push(p.accuracy);
            }
        }
        for (probe, xs) in probes {
            accuracy.push(AccuracyRow {
                variant: variant.clone(),
                probe,
                accuracy: Stat::of(&xs).expect("nonempty"),
            });
        }
    }

    let scatter = ok
        .iter()
        .filter(|c| c.method.is_some())
        .filter_map(|c| {
            Some(ScatterRow {
                variant: c.variant.clone(),
                method: c.method,
                window_deg: c.window_deg,
                tau_a: c.tau_a,
                lambda: c.lambda,
                seed: c.seed,
                config_hash: c.config_hash.clone(),
                invariance: c.analysis.as_ref()?.invariance?,
                invariance_train: c.analysis.as_ref()?.invariance_train,
                accuracy: acc(c)?,
            })
        })
        .collect();

    let plain = |c: &CellRecord| c.lambda_is_default() && c.window_deg.is_none();
    let mut ablation_groups: BTreeMap<(Method, String), Vec<f64>> = BTreeMap::new();
    let mut ablated_methods = std::collections::BTreeSet::new();
    for c in ok.iter().filter(|c| plain(c)) {
        let (Some(m), Some(a)) = (c.method, acc(c)) else { continue };
        let name = c.ablation.map_or("full".to_string(), |a| a.name().to_string());
        if c.ablation.is_some() {
            ablated_methods.insert(m);
        }
        ablation_groups.entry((m, name)).or_default().push(a);
    }
    let mut ablation = Vec::new();
    for ((m, name), xs) in &ablation_groups {
        if !ablated_methods.contains(m) {
            continue;
        }
        let s = Stat::of(xs).expect("nonempty");
        let full = ablation_groups.get(&(*m, "full".to_string())).and_then(|f| Stat::of(f));
        ablation.push(AblationRow {
            method: *m,
            augmentation: name.clone(),
            accuracy: s,
            drop: full.map(|f| f.mean - s.mean),
        });
    }

    let mut lambda_groups: BTreeMap<(Method, u64), (f64, Vec<f64>)> = BTreeMap::new();
    let swept: std::collections::BTreeSet<Method> =
        ok.iter().filter(|c| c.variant.contains("@lambda=")).filter_map(|c| c.method).collect();
    for c in ok.iter().filter(|c| c.ablation.is_none() && c.window_deg.is_none()) {
        let (Some(m), Some(l), Some(a)) = (c.method, c.lambda, acc(c)) else { continue };
        if swept.contains(&m) {
            lambda_groups.entry((m, l.to_bits())).or_insert((l, Vec::new())).1.push(a);
        }
    }
    let mut lambda: Vec<LambdaRow> = lambda_groups
        .into_iter()
        .map(|((method, _), (l, xs))| LambdaRow {
            method,
            lambda: l,
            accuracy: Stat::of(&xs).expect("nonempty"),
        })
        .collect();
    lambda.sort_by(|a, b| (a.method, a.lambda).partial_cmp(&(b.method, b.lambda)).expect("finite"));

    let failed = cells
        .iter()
        .filter(|c| c.status == CellStatus::Failed)
        .map(|c| FailedCell {
            variant: c.variant.clone(),
            seed: c.seed,
            error: c.error.clone().unwrap_or_default(),
        })
        .collect();

    Report {
        primary_probe: primary,
        summary,
        accuracy,
        scatter,
        ablation,
        lambda,
        failed,
    }
}

impl CellRecord {
    /// True unless the cell belongs to the λ sweep.
    fn lambda_is_default(&self) -> bool {
        !self.variant.contains("@lambda=")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

fn stat_cols(s: &Option<Stat>) -> [String; 2] {
    match s {
        Some(s) => [s.mean.to_string(), opt(s.std)],
        None => [String::new(), String::new()],
    }
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().at(path)
}

pub fn write_report(report: &Report, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    write_json(&dir.join("report.json"), report)?;
    write_csv(
        &dir.join("summary.csv"),
        &[
            "variant", "n", "accuracy_mean", "accuracy_std", "invariance_mean", "invariance_std",
            "invariance_train_mean", "invariance_train_std", "g_mean", "g_std", "loss_first_mean", "loss_last_mean", "seeds", "config_hashes",
        ],
        report.summary.iter().map(|r| {
            let [am, asd] = stat_cols(&r.accuracy);
            let [im, isd] = stat_cols(&r.invariance);
            let [tm, tsd] = stat_cols(&r.invariance_train);
            let [gm, gsd] = stat_cols(&r.view_alignment);
            vec![
                r.variant.clone(),
                r.seeds.len().to_string(),
                am,
                asd,
                im,
                isd,
                tm,
                tsd,
                gm,
                gsd,
                stat_cols(&r.loss_first)[0].clone(),
                stat_cols(&r.loss_last)[0].clone(),
                r.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";"),
                r.config_hashes.join(";"),
            ]
        }),
    )?;
    write_csv(
        &dir.join("accuracy.csv"),
        &["variant", "probe", "n", "mean", "std"],
        report.accuracy.iter().map(|r| {
            vec![r.variant.clone(), r.probe.clone(), r.accuracy.n.to_string(), r.accuracy.mean.to_string(), opt(r.accuracy.std)]
        }),
    )?;
    write_csv(
        &dir.join("scatter.csv"),
        &[
            "variant", "method", "window_deg", "tau_a", "lambda", "seed", "config_hash", "invariance", "invariance_train",
            "accuracy",
        ],
        report.scatter.iter().map(|r| {
            vec![
                r.variant.clone(),
                r.method.map_or(String::new(), |m| m.name().into()),
                opt(r.window_deg),
                opt(r.tau_a),
                opt(r.lambda),
                r.seed.to_string(),
                r.config_hash.clone(),
                r.invariance.to_string(),
                opt(r.invariance_train),
                r.accuracy.to_string(),
            ]
        }),
    )?;
    write_csv(
        &dir.join("ablation.csv"),
        &["method", "augmentation", "n", "mean", "std", "drop"],
        report.ablation.iter().map(|r| {
            vec![
                r.method.name().into(),
                r.augmentation.clone(),
                r.accuracy.n.to_string(),
                r.accuracy.mean.to_string(),
                opt(r.accuracy.std),
                opt(r.drop),
            ]
        }),
    )?;
    write_csv(
        &dir.join("lambda.csv"),
        &["method", "lambda", "n", "mean", "std"],
        report.lambda.iter().map(|r| {
            vec![r.method.name().into(), r.lambda.to_string(), r.accuracy.n.to_string(), r.accuracy.mean.to_string(), opt(r.accuracy.std)]
        }),
    )?;
    write_csv(
        &dir.join("view_alignment.csv"),
        &["variant", "n", "mean", "std"],
        report.summary.iter().filter_map(|r| {
            let g = r.view_alignment?;
            Some(vec![r.variant.clone(), g.n.to_string(), g.mean.to_string(), opt(g.std)])
        }),
    )?;
    write_csv(
        &dir.join("failures.csv"),
        &["variant", "seed", "error"],
        report.failed.iter().map(|f| vec![f.variant.clone(), f.seed.to_string(), f.error.clone()]),
    )
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).at(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).at(path)
}

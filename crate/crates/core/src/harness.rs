//! File-level pipeline: configuration, stage commands, comparisons and ablations.
//!
//! Every stage writes into its own directory under the run's output root and
//! refuses to overwrite an existing one. Each directory holds the stage's
//! artifacts plus `manifest.json` with the config hash, the seed and the
//! hashes of the inputs it read. Wall-clock timings go to `timing.json` so
//! that every other file is a pure function of the configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bank::{build_bank, collect, ActivationBank, KMeansConfig, Provenance};
use crate::baselines::{eval_prompts, run_baseline, BaselineInputs, BaselineSpec};
use crate::error::{Error, Result};
use crate::intervene::{evaluate, EvalReport, DEFAULT_MAX_NEW_TOKENS};
use crate::math::RngState;
use crate::model::{load_checkpoint, save_checkpoint, train, AdamConfig, Model, ModelConfig};
use crate::policy::{
    finalize, train_selection, write_curve, EpisodeStats, InterventionPlan, SelectionConfig,
};
use crate::sensitivity::{average_delta, export_heatmap, top_k, DeltaMatrix, LocationSet};
use crate::tasks::{split_eval, QueryPools, Task, TaskFamily, TaskLibrary};

/// Environment variable naming the default output root.
pub const ENV_OUT_ROOT: &str = "STV_OUT";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub family: TaskFamily,
    pub library_seed: u64,
    pub library_size: usize,
    /// Library instance evaluated; `None` picks `seed % library_size`.
    pub instance: Option<usize>,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            family: TaskFamily::SymbolMapping,
            library_seed: 0,
            library_size: 8,
            instance: None,
            n_train: 8,
            n_test: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyWeights {
    pub symbol_mapping: f64,
    pub copy_with_marker: f64,
    pub label_classification: f64,
}

impl Default for FamilyWeights {
    fn default() -> Self {
        Self {
            symbol_mapping: 2.0,
            copy_with_marker: 1.0,
            label_classification: 1.0,
        }
    }
}

impl FamilyWeights {
    pub fn get(&self, family: TaskFamily) -> f64 {
        match family {
            TaskFamily::SymbolMapping => self.symbol_mapping,
            TaskFamily::CopyWithMarker => self.copy_with_marker,
            TaskFamily::LabelClassification => self.label_classification,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    /// Demonstrations per training sequence, drawn from `min_shots..=shots`.
    pub min_shots: usize,
    pub shots: usize,
    pub weights: FamilyWeights,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 3000,
            batch: 32,
            min_shots: 8,
            shots: 8,
            weights: FamilyWeights::default(),
            adam: AdamConfig {
                lr: 1e-3,
                warmup_steps: 200,
                final_lr_ratio: 0.1,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SenseConfig {
    /// Number of (query, context) pairs `T`.
    pub pairs: usize,
    /// Demonstrations per context `S`.
    pub shots: usize,
    /// Sensitive locations kept `K`.
    pub k: usize,
}

impl Default for SenseConfig {
    fn default() -> Self {
        Self {
            pairs: 100,
            shots: 4,
            k: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub clusters: usize,
    pub n_samples: usize,
    pub max_iters: usize,
    pub restarts: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            clusters: 16,
            n_samples: 100,
            max_iters: 100,
            restarts: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Random location sets tried by the mean-vector search.
    pub candidates: usize,
    pub icl_shots: usize,
    /// Layer for the principal-component vector; `None` is the middle layer.
    pub pca_layer: Option<usize>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            candidates: 100,
            icl_shots: 4,
            pca_layer: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// Pipeline seeds `seed, seed + 1, ...`.
    pub seeds: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { seeds: 5 }
    }
}

/// One-axis sweep. Exactly one of `clusters`, `k` and `pairs_shots` may be set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: usize,
    pub clusters: Option<Vec<usize>>,
    pub k: Option<Vec<usize>>,
    pub pairs_shots: Option<Vec<(usize, usize)>>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: 3,
            clusters: None,
            k: None,
            pairs_shots: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Clusters,
    K,
    PairsShots,
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::Clusters => "clusters",
            Axis::K => "k",
            Axis::PairsShots => "pairs-shots",
        }
    }
}

impl AblateConfig {
    /// The swept axis and its settings rendered as labels.
    pub fn axis(&self) -> Result<(Axis, Vec<String>)> {
        let mut set = Vec::new();
        if let Some(v) = &self.clusters {
            set.push((Axis::Clusters, v.iter().map(|m| m.to_string()).collect()));
        }
        if let Some(v) = &self.k {
            set.push((Axis::K, v.iter().map(|k| k.to_string()).collect()));
        }
        if let Some(v) = &self.pairs_shots {
            set.push((
                Axis::PairsShots,
                v.iter().map(|(t, s)| format!("{t}x{s}")).collect(),
            ));
        }
        match set.len() {
            1 => {
                let (axis, labels): (Axis, Vec<String>) = set.pop().expect("one axis");
                if labels.is_empty() {
                    return Err(Error::Config(format!(
                        "ablation axis {} has no settings",
                        axis.name()
                    )));
                }
                Ok((axis, labels))
            }
            0 => Err(Error::Config(
                "ablation needs one of clusters, k or pairs_shots".into(),
            )),
            _ => Err(Error::Config(
                "ablation sweeps exactly one axis; several were given".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output root; falls back to `$STV_OUT`, then `runs`.
    pub out_dir: Option<PathBuf>,
    /// Pre-trained checkpoint; when unset the `train` stage output is used.
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub sense: SenseConfig,
    pub bank: BankConfig,
    pub select: SelectionConfig,
    pub eval: EvalConfig,
    pub baselines: BaselineConfig,
    pub compare: CompareConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `section.field=value` overrides. Values parse as TOML
    /// literals and fall back to strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table =
            toml::from_str(&self.to_toml()?).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
            let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let parts: Vec<&str> = key.trim().split('.').collect();
            let (last, path) = parts.split_last().expect("split yields one part");
            let mut table = &mut doc;
            for p in path {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
            }
            table.insert(last.to_string(), value);
        }
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.select.validate()?;
        let t = &self.task;
        if t.library_size == 0 {
            return Err(Error::Config("task.library_size must be positive".into()));
        }
        if let Some(i) = t.instance {
            if i >= t.library_size {
                return Err(Error::Config(format!(
                    "task.instance {i} outside library of {}",
                    t.library_size
                )));
            }
        }
        if t.n_train == 0 || t.n_test == 0 {
            return Err(Error::Config(
                "task.n_train and task.n_test must be positive".into(),
            ));
        }
        self.library().validate(self.model.vocab_size)?;
        if self.sense.pairs == 0 {
            return Err(Error::Config("sense.pairs must be at least 1".into()));
        }
        let heads = self.model.total_heads();
        if self.sense.k == 0 || self.sense.k > heads {
            return Err(Error::Config(format!("sense.k must lie in 1..={heads}")));
        }
        if self.bank.clusters == 0 || self.bank.n_samples < self.bank.clusters {
            return Err(Error::Config(
                "bank.n_samples must be at least bank.clusters >= 1".into(),
            ));
        }
        if self.train.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        if self.train.min_shots > self.train.shots {
            return Err(Error::Config("train.min_shots exceeds train.shots".into()));
        }
        if self.compare.seeds == 0 || self.ablate.seeds == 0 {
            return Err(Error::Config("seed counts must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding of the whole configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn library(&self) -> TaskLibrary {
        TaskLibrary::standard(self.task.library_seed, self.task.library_size)
    }

    pub fn out_root(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(ENV_OUT_ROOT).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out_root().join(stage.name())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.stage_dir(Stage::Train).join("checkpoint.bin"))
    }
}

// ---------------------------------------------------------------------------
// In-memory pipeline
// ---------------------------------------------------------------------------

pub fn instance_for_seed(cfg: &RunConfig, seed: u64) -> usize {
    cfg.task
        .instance
        .unwrap_or((seed % cfg.task.library_size as u64) as usize)
}

/// `family#instance`, as written to result tables.
pub fn task_label(cfg: &RunConfig, seed: u64) -> String {
    format!("{}#{}", cfg.task.family, instance_for_seed(cfg, seed))
}

/// The task instance and query pools a seed evaluates on.
pub fn task_for_seed(cfg: &RunConfig, seed: u64) -> Result<(Task, QueryPools)> {
    let task = cfg
        .library()
        .task(cfg.task.family, instance_for_seed(cfg, seed))?;
    let pools = split_eval(
        &task,
        cfg.task.n_train,
        cfg.task.n_test,
        &mut RngState::new(seed).derive("pools"),
    )?;
    Ok((task, pools))
}

pub fn sense(
    model: &Model,
    task: &Task,
    pools: &QueryPools,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(DeltaMatrix, LocationSet)> {
    let delta = average_delta(
        model,
        task,
        &pools.train,
        cfg.sense.pairs,
        cfg.sense.shots,
        &RngState::new(seed).derive("sense"),
    )?;
    let locs = top_k(&delta, cfg.sense.k)?;
    Ok((delta, locs))
}

pub fn bank(
    model: &Model,
    task: &Task,
    pools: &QueryPools,
    locations: &LocationSet,
    cfg: &RunConfig,
    seed: u64,
) -> Result<ActivationBank> {
    let root = RngState::new(seed);
    let samples = collect(
        model,
        task,
        locations,
        &pools.train,
        cfg.bank.n_samples,
        cfg.sense.shots,
        &root.derive("collect"),
    )?;
    let km = KMeansConfig {
        clusters: cfg.bank.clusters,
        max_iters: cfg.bank.max_iters,
        restarts: cfg.bank.restarts,
    };
    let prov = Provenance {
        task: task_label(cfg, seed),
        shots: cfg.sense.shots,
        n_samples: cfg.bank.n_samples,
        seed,
    };
    build_bank(&samples, &km, prov, &root.derive("kmeans"))
}

pub fn select(
    model: &Model,
    bank: &ActivationBank,
    task: &Task,
    pools: &QueryPools,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(InterventionPlan, Vec<EpisodeStats>)> {
    let run = train_selection(
        model,
        bank,
        task,
        &pools.train,
        &cfg.select,
        &RngState::new(seed).derive("select"),
    )?;
    Ok((finalize(&run.policy, bank)?, run.curve))
}

/// Evaluates a plan on the seed's test pool with query-only inputs.
pub fn eval_plan(
    model: &Model,
    method: &str,
    plan: &InterventionPlan,
    task: &Task,
    pools: &QueryPools,
    cfg: &RunConfig,
    seed: u64,
) -> Result<EvalReport> {
    let prompts = eval_prompts(task, &pools.test, 0, &RngState::new(seed).derive("eval"))?;
    evaluate(model, method, plan, &prompts, cfg.eval.max_new_tokens)
}

/// Forward passes spent per stage of one pipeline run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StagePasses {
    pub sense: u64,
    pub bank: u64,
    pub select: u64,
    pub eval: u64,
}

impl StagePasses {
    pub fn total(&self) -> u64 {
        self.sense + self.bank + self.select + self.eval
    }
}

#[derive(Clone, Debug)]
pub struct StvRun {
    pub task: Task,
    pub pools: QueryPools,
    pub delta: DeltaMatrix,
    pub locations: LocationSet,
    pub bank: ActivationBank,
    pub plan: InterventionPlan,
    pub curve: Vec<EpisodeStats>,
    pub report: EvalReport,
    pub passes: StagePasses,
}

/// Sensitivity, bank, selection and evaluation for one seed.
pub fn run_stv(model: &Model, cfg: &RunConfig, seed: u64) -> Result<StvRun> {
    let (task, pools) = task_for_seed(cfg, seed)?;
    let mut passes = StagePasses::default();
    let mut mark = model.passes();
    let mut lap = |slot: &mut u64| {
        let now = model.passes();
        *slot = now - mark;
        mark = now;
    };
    let (delta, locations) = sense(model, &task, &pools, cfg, seed)?;
    lap(&mut passes.sense);
    let bank = bank(model, &task, &pools, &locations, cfg, seed)?;
    lap(&mut passes.bank);
    let (plan, curve) = select(model, &bank, &task, &pools, cfg, seed)?;
    lap(&mut passes.select);
    let report = eval_plan(model, "stv", &plan, &task, &pools, cfg, seed)?;
    lap(&mut passes.eval);
    Ok(StvRun {
        task,
        pools,
        delta,
        locations,
        bank,
        plan,
        curve,
        report,
        passes,
    })
}

// ---------------------------------------------------------------------------
// Comparison and ablation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub accuracy: f64,
    pub n_queries: usize,
    pub passes: u64,
}

pub const COMPARE_METHODS: [&str; 6] = [
    "zero-shot",
    "few-shot-icl",
    "icv-lite",
    "mtv-lite",
    "mean-at-sensitive",
    "stv",
];

/// Every method on every seed; all methods of a seed share its task,
/// pools, context samples and evaluation prompts.
pub fn compare(model: &Model, cfg: &RunConfig) -> Result<(Vec<CompareRow>, Vec<EvalReport>)> {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for seed in cfg.seed..cfg.seed + cfg.compare.seeds as u64 {
        let stv = run_stv(model, cfg, seed)?;
        let inputs = BaselineInputs {
            model,
            task: &stv.task,
            pools: &stv.pools,
            shots: cfg.sense.shots,
            n_samples: cfg.bank.n_samples,
            reward_batch: cfg.select.reward_batch,
            max_new_tokens: cfg.eval.max_new_tokens,
        };
        let specs = [
            BaselineSpec::ZeroShot,
            BaselineSpec::FewShotIcl {
                shots: cfg.baselines.icl_shots,
            },
            BaselineSpec::PcaVectorFixedLayer {
                layer: cfg.baselines.pca_layer,
            },
            BaselineSpec::MeanVectorRandomLoc {
                k: cfg.sense.k,
                candidates: cfg.baselines.candidates,
            },
            BaselineSpec::MeanVectorSensitiveLoc {
                locations: stv.locations.clone(),
            },
        ];
        let root = RngState::new(seed);
        let task_name = task_label(cfg, seed);
        for spec in &specs {
            let start = model.passes();
            let report = run_baseline(spec, &inputs, &root)?;
            rows.push(CompareRow {
                method: spec.name().to_string(),
                task: task_name.clone(),
                seed,
                accuracy: report.accuracy,
                n_queries: report.n_queries,
                passes: model.passes() - start,
            });
            reports.push(report);
        }
        rows.push(CompareRow {
            method: "stv".into(),
            task: task_name,
            seed,
            accuracy: stv.report.accuracy,
            n_queries: stv.report.n_queries,
            passes: stv.passes.total(),
        });
        reports.push(stv.report);
    }
    Ok((rows, reports))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub setting: String,
    pub seed: u64,
    pub accuracy: f64,
    pub passes: u64,
}

/// Runs the STV pipeline for every setting of the single swept axis.
pub fn ablate(model: &Model, cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let (axis, labels) = cfg.ablate.axis()?;
    let mut rows = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        let mut c = cfg.clone();
        match axis {
            Axis::Clusters => c.bank.clusters = cfg.ablate.clusters.as_ref().expect("axis")[i],
            Axis::K => c.sense.k = cfg.ablate.k.as_ref().expect("axis")[i],
            Axis::PairsShots => {
                let (t, s) = cfg.ablate.pairs_shots.as_ref().expect("axis")[i];
                c.sense.pairs = t;
                c.sense.shots = s;
            }
        }
        c.validate()?;
        for seed in cfg.seed..cfg.seed + cfg.ablate.seeds as u64 {
            let run = run_stv(model, &c, seed)?;
            rows.push(AblationRow {
                axis: axis.name().into(),
                setting: label.clone(),
                seed,
                accuracy: run.report.accuracy,
                passes: run.passes.total(),
            });
        }
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage commands
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Train,
    Sense,
    Bank,
    Select,
    Eval,
    Compare,
    Ablate,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Sense => "sense",
            Stage::Bank => "bank",
            Stage::Select => "select",
            Stage::Eval => "eval",
            Stage::Compare => "compare",
            Stage::Ablate => "ablate",
        }
    }

    fn command(&self) -> &'static str {
        match self {
            Stage::Train => "stv train",
            Stage::Sense => "stv sense",
            Stage::Bank => "stv bank",
            Stage::Select => "stv select",
            Stage::Eval => "stv eval",
            Stage::Compare => "stv compare",
            Stage::Ablate => "stv ablate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
    pub config: RunConfig,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Path of an upstream artifact, or an error naming the command that makes it.
fn require(path: PathBuf, producer: Stage) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact {
            path,
            command: producer.command(),
        })
    }
}

/// A freshly created stage directory. Existing directories are kept unless
/// `force` is set, in which case only that stage's directory is replaced.
fn fresh_dir(cfg: &RunConfig, stage: Stage, force: bool) -> Result<PathBuf> {
    let dir = cfg.stage_dir(stage);
    if dir.exists() {
        if !force {
            return Err(Error::Config(format!(
                "{} already exists; stage outputs are write-once (pass --force to replace it)",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn finish(
    cfg: &RunConfig,
    stage: Stage,
    dir: &Path,
    inputs: &[PathBuf],
    outputs: &[&str],
    seconds: f64,
) -> Result<()> {
    let manifest = Manifest {
        stage: stage.name().into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        inputs: inputs
            .iter()
            .map(|p| {
                Ok(InputHash {
                    path: p.clone(),
                    sha256: file_sha256(p)?,
                })
            })
            .collect::<Result<_>>()?,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        config: cfg.clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(dir.join("manifest.json"), bytes)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    fs::write(
        dir.join("timing.json"),
        serde_json::to_vec(&serde_json::json!({ "seconds": seconds }))?,
    )?;
    Ok(())
}

/// Sizes the global worker pool; only the first call has an effect.
pub fn init_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("--threads must be positive".into()));
    }
    // A second initialization is refused by rayon; the pool already exists.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

pub fn load_model(cfg: &RunConfig) -> Result<(Model, PathBuf)> {
    let path = require(cfg.checkpoint_path(), Stage::Train)?;
    let params = load_checkpoint(&path, Some(&cfg.model))?;
    Ok((Model::new(params)?, path))
}

/// Trains the model on the configured task library.
pub fn train_model(cfg: &RunConfig) -> Result<crate::model::TrainReport> {
    let lib = cfg.library();
    let weights: Vec<f64> = lib
        .specs
        .iter()
        .map(|s| cfg.train.weights.get(s.family))
        .collect();
    let (batch, shots) = (cfg.train.batch, cfg.train.min_shots..=cfg.train.shots);
    train(
        &cfg.model,
        |rng: &mut RngState| lib.training_batch(batch, shots.clone(), &weights, rng),
        cfg.train.steps,
        &cfg.train.adam,
        &RngState::new(cfg.train.seed),
    )
}

pub fn cmd_train(cfg: &RunConfig, force: bool) -> Result<PathBuf> {
    let start = Instant::now();
    let dir = fresh_dir(cfg, Stage::Train, force)?;
    let report = train_model(cfg)?;
    save_checkpoint(&report.params, &dir.join("checkpoint.bin"))?;
    let rows: Vec<(usize, f64)> = report.losses.iter().copied().enumerate().collect();
    let mut w = csv::Writer::from_path(dir.join("losses.csv"))?;
    w.write_record(["step", "loss"])?;
    for (s, l) in rows {
        w.write_record([s.to_string(), l.to_string()])?;
    }
    w.flush()?;
    finish(
        cfg,
        Stage::Train,
        &dir,
        &[],
        &["checkpoint.bin", "losses.csv"],
        start.elapsed().as_secs_f64(),
    )?;
    Ok(dir)
}

pub fn cmd_sense(cfg: &RunConfig, force: bool) -> Result<PathBuf> {
    let start = Instant::now();
    let (model, ckpt) = load_model(cfg)?;
    let dir = fresh_dir(cfg, Stage::Sense, force)?;
    let (task, pools) = task_for_seed(cfg, cfg.seed)?;
    let (delta, locs) = sense(&model, &task, &pools, cfg, cfg.seed)?;
    export_heatmap(&delta, cfg.seed, &dir.join("heatmap.csv"))?;
    locs.save(&dir.join("locations.json"))?;
    finish(
        cfg,
        Stage::Sense,
        &dir,
        &[ckpt],
        &["heatmap.csv", "locations.json"],
        start.elapsed().as_secs_f64(),
    )?;
    Ok(dir)
}

pub fn cmd_bank(cfg: &RunConfig, force: bool) -> Result<PathBuf> {
    let start = Instant::now();
    let (model, ckpt) = load_model(cfg)?;
    let locs_path = require(
        cfg.stage_dir(Stage::Sense).join("locations.json"),
        Stage::Sense,
    )?;
    let locs = LocationSet::load(&locs_path)?;
    locs.validate(model.config())?;
    let dir = fresh_dir(cfg, Stage::Bank, force)?;
    let (task, pools) = task_for_seed(cfg, cfg.seed)?;
    let b = bank(&model, &task, &pools, &locs, cfg, cfg.seed)?;
    b.save(&dir.join("bank.bin"))?;
    finish(
        cfg,
        Stage::Bank,
        &dir,
        &[ckpt, locs_path],
        &["bank.bin"],
        start.elapsed().as_secs_f64(),
    )?;
    Ok(dir)
}

pub fn cmd_select(cfg: &RunConfig, force: bool) -> Result<PathBuf> {
    let start = Instant::now();
    let (model, ckpt) = load_model(cfg)?;
    let bank_path = require(cfg.stage_dir(Stage::Bank).join("bank.bin"), Stage::Bank)?;
    let b = ActivationBank::load(&bank_path)?;
    let dir = fresh_dir(cfg, Stage::Select, force)?;
    let (task, pools) = task_for_seed(cfg, cfg.seed)?;
    let (plan, curve) = select(&model, &b, &task, &pools, cfg, cfg.seed)?;
    plan.save(&dir.join("plan.bin"))?;
    write_curve(&curve, &dir.join("rewards.csv"))?;
    finish(
        cfg,
        Stage::Select,
        &dir,
        &[ckpt, bank_path],
        &["plan.bin", "rewards.csv"],
        start.elapsed().as_secs_f64(),
    )?;
    Ok(dir)
}

pub fn cmd_eval(cfg: &RunConfig, force: bool) -> Result<PathBuf> {
    let start = Instant::now();
    let (model, ckpt) = load_model(cfg)?;
    let plan_path = require(cfg.stage_dir(Stage::Select).join("plan.bin"), Stage::Select)?;
    let plan = InterventionPlan::load(&plan_path)?;
    let dir = fresh_dir(cfg, Stage::Eval, force)?;
    let (task, pools) = task_for_seed(cfg, cfg.seed)?;
    let report = eval_plan(&model, "stv", &plan, &task, &pools, cfg, cfg.seed)?;
    report.save_json(&dir.join("report.json"))?;
    let row = CompareRow {
        method: "stv".into(),
        task: task_label(cfg, cfg.seed),
        seed: cfg.seed,
        accuracy: report.accuracy,
        n_queries: report.n_queries,
        passes: report.passes,
    };
    write_csv(&[row], &dir.join("summary.csv"))?;
    finish(
        cfg,
        Stage::Eval,
        &dir,
        &[ckpt, plan_path],
        &["report.json", "summary.csv"],
        start.elapsed().as_secs_f64(),
    )?;
    Ok(dir)
}

pub fn cmd_compare(cfg: &RunConfig, force: bool) -> Result<PathBuf> {
    let start = Instant::now();
    let (model, ckpt) = load_model(cfg)?;
    let dir = fresh_dir(cfg, Stage::Compare, force)?;
    let (rows, reports) = compare(&model, cfg)?;
    write_csv(&rows, &dir.join("compare.csv"))?;
    let mut bytes = serde_json::to_vec_pretty(&reports)?;
    bytes.push(b'\n');
    fs::write(dir.join("reports.json"), bytes)?;
    finish(
        cfg,
        Stage::Compare,
        &dir,
        &[ckpt],
        &["compare.csv", "reports.json"],
        start.elapsed().as_secs_f64(),
    )?;
    Ok(dir)
}

pub fn cmd_ablate(cfg: &RunConfig, force: bool) -> Result<PathBuf> {
    let start = Instant::now();
    cfg.ablate.axis()?;
    let (model, ckpt) = load_model(cfg)?;
    let dir = fresh_dir(cfg, Stage::Ablate, force)?;
    let rows = ablate(&model, cfg)?;
    write_csv(&rows, &dir.join("ablation.csv"))?;
    finish(
        cfg,
        Stage::Ablate,
        &dir,
        &[ckpt],
        &["ablation.csv"],
        start.elapsed().as_secs_f64(),
    )?;
    Ok(dir)
}

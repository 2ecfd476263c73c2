//! Experiment orchestration: configuration, the end-to-end pipeline, sweeps
//! and artifact persistence.
//!
//! A run directory holds:
//!
//! | file | content |
//! |------|---------|
//! | `summary.csv` | `defense,model,k,hr,ndcg`, one row per deployed target or surrogate and cutoff |
//! | `curves.csv` | tidy training curves: `stage,defense,step,metric,value` |
//! | `manifest.json` | config hash, seeds, artifact list, oracle call counts, stage status |
//! | `config.toml` | the resolved configuration |
//! | `target.ckpt`, `target-gro.ckpt` | model checkpoints |
//! | `queries-<defense>.jsonl`, `surrogate-<defense>.ckpt` | attack artifacts |

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evalmetrics::{evaluate, MetricsError, MetricsReport, DEFAULT_KS};
use crate::extraction::{generate_queries, train_surrogate, AttackConfig, ExtractionError, OracleHandle, QueryLog};
use crate::grodefense::{train_with_gro, pretrain_until_plateau, GroConfig, GroError, GroOutcome, PretrainConfig, PretrainReport};
use crate::recmodels::{Architecture, ModelError, SequenceModel};
use crate::seqdata::{
    leave_one_out_split, load_interactions, synth_generate, InputFormat, InteractionDataset, SeqDataError, SplitDataset,
};
use crate::shield::{DefenseMode, Shield};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: {message}")]
    Stage { stage: String, message: String },
    #[error("io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Stage tag for failures inside the pipeline.
    pub fn stage(&self) -> &str {
        match self {
            HarnessError::Stage { stage, .. } => stage,
            HarnessError::Config(_) => "config",
            HarnessError::Io { .. } | HarnessError::Csv(_) => "io",
        }
    }
}

fn stage_err(stage: &str) -> impl Fn(&dyn fmt::Display) -> HarnessError + '_ {
    move |e| HarnessError::Stage {
        stage: stage.to_string(),
        message: e.to_string(),
    }
}

macro_rules! at_stage {
    ($stage:expr, $e:expr) => {
        $e.map_err(|err| stage_err($stage)(&err))
    };
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseKind {
    None,
    Random,
    Reverse,
    Gro,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 4] = [DefenseKind::None, DefenseKind::Random, DefenseKind::Reverse, DefenseKind::Gro];

    pub fn tag(self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::Random => "random",
            DefenseKind::Reverse => "reverse",
            DefenseKind::Gro => "gro",
        }
    }
}

impl fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for DefenseKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DefenseKind::ALL
            .into_iter()
            .find(|d| d.tag() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown defense {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synth,
    File,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FileFormat {
    DelimitedRatings,
    TsvSequences,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub users: usize,
    pub items: usize,
    pub avg_len: usize,
    pub markov_order: usize,
    /// Corpus seed; part of the dataset's identity, not derived from the master seed.
    pub seed: u64,
    pub path: Option<PathBuf>,
    pub format: FileFormat,
    pub separator: String,
    pub min_seq_len: usize,
    pub min_item_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            users: 500,
            items: 200,
            avg_len: 20,
            markov_order: 1,
            seed: 7,
            path: None,
            format: FileFormat::DelimitedRatings,
            separator: "::".into(),
            min_seq_len: 3,
            min_item_count: 5,
        }
    }
}

impl DataConfig {
    pub fn input_format(&self) -> InputFormat {
        match self.format {
            FileFormat::DelimitedRatings => InputFormat::DelimitedRatings {
                separator: self.separator.clone(),
            },
            FileFormat::TsvSequences => InputFormat::TsvSequences,
        }
    }

    pub fn load(&self) -> Result<InteractionDataset, SeqDataError> {
        match self.source {
            DataSource::Synth => synth_generate(self.users, self.items, self.avg_len, self.markov_order, self.seed),
            DataSource::File => {
                let path = self.path.as_ref().ok_or(SeqDataError::InvalidParameter(
                    "data.path is required when data.source = \"file\"".into(),
                ))?;
                load_interactions(path, &self.input_format(), self.min_seq_len, self.min_item_count)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub architecture: Architecture,
    pub dim: usize,
    pub max_len: usize,
    pub pretrain: PretrainConfig,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::AttnLite,
            dim: 32,
            max_len: 20,
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub architecture: Architecture,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::AttnLite,
        }
    }
}

/// Full run description. Every field has a desk-scale default, so an empty
/// file is a valid config. Seeds inside `target.pretrain`, `attack` and `gro`
/// are replaced by seeds derived from the master `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub defenses: Vec<DefenseKind>,
    pub ks: Vec<usize>,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub target: TargetConfig,
    pub surrogate: SurrogateConfig,
    pub attack: AttackConfig,
    pub gro: GroConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            defenses: DefenseKind::ALL.to_vec(),
            ks: DEFAULT_KS.to_vec(),
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            target: TargetConfig::default(),
            surrogate: SurrogateConfig::default(),
            attack: AttackConfig::default(),
            gro: GroConfig::default(),
        }
    }
}

/// First eight bytes of `sha256(master_le || stage)`, little endian.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stage.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub const STAGES: [&str; 6] = ["target-init", "pretrain", "gro", "shield-random", "queries", "surrogate"];

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Copy with every stage seed derived from the master seed.
    pub fn resolved(mut self) -> Self {
        self.target.pretrain.seed = stage_seed(self.seed, "pretrain");
        self.gro.seed = stage_seed(self.seed, "gro");
        self.attack.seed = stage_seed(self.seed, "queries");
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    /// Hex SHA-256 of the resolved config's TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.clone().resolved().to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.defenses.is_empty() {
            return Err(HarnessError::Config("defenses must not be empty".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(HarnessError::Config("ks must be non-empty and positive".into()));
        }
        let mut seen = self.defenses.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.defenses.len() {
            return Err(HarnessError::Config("defenses must not repeat".into()));
        }
        self.attack.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.gro.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn shield_mode(&self, defense: DefenseKind) -> DefenseMode {
        match defense {
            DefenseKind::Random => DefenseMode::Random {
                seed: stage_seed(self.seed, "shield-random"),
            },
            DefenseKind::Reverse => DefenseMode::Reverse,
            DefenseKind::None | DefenseKind::Gro => DefenseMode::None,
        }
    }

    /// List length read by the evaluator: a shielded deployment permutes its
    /// full response, so cutoffs are read from the shielded response.
    pub fn k_eval(&self) -> usize {
        self.attack.k_response.max(self.ks.iter().copied().max().unwrap_or(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub defense: String,
    pub model: String,
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
}

fn rows_from(report: &MetricsReport) -> Vec<SummaryRow> {
    report
        .metrics
        .iter()
        .map(|(&k, m)| SummaryRow {
            defense: report.defense.clone(),
            model: report.role.clone(),
            k,
            hr: m.hr,
            ndcg: m.ndcg,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub stage: String,
    pub defense: String,
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: String,
    pub ok: bool,
    pub message: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub master_seed: u64,
    pub stage_seeds: BTreeMap<String, u64>,
    pub num_users: usize,
    pub num_items: usize,
    pub artifacts: Vec<String>,
    pub oracle_calls: BTreeMap<String, u64>,
    pub pretrain_epochs: usize,
    pub pretrain_best_val_hr: f64,
    pub gro_nonpositive_rows: Option<(usize, usize)>,
    pub stages: Vec<StageStatus>,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub summary: Vec<SummaryRow>,
    pub reports: Vec<MetricsReport>,
    pub curves: Vec<CurveRow>,
    pub manifest: Manifest,
}

impl RunArtifacts {
    pub fn hr(&self, defense: DefenseKind, model: &str, k: usize) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.defense == defense.tag() && r.model == model && r.k == k)
            .map(|r| r.hr)
    }
}

/// Loads and splits the configured corpus.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<SplitDataset, HarnessError> {
    let ds = at_stage!("data", cfg.data.load())?;
    at_stage!("data", leave_one_out_split(&ds))
}

/// Phase one: plain next-item training of the target until validation plateaus.
pub fn pretrain_target(cfg: &ExperimentConfig, split: &SplitDataset) -> Result<(SequenceModel, PretrainReport), HarnessError> {
    let t = &cfg.target;
    let mut model = at_stage!(
        "pretrain",
        SequenceModel::init(t.architecture, split.num_items, t.dim, t.max_len, stage_seed(cfg.seed, "target-init"))
    )?;
    let report = at_stage!("pretrain", pretrain_until_plateau(&mut model, split, &t.pretrain))?;
    Ok((model, report))
}

/// Phase two: GRO fine-tuning of a pretrained target.
pub fn protect_target(cfg: &ExperimentConfig, target: &SequenceModel, split: &SplitDataset) -> Result<GroOutcome, HarnessError> {
    at_stage!("gro", train_with_gro(target, split, &cfg.gro))
}

/// Queries the deployed model through its shield and fits a surrogate.
pub fn run_attack(
    cfg: &ExperimentConfig,
    deployed: Arc<SequenceModel>,
    mode: DefenseMode,
) -> Result<(QueryLog, SequenceModel, u64), HarnessError> {
    let num_items = deployed.num_items();
    let mut oracle = OracleHandle::new(deployed, mode, cfg.attack.k_response);
    let log = at_stage!("queries", generate_queries(&mut oracle, &cfg.attack))?;
    let mut acfg = cfg.attack.clone();
    acfg.seed = stage_seed(cfg.seed, "surrogate");
    let surrogate = at_stage!("surrogate", train_surrogate(&log, cfg.surrogate.architecture, num_items, &acfg))?;
    Ok((log, surrogate, oracle.calls()))
}

fn eval_report(
    cfg: &ExperimentConfig,
    model: &SequenceModel,
    split: &SplitDataset,
    mode: DefenseMode,
    defense: DefenseKind,
    k_eval: usize,
) -> Result<MetricsReport, MetricsError> {
    let mut shield = Shield::new(mode);
    evaluate(model, &split.test_examples(), &mut shield, k_eval, &cfg.ks, defense.tag())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

struct RunState {
    out: PathBuf,
    artifacts: RunArtifacts,
}

impl RunState {
    fn record(&mut self, stage: &str) {
        self.artifacts.manifest.stages.push(StageStatus {
            stage: stage.into(),
            ok: true,
            message: None,
        });
    }

    fn artifact(&mut self, name: &str) -> PathBuf {
        self.artifacts.manifest.artifacts.push(name.into());
        self.out.join(name)
    }

    fn flush(&mut self) -> Result<(), HarnessError> {
        write_csv(&self.out.join("summary.csv"), &self.artifacts.summary)?;
        write_csv(&self.out.join("curves.csv"), &self.artifacts.curves)?;
        let path = self.out.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.artifacts.manifest).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(io_err(&path))
    }
}

/// Full pipeline for every configured defense. On a stage failure the
/// manifest records the stage tag, finished artifacts stay on disk, and the
/// error is returned.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts, HarnessError> {
    let cfg = cfg.clone().resolved();
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let config_path = out.join("config.toml");
    fs::write(&config_path, cfg.to_toml()).map_err(io_err(&config_path))?;

    let manifest = Manifest {
        config_hash: cfg.hash(),
        master_seed: cfg.seed,
        stage_seeds: STAGES.iter().map(|s| (s.to_string(), stage_seed(cfg.seed, s))).collect(),
        artifacts: vec!["config.toml".into(), "summary.csv".into(), "curves.csv".into(), "manifest.json".into()],
        ..Manifest::default()
    };
    let mut state = RunState {
        out: out.clone(),
        artifacts: RunArtifacts {
            out_dir: out,
            summary: Vec::new(),
            reports: Vec::new(),
            curves: Vec::new(),
            manifest,
        },
    };
    let result = pipeline(&cfg, &mut state);
    if let Err(e) = &result {
        state.artifacts.manifest.stages.push(StageStatus {
            stage: e.stage().to_string(),
            ok: false,
            message: Some(e.to_string()),
        });
    }
    state.flush()?;
    result.map(|_| state.artifacts)
}

fn pipeline(cfg: &ExperimentConfig, state: &mut RunState) -> Result<(), HarnessError> {
    let split = prepare_data(cfg)?;
    state.artifacts.manifest.num_users = split.num_users();
    state.artifacts.manifest.num_items = split.num_items;
    state.record("data");

    let (target, report) = pretrain_target(cfg, &split)?;
    let path = state.artifact("target.ckpt");
    at_stage!("pretrain", target.save(&path))?;
    state.artifacts.manifest.pretrain_epochs = report.epochs_run;
    state.artifacts.manifest.pretrain_best_val_hr = report.best_val_hr;
    for (i, (loss, hr)) in report.train_loss.iter().zip(&report.val_hr).enumerate() {
        for (metric, value) in [("train_loss", *loss), ("val_hr@10", *hr)] {
            state.artifacts.curves.push(CurveRow {
                stage: "pretrain".into(),
                defense: "none".into(),
                step: i + 1,
                metric: metric.into(),
                value,
            });
        }
    }
    state.record("pretrain");

    let target = Arc::new(target);
    let k_eval = cfg.k_eval();
    for &defense in &cfg.defenses {
        let deployed = if defense == DefenseKind::Gro {
            let outcome = protect_target(cfg, &target, &split)?;
            let path = state.artifact("target-gro.ckpt");
            at_stage!("gro", outcome.target.save(&path))?;
            state.artifacts.manifest.gro_nonpositive_rows = Some((outcome.nonpositive_rows, outcome.rows));
            for p in &outcome.curve {
                for (metric, value) in [("l_target", p.l_target), ("l_student", p.l_student), ("l_swap", p.l_swap)] {
                    state.artifacts.curves.push(CurveRow {
                        stage: "gro".into(),
                        defense: "gro".into(),
                        step: p.step,
                        metric: metric.into(),
                        value,
                    });
                }
            }
            state.record("gro");
            Arc::new(outcome.target)
        } else {
            target.clone()
        };
        let mode = cfg.shield_mode(defense);

        let report = at_stage!("evaluate", eval_report(cfg, &deployed, &split, mode, defense, k_eval))?;
        state.artifacts.summary.extend(rows_from(&report));
        state.artifacts.reports.push(report);

        let (log, surrogate, calls) = run_attack(cfg, deployed, mode)?;
        let path = state.artifact(&format!("queries-{defense}.jsonl"));
        at_stage!("queries", log.save(&path))?;
        let path = state.artifact(&format!("surrogate-{defense}.ckpt"));
        at_stage!("surrogate", surrogate.save(&path))?;
        state.artifacts.manifest.oracle_calls.insert(defense.tag().into(), calls);

        let max_k = cfg.ks.iter().copied().max().unwrap_or(1);
        let report = at_stage!(
            "evaluate",
            eval_report(cfg, &surrogate, &split, DefenseMode::None, defense, max_k)
        )?;
        state.artifacts.summary.extend(rows_from(&report));
        state.artifacts.reports.push(report);
        state.record(&format!("attack-{defense}"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Lambda,
    NQueries,
}

impl FromStr for SweepAxis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "n-queries" | "n_queries" => Ok(SweepAxis::NQueries),
            other => Err(HarnessError::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::NQueries => "n-queries",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub defense: String,
    pub model: String,
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub runs: Vec<(f64, Result<RunArtifacts, HarnessError>)>,
    pub merged: PathBuf,
}

impl SweepAxis {
    fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::Lambda => cfg.gro.lambda = value,
            SweepAxis::NQueries => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(HarnessError::Config(format!("n_queries must be a positive integer, got {value}")));
                }
                cfg.attack.n_queries = value as usize;
            }
        }
        cfg.out_dir = base.out_dir.join(format!("{self}={value}"));
        Ok(cfg)
    }
}

/// One run per value with only `axis` changed; writes `sweep.csv` under the
/// base output directory. Individual failures are kept and the sweep goes on.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<SweepOutcome, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one value".into()));
    }
    base.validate()?;
    fs::create_dir_all(&base.out_dir).map_err(io_err(&base.out_dir))?;
    let mut runs = Vec::with_capacity(values.len());
    let mut merged = Vec::new();
    for &value in values {
        let result = axis.apply(base, value).and_then(|cfg| run_experiment(&cfg));
        if let Ok(art) = &result {
            merged.extend(art.summary.iter().map(|r| SweepRow {
                axis: axis.to_string(),
                value,
                defense: r.defense.clone(),
                model: r.model.clone(),
                k: r.k,
                hr: r.hr,
                ndcg: r.ndcg,
            }));
        }
        runs.push((value, result));
    }
    let path = base.out_dir.join("sweep.csv");
    write_csv(&path, &merged)?;
    Ok(SweepOutcome { runs, merged: path })
}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        stage_err("model")(&e)
    }
}

impl From<ExtractionError> for HarnessError {
    fn from(e: ExtractionError) -> Self {
        stage_err("attack")(&e)
    }
}

impl From<GroError> for HarnessError {
    fn from(e: GroError) -> Self {
        stage_err("gro")(&e)
    }
}

impl From<MetricsError> for HarnessError {
    fn from(e: MetricsError) -> Self {
        stage_err("evaluate")(&e)
    }
}

impl From<SeqDataError> for HarnessError {
    fn from(e: SeqDataError) -> Self {
        stage_err("data")(&e)
    }
}

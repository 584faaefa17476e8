//! Run configuration and the stage-by-stage pipeline with on-disk caching.
//!
//! Every stage writes into `<out_dir>/<stage>/` and records a `stage.json`
//! holding a key chained from all upstream stage keys plus the stage's own
//! settings, and the sha256 digest of each artifact it wrote. Expensive
//! stages (model, sae, baseline, scores, cells) reload their artifacts when
//! the key and every digest still match.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    load_bls_reference, load_names, load_professions, uniform_reference, write_names, CategorySet, Dimension, NameTable,
    ReferenceDistribution,
};
use crate::deskmodel::checkpoint::{transformer_checkpoint, transformer_from_checkpoint, Checkpoint};
use crate::deskmodel::planted::planted_desk;
use crate::deskmodel::train::{train_toy_transformer, training_corpus, CorpusMix, TrainConfig};
use crate::deskmodel::world::{DeskWorld, WorldConfig};
use crate::deskmodel::{
    forward_with_capture, Backend, CaptureRequest, DeskBackend, Generation, GenerationConfig, HookPoint, TransformerConfig,
};
use crate::error::{AuditError, Result};
use crate::intervention::{
    baseline_generate, cell_records, default_targets, plan_grid, read_cell_records, run_cross_task_grid, write_cell_records, BatchLines,
    CellId, CellRecord, Condition, GridInputs,
};
use crate::math;
use crate::metrics::{evaluate_cell, MetricsReport, NGramScorer, Observation, Truth};
use crate::parser::{parse_output, render_pairs};
use crate::promptgen::{build_prompt_set, write_manifest, Direction, PromptSet, TaskKind, TaskSpec};
use crate::report;
use crate::sae::{planted_sae, r_squared, train_sae, SaeBank, SaeParams, SaeTrainConfig, SaeTrainReport};
use crate::scoring::{
    build_feature_sets, cumulative_mass, score_records, score_task, scoring_prompts, write_score_dump, Aggregate, FeatureSet, MassCurve,
    ScoringConfig, SourceTask, Strategy, TaskScores,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Corpus,
    Prompts,
    Model,
    Sae,
    Baseline,
    Scores,
    Sets,
    Cells,
    Metrics,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Corpus,
        Stage::Prompts,
        Stage::Model,
        Stage::Sae,
        Stage::Baseline,
        Stage::Scores,
        Stage::Sets,
        Stage::Cells,
        Stage::Metrics,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::Prompts => "prompts",
            Stage::Model => "model",
            Stage::Sae => "sae",
            Stage::Baseline => "baseline",
            Stage::Scores => "scores",
            Stage::Sets => "sets",
            Stage::Cells => "cells",
            Stage::Metrics => "metrics",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = AuditError;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| AuditError::Config(format!("unknown stage `{s}` (expected one of {})", Stage::ALL.map(|s| s.name()).join(", "))))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendChoice {
    PlantedLinear,
    ToyTransformer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPaths {
    pub names: PathBuf,
    pub professions: PathBuf,
    #[serde(default)]
    pub bls: Option<PathBuf>,
    /// Keep only the first N names of each race-gender group, in file order.
    #[serde(default)]
    pub names_per_group: Option<usize>,
}

fn default_directions() -> Vec<Direction> {
    vec![Direction::DemoR]
}

fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

fn default_k() -> usize {
    100
}

fn default_ig_steps() -> usize {
    ScoringConfig::default().ig_steps
}

fn default_max_new_tokens() -> usize {
    GenerationConfig::default().max_new_tokens
}

fn default_sae_samples() -> usize {
    30
}

fn default_k_grid() -> Vec<usize> {
    vec![1, 2, 5, 10, 20, 50, 100, 150, 200, 256]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub backend: BackendChoice,
    pub out_dir: PathBuf,
    pub corpus: CorpusPaths,
    pub tasks: Vec<TaskKind>,
    #[serde(default = "default_directions")]
    pub directions: Vec<Direction>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_ig_steps")]
    pub ig_steps: usize,
    #[serde(default)]
    pub aggregate: Aggregate,
    /// Residual layers to score and ablate; every layer when absent.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default)]
    pub keep_error: bool,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    /// Evenly spaced subsample of scoring prompts per source task.
    #[serde(default)]
    pub max_scoring_prompts: Option<usize>,
    #[serde(default = "default_sae_samples")]
    pub sae_samples_per_item: usize,
    #[serde(default = "default_k_grid")]
    pub k_grid: Vec<usize>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub mix: CorpusMix,
    #[serde(default)]
    pub sae: SaeTrainConfig,
}

impl RunConfig {
    /// Parse a TOML config. Relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AuditError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| AuditError::Config(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        fix(&mut self.corpus.names);
        fix(&mut self.corpus.professions);
        if let Some(b) = self.corpus.bls.as_mut() {
            fix(b);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AuditError::Config(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.tasks.is_empty() || self.directions.is_empty() || self.strategies.is_empty() {
            return bad("tasks, directions and strategies must be non-empty".into());
        }
        if self.ig_steps == 0 {
            return bad("ig_steps must be at least 1".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        if self.tasks.contains(&TaskKind::EducationProfession) && self.corpus.bls.is_none() {
            return bad("the education task needs corpus.bls".into());
        }
        if self.backend == BackendChoice::PlantedLinear {
            if self.directions != [Direction::DemoR] {
                return bad("the planted backend supports only the demo-r direction".into());
            }
            let dims: BTreeSet<_> = self.tasks.iter().map(|t| t.dimension()).collect();
            if dims.len() != 1 || dims.contains(&Dimension::Education) {
                return bad("the planted backend needs tasks from exactly one of the race or gender dimensions".into());
            }
        }
        Ok(())
    }

    /// Seeds of every nested component, derived from the master seed.
    fn seeded(&self) -> (WorldConfig, TrainConfig, SaeTrainConfig) {
        let world = WorldConfig { seed: math::derive_seed(self.seed, 11), ..self.world };
        let train = TrainConfig { seed: math::derive_seed(self.seed, 12), ..self.train };
        let sae = SaeTrainConfig { seed: math::derive_seed(self.seed, 13), ..self.sae };
        (world, train, sae)
    }

    fn sources(&self) -> Vec<SourceTask> {
        let mut out = Vec::new();
        for &direction in &self.directions {
            out.extend(self.tasks.iter().map(|&kind| SourceTask { kind, direction }));
        }
        out
    }

    fn generation(&self) -> GenerationConfig {
        GenerationConfig { max_new_tokens: self.max_new_tokens }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn task_label(t: SourceTask) -> String {
    format!("{}.{}", t.kind, t.direction)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub key: String,
    /// Artifact path relative to the stage directory, mapped to its sha256.
    pub artifacts: BTreeMap<String, String>,
}

struct StageDir {
    stage: Stage,
    dir: PathBuf,
    key: String,
    artifacts: BTreeMap<String, String>,
}

impl StageDir {
    fn open<P: Serialize>(root: &Path, stage: Stage, parent_key: &str, params: &P) -> Result<Self> {
        let dir = root.join(stage.name());
        fs::create_dir_all(&dir)?;
        let mut material = format!("{parent_key}\n{stage}\n").into_bytes();
        material.extend(serde_json::to_vec(params)?);
        Ok(StageDir { stage, dir, key: sha256_hex(&material), artifacts: BTreeMap::new() })
    }

    /// The previous record when its key matches and every artifact is intact.
    fn reusable(&self) -> Option<StageRecord> {
        let text = fs::read(self.dir.join("stage.json")).ok()?;
        let rec: StageRecord = serde_json::from_slice(&text).ok()?;
        if rec.key != self.key || rec.stage != self.stage {
            return None;
        }
        for (file, digest) in &rec.artifacts {
            let bytes = fs::read(self.dir.join(file)).ok()?;
            if &sha256_hex(&bytes) != digest {
                return None;
            }
        }
        Some(rec)
    }

    fn adopt(&mut self, rec: StageRecord) {
        self.artifacts = rec.artifacts;
    }

    fn write(&mut self, file: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(file);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        fs::write(&path, bytes)?;
        self.artifacts.insert(file.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn write_json<T: Serialize + ?Sized>(&mut self, file: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(file, &bytes)
    }

    fn read_json<T: DeserializeOwned>(&self, file: &str) -> Result<T> {
        Ok(serde_json::from_reader(BufReader::new(fs::File::open(self.dir.join(file))?))?)
    }

    fn commit(self) -> Result<StageRecord> {
        let rec = StageRecord { stage: self.stage, key: self.key, artifacts: self.artifacts };
        let mut bytes = serde_json::to_vec_pretty(&rec)?;
        bytes.push(b'\n');
        fs::write(self.dir.join("stage.json"), bytes)?;
        Ok(rec)
    }
}

/// What a pipeline invocation produced.
#[derive(Debug, Clone, Default)]
pub struct PipelineOutcome {
    pub out_dir: PathBuf,
    pub stages: Vec<StageRecord>,
    /// Stages whose cached artifacts were reused.
    pub reused: Vec<Stage>,
    pub reports: Vec<MetricsReport>,
}

struct CorpusData {
    names: NameTable,
    professions: Vec<String>,
    bls: Option<ReferenceDistribution>,
}

/// Run every stage up to and including `until` (all stages when `None`).
pub fn run_pipeline(cfg: &RunConfig, until: Option<Stage>) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| AuditError::Config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| Runner::new(cfg, until).run())
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    until: Stage,
    root: PathBuf,
    key: String,
    out: PipelineOutcome,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a RunConfig, until: Option<Stage>) -> Self {
        Runner {
            cfg,
            until: until.unwrap_or(Stage::Report),
            root: cfg.out_dir.clone(),
            key: String::new(),
            out: PipelineOutcome { out_dir: cfg.out_dir.clone(), ..Default::default() },
        }
    }

    /// Run `body` as stage `stage`, wrapping errors with the stage name.
    fn stage<P: Serialize, T>(&mut self, stage: Stage, params: &P, body: impl FnOnce(&mut StageDir, bool) -> Result<T>) -> Result<T> {
        let go = || -> Result<(T, StageRecord, bool)> {
            let mut dir = StageDir::open(&self.root, stage, &self.key, params)?;
            let prior = dir.reusable();
            let reuse = prior.is_some();
            if let Some(rec) = prior {
                dir.adopt(rec);
            }
            let value = body(&mut dir, reuse)?;
            Ok((value, dir.commit()?, reuse))
        };
        let (value, rec, reused) = go().map_err(|e| e.in_stage(stage.name()))?;
        log::info!("stage {stage}: {}", if reused { "reused cached artifacts" } else { "computed" });
        if reused {
            self.out.reused.push(stage);
        }
        self.key = rec.key.clone();
        self.out.stages.push(rec);
        Ok(value)
    }

    fn done(&self, stage: Stage) -> bool {
        stage >= self.until
    }

    fn finish(mut self) -> Result<PipelineOutcome> {
        let manifest = serde_json::json!({
            "config": self.cfg,
            "stages": self.out.stages,
            "formats": artifact_formats(),
        });
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(self.root.join("manifest.json"), bytes)?;
        self.out.out_dir = self.root.clone();
        Ok(self.out)
    }

    fn run(mut self) -> Result<PipelineOutcome> {
        let cfg = self.cfg;
        fs::create_dir_all(&self.root).map_err(|e| AuditError::from(e).in_stage(Stage::Corpus.name()))?;
        let (world_cfg, train_cfg, sae_cfg) = cfg.seeded();

        let corpus = self.corpus_stage()?;
        if self.done(Stage::Corpus) {
            return self.finish();
        }

        let world = DeskWorld::build(&corpus.names, &corpus.professions, corpus.bls.as_ref(), &cfg.tasks, world_cfg)
            .map_err(|e| e.in_stage(Stage::Prompts.name()))?;
        let sources = cfg.sources();
        let prompts = self.stage(Stage::Prompts, &(cfg.seed, &cfg.tasks, &cfg.directions, world_cfg), |dir, _| {
            let specs: Vec<TaskSpec> = sources
                .iter()
                .map(|s| match s.kind {
                    TaskKind::EducationProfession => TaskSpec::new(s.kind, s.direction, corpus.bls.clone()),
                    _ => TaskSpec::with_uniform(s.kind, s.direction),
                })
                .collect::<Result<_>>()?;
            let set = build_prompt_set(&corpus.names.names(), &corpus.professions, &specs, math::derive_seed(cfg.seed, 10))?;
            let lines = batch_lines(&world, &set)?;
            let mut manifest = Vec::new();
            write_manifest(&set.prompts, &mut manifest)?;
            dir.write("manifest.jsonl", &manifest)?;
            let keyed: BTreeMap<String, &Vec<BatchLines>> = lines.iter().map(|(k, v)| (task_label(*k), v)).collect();
            dir.write_json("lines.json", &keyed)?;
            dir.write_json("dropped.json", &serde_json::json!({ "names": set.dropped_names, "professions": set.dropped_professions }))?;
            Ok(lines)
        })?;
        if self.done(Stage::Prompts) {
            return self.finish();
        }

        let model_params = match cfg.backend {
            BackendChoice::PlantedLinear => serde_json::json!({ "backend": cfg.backend }),
            BackendChoice::ToyTransformer => serde_json::json!({ "backend": cfg.backend, "train": train_cfg, "mix": cfg.mix }),
        };
        let backend = self.stage(Stage::Model, &model_params, |dir, reuse| build_model(cfg, &world, &corpus, train_cfg, dir, reuse))?;
        let depth = backend.capabilities().depth;
        let layers: Vec<usize> = cfg.layers.clone().unwrap_or_else(|| (0..depth).collect());
        if let Some(l) = layers.iter().find(|&&l| l >= depth) {
            return Err(AuditError::Config(format!("layer {l} out of range for a depth-{depth} backend")).in_stage(Stage::Model.name()));
        }
        if self.done(Stage::Model) {
            return self.finish();
        }

        let bank = self.stage(Stage::Sae, &(&layers, sae_cfg, cfg.sae_samples_per_item), |dir, reuse| {
            build_saes(cfg, &world, &backend, &layers, sae_cfg, dir, reuse)
        })?;
        if self.done(Stage::Sae) {
            return self.finish();
        }

        let gen = cfg.generation();
        let baselines: BTreeMap<SourceTask, Vec<Generation>> = self.stage(Stage::Baseline, &gen, |dir, reuse| {
            if reuse {
                let keyed: BTreeMap<String, Vec<Generation>> = dir.read_json("generations.json")?;
                return sources.iter().map(|s| Ok((*s, lookup(&keyed, &task_label(*s))?.clone()))).collect();
            }
            let mut out = BTreeMap::new();
            let mut outputs = Vec::new();
            for (task, batches) in &prompts {
                let gens = baseline_generate(&backend, batches, gen)?;
                for (b, g) in batches.iter().zip(&gens) {
                    outputs.push(
                        serde_json::json!({ "task": task_label(*task), "batch_id": b.batch_id, "raw_output": g.render(&world.vocab) }),
                    );
                }
                out.insert(*task, gens);
            }
            let keyed: BTreeMap<String, &Vec<Generation>> = out.iter().map(|(k, v)| (task_label(*k), v)).collect();
            dir.write_json("generations.json", &keyed)?;
            dir.write("outputs.jsonl", &jsonl(&outputs)?)?;
            Ok(out)
        })?;
        if self.done(Stage::Baseline) {
            return self.finish();
        }

        let scoring = ScoringConfig { ig_steps: cfg.ig_steps, aggregate: cfg.aggregate };
        let scores: BTreeMap<SourceTask, TaskScores> = self.stage(Stage::Scores, &(scoring, cfg.max_scoring_prompts), |dir, reuse| {
            if reuse {
                let keyed: BTreeMap<String, TaskScores> = dir.read_json("scores.json")?;
                return sources.iter().map(|s| Ok((*s, lookup(&keyed, &task_label(*s))?.clone()))).collect();
            }
            let mut out = BTreeMap::new();
            for &source in &sources {
                let cats = CategorySet::for_dimension(source.kind.dimension());
                let lines: Vec<_> = lookup(&baselines, &source)?.iter().flat_map(|g| g.lines.iter().cloned()).collect();
                let prompts = subsample(scoring_prompts(&lines, &world.vocab, &cats.labels), cfg.max_scoring_prompts);
                let s = score_task(&backend, &bank, &prompts, cats.len(), &scoring).map_err(|e| match e {
                    AuditError::Validation(m) => AuditError::Validation(format!("source {source}: {m}")),
                    other => other,
                })?;
                let mut dump = Vec::new();
                write_score_dump(&score_records(&s), &mut dump)?;
                dir.write(&format!("{}.csv", task_label(source)), &dump)?;
                out.insert(source, s);
            }
            let keyed: BTreeMap<String, &TaskScores> = out.iter().map(|(k, v)| (task_label(*k), v)).collect();
            dir.write_json("scores.json", &keyed)?;
            Ok(out)
        })?;
        if self.done(Stage::Scores) {
            return self.finish();
        }

        let sets: BTreeMap<(SourceTask, Strategy), FeatureSet> = self.stage(Stage::Sets, &(cfg.k, &cfg.strategies), |dir, _| {
            let mut out = BTreeMap::new();
            for (&source, s) in &scores {
                for set in build_feature_sets(&s.attribution, &s.correlation, cfg.k, source)? {
                    if cfg.strategies.contains(&set.name) {
                        out.insert((source, set.name), set);
                    }
                }
            }
            let listed: Vec<&FeatureSet> = out.values().collect();
            dir.write_json("manifest.json", &listed)?;
            Ok(out)
        })?;
        if self.done(Stage::Sets) {
            return self.finish();
        }

        let plan = plan_grid(&sources, &cfg.strategies, |s| default_targets(s, &sources));
        let hooks: Vec<HookPoint> = layers.iter().map(|&layer| HookPoint { layer }).collect();
        let records: Vec<CellRecord> = self.stage(Stage::Cells, &cfg.keep_error, |dir, reuse| {
            if reuse {
                return read_cell_records(BufReader::new(fs::File::open(dir.dir.join("cells.jsonl"))?));
            }
            let inputs = GridInputs {
                bank: &bank,
                layers: &hooks,
                sets: &sets,
                prompts: &prompts,
                baselines: &baselines,
                gen,
                keep_error: cfg.keep_error,
            };
            let cells = run_cross_task_grid(&backend, &plan, &inputs)?;
            let mut recs = Vec::new();
            for c in &cells {
                recs.extend(cell_records(c, lookup(&prompts, &c.id.target)?, &world.vocab));
            }
            let mut buf = Vec::new();
            write_cell_records(&recs, &mut buf)?;
            dir.write("cells.jsonl", &buf)?;
            Ok(recs)
        })?;
        if self.done(Stage::Cells) {
            return self.finish();
        }

        let reports = self.stage(Stage::Metrics, &(), |dir, _| {
            let reports = compute_metrics(&plan, &records, &prompts, &baselines, &world, &corpus)?;
            let lines: Vec<_> = reports.iter().flat_map(|r| r.records()).collect();
            dir.write("metrics.jsonl", &jsonl(&lines)?)?;
            dir.write_json("reports.json", &reports)?;
            Ok(reports)
        })?;
        self.out.reports = reports.clone();
        if self.done(Stage::Metrics) {
            return self.finish();
        }

        self.stage(Stage::Report, &(&cfg.k_grid, cfg.k), |dir, _| emit_report(cfg, &scores, &reports, dir))?;
        self.finish()
    }

    fn corpus_stage(&mut self) -> Result<CorpusData> {
        let cfg = self.cfg;
        let read =
            |p: &Path, what: &str| fs::read(p).map_err(|e| AuditError::Config(format!("cannot read {what} file {}: {e}", p.display())));
        let inputs = (|| -> Result<_> {
            let names = read(&cfg.corpus.names, "names")?;
            let profs = read(&cfg.corpus.professions, "professions")?;
            let bls = cfg.corpus.bls.as_ref().map(|p| read(p, "BLS")).transpose()?;
            Ok((names, profs, bls))
        })()
        .map_err(|e| e.in_stage(Stage::Corpus.name()))?;
        let digests = (sha256_hex(&inputs.0), sha256_hex(&inputs.1), inputs.2.as_deref().map(sha256_hex), cfg.corpus.names_per_group);
        self.stage(Stage::Corpus, &digests, |dir, _| {
            let (names_raw, profs_raw, bls_raw) = inputs;
            let mut names = load_names(names_raw.as_slice())?;
            if let Some(n) = cfg.corpus.names_per_group {
                let mut seen: BTreeMap<_, usize> = BTreeMap::new();
                let kept: Vec<_> = names
                    .records
                    .iter()
                    .filter(|r| {
                        let c = seen.entry((r.race, r.gender)).or_default();
                        *c += 1;
                        *c <= n
                    })
                    .cloned()
                    .collect();
                let mut buf = Vec::new();
                write_names(&kept, &mut buf)?;
                names = load_names(buf.as_slice())?;
            }
            let (profs, warnings) = load_professions(profs_raw.as_slice())?;
            for w in &warnings {
                log::warn!("professions: {w}");
            }
            let professions: Vec<String> = profs.into_iter().map(|p| p.name).collect();
            let bls = bls_raw.map(|b| load_bls_reference(b.as_slice())).transpose()?;
            if let Some(b) = &bls {
                if let Some(p) = professions.iter().find(|p| b.for_item(p).is_err()) {
                    return Err(AuditError::Lookup(format!("profession `{p}` has no BLS row")));
                }
            }
            let mut buf = Vec::new();
            write_names(&names.records, &mut buf)?;
            dir.write("names.csv", &buf)?;
            dir.write("professions.txt", professions.iter().map(|p| format!("{p}\n")).collect::<String>().as_bytes())?;
            if let Some(b) = &bls {
                dir.write_json("reference.json", b)?;
            }
            Ok(CorpusData { names, professions, bls })
        })
    }
}

fn lookup<'m, K: Ord + fmt::Display, V>(map: &'m BTreeMap<K, V>, key: &K) -> Result<&'m V> {
    map.get(key).ok_or_else(|| AuditError::Lookup(format!("no entry for `{key}`")))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn subsample<T>(items: Vec<T>, max: Option<usize>) -> Vec<T> {
    match max {
        Some(m) if m > 0 && items.len() > m => {
            let n = items.len();
            let picks: BTreeSet<usize> = (0..m).map(|i| i * n / m).collect();
            items.into_iter().enumerate().filter(|(i, _)| picks.contains(i)).map(|(_, t)| t).collect()
        }
        _ => items,
    }
}

fn batch_lines(world: &DeskWorld, set: &PromptSet) -> Result<BTreeMap<SourceTask, Vec<BatchLines>>> {
    let mut out: BTreeMap<SourceTask, Vec<BatchLines>> = BTreeMap::new();
    for p in &set.prompts {
        let task = SourceTask { kind: p.task.kind, direction: p.task.direction };
        let lines = world.batch_lines(p.task.kind, p.task.direction, &p.items, p.batch_id)?;
        out.entry(task).or_default().push(BatchLines { batch_id: p.batch_id, items: p.items.clone(), lines });
    }
    Ok(out)
}

fn gold_map(names: &NameTable, dimension: Dimension) -> BTreeMap<String, String> {
    names.records.iter().filter_map(|r| Some((r.name.clone(), r.label_for(dimension)?))).collect()
}

fn build_model(
    cfg: &RunConfig,
    world: &DeskWorld,
    corpus: &CorpusData,
    train_cfg: TrainConfig,
    dir: &mut StageDir,
    reuse: bool,
) -> Result<DeskBackend> {
    match cfg.backend {
        BackendChoice::PlantedLinear => {
            let dimension = cfg.tasks[0].dimension();
            let gold = gold_map(&corpus.names, dimension);
            let stereotypes = match cfg.tasks.iter().find(|t| !t.is_name_task()) {
                Some(&k) => world.stereotypes(k)?,
                None => BTreeMap::new(),
            };
            let model = planted_desk(&world.vocab, dimension, &gold, &stereotypes, math::derive_seed(cfg.seed, 14))?;
            if !reuse {
                dir.write_json("capabilities.json", &model.capabilities())?;
            }
            Ok(DeskBackend::Planted(model))
        }
        BackendChoice::ToyTransformer => {
            if reuse {
                let ck = Checkpoint::read(BufReader::new(fs::File::open(dir.dir.join("checkpoint.json"))?), "toy-transformer")?;
                return Ok(DeskBackend::Toy(transformer_from_checkpoint(&ck)?));
            }
            let tasks: Vec<(TaskKind, Direction)> = cfg.sources().iter().map(|s| (s.kind, s.direction)).collect();
            let lines = training_corpus(world, &tasks, cfg.mix, math::derive_seed(cfg.seed, 15))?;
            let (model, report) = train_toy_transformer(&lines, TransformerConfig::desk(world.vocab.len()), &train_cfg)?;
            let mut buf = Vec::new();
            transformer_checkpoint(&model)?.write(&mut buf)?;
            dir.write("checkpoint.json", &buf)?;
            dir.write_json("train_report.json", &report)?;
            dir.write_json("capabilities.json", &model.capabilities())?;
            Ok(DeskBackend::Toy(model))
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SaeSummary {
    layer: usize,
    train: SaeTrainReport,
    held_out_r2: f64,
}

fn build_saes(
    cfg: &RunConfig,
    world: &DeskWorld,
    backend: &DeskBackend,
    layers: &[usize],
    sae_cfg: SaeTrainConfig,
    dir: &mut StageDir,
    reuse: bool,
) -> Result<SaeBank> {
    let mut bank = SaeBank::default();
    match backend {
        DeskBackend::Planted(p) => {
            for &layer in layers {
                bank.insert(planted_sae(&p.features, p.n_features(), p.width, layer)?);
            }
        }
        DeskBackend::Toy(model) if reuse => {
            for &layer in layers {
                let file = dir.dir.join(format!("layer{layer}.json"));
                let ck = Checkpoint::read(BufReader::new(fs::File::open(file)?), "sae")?;
                bank.insert(SaeParams::from_checkpoint(&ck)?);
            }
            return Ok(bank);
        }
        DeskBackend::Toy(model) => {
            let tasks: Vec<(TaskKind, Direction)> = cfg.sources().iter().map(|s| (s.kind, s.direction)).collect();
            let mix = CorpusMix { samples_per_item: cfg.sae_samples_per_item, uncued_repeats: 0 };
            let lines = training_corpus(world, &tasks, mix, math::derive_seed(cfg.seed, 16))?;
            for &layer in layers {
                let req = |p: usize| [CaptureRequest { hook: HookPoint { layer }, position: p }];
                let samples: Vec<Vec<f64>> = lines
                    .iter()
                    .map(|tl| Ok(forward_with_capture(model, &tl.tokens[..=tl.start], &req(tl.start))?.1.remove(0)))
                    .collect::<Result<_>>()?;
                let (train, held) = samples.split_at(samples.len() * 9 / 10);
                let (sae, report) = train_sae(train, layer, &sae_cfg)?;
                let summary = SaeSummary { layer, held_out_r2: r_squared(&sae, held)?, train: report };
                dir.write_json(&format!("layer{layer}_report.json"), &summary)?;
                bank.insert(sae);
            }
        }
    }
    for &layer in layers {
        let mut buf = Vec::new();
        bank.get(layer)?.to_checkpoint()?.write(&mut buf)?;
        dir.write(&format!("layer{layer}.json"), &buf)?;
    }
    Ok(bank)
}

fn compute_metrics(
    plan: &[CellId],
    records: &[CellRecord],
    prompts: &BTreeMap<SourceTask, Vec<BatchLines>>,
    baselines: &BTreeMap<SourceTask, Vec<Generation>>,
    world: &DeskWorld,
    corpus: &CorpusData,
) -> Result<Vec<MetricsReport>> {
    let mut well_formed = Vec::new();
    for (task, gens) in baselines {
        let cats = CategorySet::for_dimension(task.kind.dimension());
        for g in gens {
            let parsed = parse_output(&g.render(&world.vocab), task.direction).validate(&cats);
            let pairs: Vec<(&str, &str)> = parsed.pairs.iter().filter(|p| p.valid).map(|p| (p.item.as_str(), p.label.as_str())).collect();
            if !pairs.is_empty() {
                well_formed.push(render_pairs(&pairs, task.direction));
            }
        }
    }
    let scorer = NGramScorer::fit(3, &well_formed);

    let mut by_cell: BTreeMap<(&str, Condition), BTreeMap<u64, &str>> = BTreeMap::new();
    for r in records {
        by_cell.entry((r.cell_id.as_str(), r.condition)).or_default().insert(r.prompt_id, r.raw_output.as_str());
    }
    let mut reports = Vec::with_capacity(plan.len());
    for id in plan {
        let name = id.to_string();
        let batches = lookup(prompts, &id.target)?;
        let cats = CategorySet::for_dimension(id.target.kind.dimension());
        let outputs = |cond: Condition| -> Result<Vec<String>> {
            let m = by_cell.get(&(name.as_str(), cond)).ok_or_else(|| AuditError::Lookup(format!("cell {name}: no {cond:?} outputs")))?;
            batches
                .iter()
                .map(|b| {
                    m.get(&b.batch_id)
                        .map(|s| s.to_string())
                        .ok_or_else(|| AuditError::Lookup(format!("cell {name}: batch {} missing", b.batch_id)))
                })
                .collect()
        };
        let (raw_b, raw_a) = (outputs(Condition::Baseline)?, outputs(Condition::Ablated)?);
        let observe = |raw: &[String]| -> Vec<Observation> {
            batches
                .iter()
                .zip(raw)
                .map(|(b, r)| Observation { items: b.items.clone(), parsed: parse_output(r, id.target.direction).validate(&cats) })
                .collect()
        };
        let (ob, oa) = (observe(&raw_b), observe(&raw_a));
        let gold;
        let uniform;
        let truth = if id.target.kind.is_name_task() {
            gold = gold_map(&corpus.names, cats.dimension);
            Truth::Gold(&gold)
        } else if id.target.kind == TaskKind::EducationProfession {
            Truth::Reference(corpus.bls.as_ref().ok_or_else(|| AuditError::Config("education target without a BLS reference".into()))?)
        } else {
            uniform = uniform_reference(&cats);
            Truth::Reference(&uniform)
        };
        let ids = (task_label(id.source), id.strategy.to_string(), task_label(id.target));
        reports.push(evaluate_cell((&ids.0, &ids.1, &ids.2), &cats, truth, &ob, &oa, (&raw_b, &raw_a), &scorer)?);
    }
    Ok(reports)
}

fn emit_report(cfg: &RunConfig, scores: &BTreeMap<SourceTask, TaskScores>, reports: &[MetricsReport], dir: &mut StageDir) -> Result<()> {
    let points = report::quadrant_points(reports);
    dir.write("quadrant.svg", report::emit_quadrant_plot(&points).as_bytes())?;
    let mut grid: Vec<usize> = cfg.k_grid.clone();
    grid.push(cfg.k);
    grid.sort_unstable();
    grid.dedup();
    for (source, s) in scores {
        let curves: Vec<MassCurve> = s.attribution.iter().map(|(&l, v)| cumulative_mass(l, v, &grid)).collect::<Result<_>>()?;
        dir.write(&format!("topk_{}.svg", task_label(*source)), report::emit_topk_curve(&curves, cfg.k).as_bytes())?;
    }
    for r in reports.iter().filter(|r| !r.per_item_kl_baseline.is_empty() || !r.per_item_kl_ablated.is_empty()) {
        let title = format!("{} / {} on {}", r.source_task, r.strategy, r.target_task);
        let svg = report::emit_profession_bars(&title, &r.per_item_kl_baseline, &r.per_item_kl_ablated);
        dir.write(&format!("bars/{}__{}__{}.svg", r.source_task, r.strategy, r.target_task), svg.as_bytes())?;
    }
    let mut table = Vec::new();
    report::write_metrics_table(reports, &mut table)?;
    dir.write("metrics_table.csv", &table)?;
    let omissions: String = report::omissions(reports, &points).into_iter().map(|l| l + "\n").collect();
    dir.write("omissions.txt", omissions.as_bytes())?;
    Ok(())
}

/// Human-readable description of every artifact, written into the run manifest.
pub fn artifact_formats() -> BTreeMap<&'static str, &'static str> {
    BTreeMap::from([
        ("<stage>/stage.json", "JSON: stage name, chained cache key, sha256 of each artifact in the stage directory"),
        ("corpus/names.csv", "CSV with header name,race,gender: the names used by this run"),
        ("corpus/professions.txt", "one profession per line"),
        (
            "corpus/reference.json",
            "JSON reference distribution over education levels per profession (present when a BLS file is configured)",
        ),
        ("prompts/manifest.jsonl", "JSON lines: batch_id, task, direction, items, rendered prompt text"),
        ("prompts/lines.json", "JSON: per task, the token-level line prompts of each batch"),
        ("prompts/dropped.json", "JSON: names and professions dropped by batching"),
        (
            "model/checkpoint.json",
            "tensor container (format biasaudit-tensors, kind toy-transformer) with shape manifest; toy backend only",
        ),
        ("model/train_report.json", "JSON: per-epoch training loss and step count; toy backend only"),
        ("model/capabilities.json", "JSON: depth, width, vocabulary, context length, gradient support"),
        ("sae/layer<L>.json", "tensor container (kind sae) bound to residual layer L"),
        ("sae/layer<L>_report.json", "JSON: SAE training objective per epoch, mean L0, train and held-out R²; toy backend only"),
        ("baseline/generations.json", "JSON: per task, token-level generations of every batch"),
        ("baseline/outputs.jsonl", "JSON lines: task, batch_id, rendered raw output"),
        ("scores/<task>.csv", "CSV with header layer,feature,method,value"),
        ("scores/scores.json", "JSON: per source task, attribution and correlation scores per layer plus degenerate-feature flags"),
        ("sets/manifest.json", "JSON list of feature sets: strategy, members (layer, index), k, source task"),
        ("cells/cells.jsonl", "JSON lines: cell_id, prompt_id, condition (baseline or ablated), raw_output"),
        ("metrics/metrics.jsonl", "JSON lines: source_task, strategy, target_task, metric, value, defined"),
        ("metrics/reports.json", "JSON list of full per-cell metric reports including per-item KL"),
        ("report/quadrant.svg", "SVG scatter of accuracy change against KL change per source and strategy"),
        ("report/topk_<task>.svg", "SVG cumulative attribution mass against k per layer"),
        ("report/bars/<cell>.svg", "SVG paired per-item KL bars for profession targets"),
        ("report/metrics_table.csv", "CSV: one row per cell, one column per scalar metric; empty when undefined"),
        ("report/omissions.txt", "undefined metrics and plot points that were left out"),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
backend = "planted-linear"
out_dir = "out"
tasks = ["gender-name", "gender-profession"]
[corpus]
names = "data/names.csv"
professions = "data/professions.txt"
"#;

    #[test]
    fn config_defaults_and_paths() {
        let mut cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.k, 100);
        assert_eq!(cfg.strategies, Strategy::ALL.to_vec());
        assert_eq!(cfg.directions, vec![Direction::DemoR]);
        assert_eq!(cfg.layers, None);
        cfg.resolve_paths(Path::new("/cfg"));
        assert_eq!(cfg.corpus.names, PathBuf::from("/cfg/data/names.csv"));
        assert_eq!(cfg.out_dir, PathBuf::from("/cfg/out"));
        cfg.validate().unwrap();
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut cfg = RunConfig::from_toml(MINIMAL).unwrap();
        cfg.k = 0;
        assert!(matches!(cfg.validate(), Err(AuditError::Config(_))));
        let mut cfg = RunConfig::from_toml(MINIMAL).unwrap();
        cfg.tasks.push(TaskKind::RaceName);
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::from_toml(MINIMAL).unwrap();
        cfg.directions = vec![Direction::DemoL];
        assert!(cfg.validate().is_err());
        assert!(RunConfig::from_toml(&format!("{MINIMAL}\nbogus = 1")).is_err());
    }

    #[test]
    fn nested_seeds_follow_master_seed() {
        let mut a = RunConfig::from_toml(MINIMAL).unwrap();
        let (w1, t1, s1) = a.seeded();
        a.seed += 1;
        let (w2, t2, s2) = a.seeded();
        assert_ne!(w1.seed, w2.seed);
        assert_ne!(t1.seed, t2.seed);
        assert_ne!(s1.seed, s2.seed);
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("nope".parse::<Stage>().is_err());
    }

    #[test]
    fn subsample_is_even() {
        assert_eq!(subsample((0..10).collect(), Some(5)), vec![0, 2, 4, 6, 8]);
        assert_eq!(subsample((0..3).collect(), Some(5)), vec![0, 1, 2]);
    }

    #[test]
    fn missing_names_file_names_corpus_stage() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::from_toml(MINIMAL).unwrap();
        cfg.resolve_paths(tmp.path());
        let err = run_pipeline(&cfg, None).unwrap_err();
        assert!(matches!(&err, AuditError::Stage { stage, .. } if stage == "corpus"), "{err}");
        assert!(err.to_string().contains("corpus"));
    }
}

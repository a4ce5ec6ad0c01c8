use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use tkg_refine::adapters::AdapterModel;
use tkg_refine::eval::{EvalMode, MetricsReport, Predictor};
use tkg_refine::fusion::FusionMode;
use tkg_refine::kg::{augment_inverse, load_dataset, write_dataset, DatasetSplit, Query, SplitPart, TemporalKg};
use tkg_refine::lm::backend::ScriptedBehavior;
use tkg_refine::lm::{
    default_max_tokens, precompute_cache, CacheMeta, DistributionCache, Generation, LanguageModel, PrecomputeJob, ScriptedLm,
    ScriptedSpec,
};
use tkg_refine::prompt::RelationLexicon;
use tkg_refine::retrieval::Strategy;
use tkg_refine::rules::{mine_rules, RuleStore};
use tkg_refine::synthetic::{recurrence_dataset, RecurrenceConfig};
use tkg_refine::train::{train_adapter, write_log_csv, TrainData};
use tkg_refine::{Error, Result};

use crate::config::{AdapterKind, ExperimentConfig, GateChoice, Stage, KEYS_HELP};

#[derive(Parser, Debug)]
#[command(
    name = "tkg-refine",
    version,
    about = "Temporal knowledge graph forecasting: rule mining, cached language-model candidates and trainable adapters",
    after_help = KEYS_HELP
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArg {
    /// Experiment configuration file.
    #[arg(long, short)]
    pub config: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelOverrides {
    #[arg(long, value_enum)]
    pub adapter: Option<AdapterKind>,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    #[arg(long, value_enum)]
    pub gate: Option<GateChoice>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FusionArg {
    Mixture,
    Product,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GenerationArg {
    Beam,
    Iterative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    Full,
    NoBsl,
    NoAdapter,
    AdapterOnly,
    TlogicStatic,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => EvalMode::Full,
            ModeArg::NoBsl => EvalMode::NoBsl,
            ModeArg::NoAdapter => EvalMode::NoAdapter,
            ModeArg::AdapterOnly => EvalMode::AdapterOnly,
            ModeArg::TlogicStatic => EvalMode::TlogicStatic,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Mine temporal rules from the training period.
    Mine(ConfigArg),
    /// Fill the language-model candidate cache for every query (resumable).
    Precompute {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_enum, default_value = "beam")]
        generation: GenerationArg,
    },
    /// Train an adapter and gate against the cached candidates.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        overrides: ModelOverrides,
    },
    /// Evaluate one mode and write JSON and text reports.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_enum, default_value = "full")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[command(flatten)]
        overrides: ModelOverrides,
        /// Also write per-query ranks as newline-delimited JSON.
        #[arg(long)]
        dump_ranks: bool,
    },
    /// Collect every report of the experiment into one table.
    Report(ConfigArg),
    /// Print dataset statistics.
    Stats(ConfigArg),
    /// Write a generated recurrence dataset, a scripted backend that is always
    /// wrong, and a matching configuration.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Process exit code for an error: 2 usage/configuration, 3 missing or
/// mismatched artifact, 4 data error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::MissingArtifact(_) | Error::CacheMiss(_) | Error::HashMismatch { .. } | Error::Checkpoint(_) => 3,
        _ => 4,
    }
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Mine(c) => cmd_mine(&load(&c.config, &ModelOverrides::default())?),
        Command::Precompute { config, generation } => {
            let g = match generation {
                GenerationArg::Beam => Generation::Beam,
                GenerationArg::Iterative => Generation::Iterative,
            };
            cmd_precompute(&load(&config.config, &ModelOverrides::default())?, g)
        }
        Command::Train { config, overrides } => cmd_train(&load(&config.config, &overrides)?),
        Command::Eval {
            config,
            mode,
            split,
            overrides,
            dump_ranks,
        } => {
            let part = match split {
                SplitArg::Valid => SplitPart::Valid,
                SplitArg::Test => SplitPart::Test,
            };
            cmd_eval(&load(&config.config, &overrides)?, mode.into(), part, dump_ranks)
        }
        Command::Report(c) => cmd_report(&load(&c.config, &ModelOverrides::default())?),
        Command::Stats(c) => cmd_stats(&load(&c.config, &ModelOverrides::default())?),
        Command::Synth { out, seed } => cmd_synth(&out, seed),
    }
}

fn load(path: &Path, o: &ModelOverrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(a) = o.adapter {
        cfg.adapter = a;
    }
    if let Some(f) = o.fusion {
        cfg.fusion = match f {
            FusionArg::Mixture => FusionMode::Mixture,
            FusionArg::Product => FusionMode::Product,
        };
    }
    if let Some(g) = o.gate {
        cfg.gate = g;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Canonical artifact paths of one experiment directory.
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            root: cfg.output_dir.clone(),
        }
    }

    pub fn rules(&self) -> PathBuf {
        self.root.join("rules/rules.ndjson")
    }

    pub fn rules_meta(&self) -> PathBuf {
        self.root.join("rules/rules.meta.json")
    }

    pub fn cache(&self, g: Generation) -> PathBuf {
        self.root.join(match g {
            Generation::Beam => "cache/beam.ndjson",
            Generation::Iterative => "cache/iterative.ndjson",
        })
    }

    pub fn checkpoint(&self, a: AdapterKind) -> PathBuf {
        self.root.join(format!("ckpt/{}.ckpt", a.as_str()))
    }

    pub fn train_log(&self, a: AdapterKind) -> PathBuf {
        self.root.join(format!("ckpt/{}_train_log.csv", a.as_str()))
    }

    pub fn frozen_config(&self, a: AdapterKind) -> PathBuf {
        self.root.join(format!("ckpt/{}_config.toml", a.as_str()))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub struct Experiment {
    pub kg: TemporalKg,
    pub split: DatasetSplit,
    pub queries: Vec<Query>,
}

impl Experiment {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let (kg, split) = load_dataset(&cfg.dataset_dir, cfg.interval)?;
        let relations = kg.relation_count();
        let queries = split.all_queries(cfg.inverse_queries, relations);
        Ok(Self {
            kg: augment_inverse(&kg)?,
            split,
            queries,
        })
    }

    pub fn part(&self, part: SplitPart) -> Vec<Query> {
        self.queries.iter().filter(|q| q.part == part).copied().collect()
    }

    /// History visible to rule mining: the training period only.
    pub fn mining_horizon(&self) -> u32 {
        self.split.train_times.1 + 1
    }
}

#[derive(Serialize, Deserialize)]
struct RulesMeta {
    config_hash: String,
    total: usize,
    per_head: BTreeMap<u32, usize>,
    confidence_histogram: [usize; 10],
}

fn load_rules(cfg: &ExperimentConfig) -> Result<RuleStore> {
    let layout = Layout::new(cfg);
    let (meta_path, path) = (layout.rules_meta(), layout.rules());
    if !meta_path.exists() || !path.exists() {
        return Err(Error::MissingArtifact(format!("rule store {} (run `mine`)", path.display())));
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: RulesMeta = serde_json::from_str(&text)?;
    let expected = cfg.hash(Stage::Rules);
    if meta.config_hash != expected {
        return Err(Error::HashMismatch {
            expected,
            found: meta.config_hash,
        });
    }
    RuleStore::read_ndjson(&path)
}

fn load_cache(cfg: &ExperimentConfig, g: Generation) -> Result<DistributionCache> {
    let path = Layout::new(cfg).cache(g);
    if !path.exists() {
        let flag = if g == Generation::Iterative { " --generation iterative" } else { "" };
        return Err(Error::MissingArtifact(format!("LM cache {} (run `precompute{flag}`)", path.display())));
    }
    let cache = DistributionCache::load(&path)?;
    let expected = cfg.hash(Stage::Cache);
    if cache.meta.config_hash != expected {
        return Err(Error::HashMismatch {
            expected,
            found: cache.meta.config_hash.clone(),
        });
    }
    Ok(cache)
}

fn require_coverage(cache: &DistributionCache, queries: &[Query]) -> Result<()> {
    let missing = cache.missing(queries);
    if missing.is_empty() {
        return Ok(());
    }
    let shown: Vec<String> = missing.iter().take(20).map(|q| q.to_string()).collect();
    let more = if missing.len() > 20 { format!(" and {} more", missing.len() - 20) } else { String::new() };
    Err(Error::MissingArtifact(format!(
        "cache lacks {} queries: {}{more} (rerun `precompute`)",
        missing.len(),
        shown.join(", ")
    )))
}

pub fn backend(cfg: &ExperimentConfig) -> Result<Box<dyn LanguageModel>> {
    let Some(path) = cfg.backend.strip_prefix("scripted:") else {
        return Err(Error::Config(if cfg.backend.is_empty() {
            "no backend configured (expected `backend = \"scripted:<spec.json>\"`)".to_string()
        } else {
            format!("backend {:?} is not available in this build; only scripted:<spec.json> is", cfg.backend)
        }));
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: ScriptedSpec = serde_json::from_str(&text)?;
    Ok(Box::new(ScriptedLm::new(spec).map_err(Error::Config)?))
}

fn lexicon(cfg: &ExperimentConfig, relations: u32) -> Result<RelationLexicon> {
    match &cfg.relation_names {
        Some(p) => RelationLexicon::load_tsv(p, relations, true),
        None => Ok(RelationLexicon::numbered(relations, true)),
    }
}

pub fn cmd_mine(cfg: &ExperimentConfig) -> Result<String> {
    let exp = Experiment::load(cfg)?;
    let store = mine_rules(exp.kg.history_before(exp.mining_horizon()), &cfg.mining())?;
    let layout = Layout::new(cfg);
    ensure_parent(&layout.rules())?;
    store.write_ndjson(&layout.rules())?;
    let stats = store.stats();
    let meta = RulesMeta {
        config_hash: cfg.hash(Stage::Rules),
        total: stats.total,
        per_head: stats.per_head,
        confidence_histogram: stats.confidence_histogram,
    };
    write(&layout.rules_meta(), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(format!("mined {} rules -> {}\n", meta.total, layout.rules().display()))
}

pub fn cmd_precompute(cfg: &ExperimentConfig, generation: Generation) -> Result<String> {
    let lm = backend(cfg)?;
    let exp = Experiment::load(cfg)?;
    let rules = if cfg.retrieval == Strategy::RuleBased { Some(load_rules(cfg)?) } else { None };
    let lex = lexicon(cfg, exp.kg.relation_count())?;
    let max_tokens = if cfg.max_tokens == 0 { default_max_tokens(exp.kg.entity_count()) } else { cfg.max_tokens };
    let job = PrecomputeJob {
        lm: lm.as_ref(),
        kg: &exp.kg,
        queries: &exp.queries,
        retrieval: cfg.retrieval_config(),
        rules: rules.as_ref(),
        lexicon: &lex,
        prompt: cfg.prompt(),
        k: cfg.k,
        max_tokens,
        generation,
    };
    let meta = CacheMeta {
        model: lm.name(),
        config_hash: cfg.hash(Stage::Cache),
        k: cfg.k,
        max_tokens,
        generation,
    };
    let path = Layout::new(cfg).cache(generation);
    let stats = precompute_cache(&job, &path, &meta)?;
    Ok(format!(
        "cache {}: {} computed, {} already present\n",
        path.display(),
        stats.computed,
        stats.skipped
    ))
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<String> {
    let exp = Experiment::load(cfg)?;
    let cache = load_cache(cfg, Generation::Beam)?;
    let (train, valid) = (exp.part(SplitPart::Train), exp.part(SplitPart::Valid));
    require_coverage(&cache, &train)?;
    require_coverage(&cache, &valid)?;
    let rules = match cfg.adapter {
        AdapterKind::Rule => Some(Arc::new(load_rules(cfg)?)),
        AdapterKind::Gnn => None,
    };
    let model = AdapterModel::new(cfg.model(), exp.kg.relation_vocab(), rules, cfg.seed)?;
    let data = TrainData {
        kg: &exp.kg,
        cache: &cache,
        fusion: cfg.fusion_config(),
        softmax: cfg.softmax,
    };
    let out = train_adapter(model, &data, &train, &valid, &cfg.train_config())?;
    let layout = Layout::new(cfg);
    let ckpt = layout.checkpoint(cfg.adapter);
    ensure_parent(&ckpt)?;
    out.best.save(&ckpt, &cfg.hash(Stage::Checkpoint))?;
    write_log_csv(&out.log, &layout.train_log(cfg.adapter))?;
    write(&layout.frozen_config(cfg.adapter), cfg.to_toml())?;
    Ok(format!(
        "trained {} adapter; best epoch {} -> {}\n",
        cfg.adapter.as_str(),
        out.best_epoch,
        ckpt.display()
    ))
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct ReportFile {
    pub config_hash: String,
    pub mode: String,
    pub adapter: Option<String>,
    pub split: String,
    pub artifacts: BTreeMap<String, String>,
    pub metrics: MetricsReport,
}

/// Records a missing artifact instead of failing, so all gaps are listed at once.
fn absent_ok<T>(r: Result<T>, missing: &mut Vec<String>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::MissingArtifact(m)) => {
            missing.push(m);
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn report_stem(mode: EvalMode, adapter: Option<AdapterKind>, split: SplitPart) -> String {
    let split = match split {
        SplitPart::Train => "train",
        SplitPart::Valid => "valid",
        SplitPart::Test => "test",
    };
    match adapter {
        Some(a) => format!("{}_{}_{split}", mode.as_str(), a.as_str()),
        None => format!("{}_{split}", mode.as_str()),
    }
}

pub fn cmd_eval(cfg: &ExperimentConfig, mode: EvalMode, split: SplitPart, dump_ranks: bool) -> Result<String> {
    let exp = Experiment::load(cfg)?;
    let queries = exp.part(split);
    let uses_model = matches!(mode, EvalMode::Full | EvalMode::NoBsl | EvalMode::AdapterOnly);
    let uses_rules = mode == EvalMode::TlogicStatic || (uses_model && cfg.adapter == AdapterKind::Rule);
    let generation = if mode == EvalMode::NoBsl { Generation::Iterative } else { Generation::Beam };
    let uses_cache = matches!(mode, EvalMode::Full | EvalMode::NoBsl | EvalMode::NoAdapter);

    let mut missing = Vec::new();
    let mut artifacts = BTreeMap::new();
    let mut rules = None;
    if uses_rules {
        rules = absent_ok(load_rules(cfg), &mut missing)?.map(Arc::new);
        artifacts.insert("rules".to_string(), cfg.hash(Stage::Rules));
    }
    let mut cache = None;
    if uses_cache {
        cache = absent_ok(load_cache(cfg, generation), &mut missing)?;
        artifacts.insert("cache".to_string(), cfg.hash(Stage::Cache));
    }
    let mut model = None;
    if uses_model {
        let path = Layout::new(cfg).checkpoint(cfg.adapter);
        if !path.exists() {
            missing.push(format!("adapter checkpoint {} (run `train --adapter {}`)", path.display(), cfg.adapter.as_str()));
        } else if !(uses_rules && rules.is_none()) {
            let (m, _) = AdapterModel::load(&path, rules.clone(), Some(&cfg.hash(Stage::Checkpoint)))?;
            model = Some(m);
        }
        artifacts.insert("checkpoint".to_string(), cfg.hash(Stage::Checkpoint));
    }
    if !missing.is_empty() {
        return Err(Error::MissingArtifact(format!("{} mode needs: {}", mode.as_str(), missing.join("; "))));
    }
    if let Some(c) = &cache {
        require_coverage(c, &queries)?;
    }
    let predictor = Predictor {
        mode,
        kg: &exp.kg,
        cache: cache.as_ref(),
        model: model.as_ref(),
        rules: rules.as_deref(),
        fusion: cfg.fusion_config(),
        softmax: cfg.softmax,
        static_scoring: cfg.static_scoring(),
    };
    let (metrics, records) = predictor.evaluate(&queries)?;
    let adapter = uses_model.then_some(cfg.adapter);
    let stem = report_stem(mode, adapter, split);
    let report = ReportFile {
        config_hash: cfg.hash(Stage::Report),
        mode: mode.as_str().to_string(),
        adapter: adapter.map(|a| a.as_str().to_string()),
        split: stem.rsplit('_').next().unwrap_or("test").to_string(),
        artifacts,
        metrics,
    };
    let dir = Layout::new(cfg).reports();
    write(&dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&report)? + "\n")?;
    let table = metrics.to_table(&stem);
    write(&dir.join(format!("{stem}.txt")), &table)?;
    if dump_ranks {
        let mut text = String::new();
        for r in &records {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        write(&dir.join(format!("{stem}.ranks.ndjson")), text)?;
    }
    Ok(table)
}

pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String> {
    let dir = Layout::new(cfg).reports();
    let mut names: Vec<PathBuf> = match fs::read_dir(&dir) {
        Ok(it) => it
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    if names.is_empty() {
        return Err(Error::MissingArtifact(format!("no reports in {} (run `eval`)", dir.display())));
    }
    names.sort();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:>8} {:>8} {:>8} {:>8}",
        "report", "queries", "hits@1", "hits@3", "hits@10"
    );
    for p in names {
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let r: ReportFile = serde_json::from_str(&text)?;
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let h = r.metrics.overall;
        let _ = writeln!(out, "{:<28} {:>8} {:>8.4} {:>8.4} {:>8.4}", stem, h.count, h.hits1, h.hits3, h.hits10);
    }
    write(&dir.join("summary.txt"), &out)?;
    Ok(out)
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct DatasetStats {
    pub entities: u32,
    pub relations: u32,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub snapshots: usize,
    pub duplicates_dropped: usize,
}

pub fn dataset_stats(cfg: &ExperimentConfig) -> Result<DatasetStats> {
    let (kg, split) = load_dataset(&cfg.dataset_dir, cfg.interval)?;
    Ok(DatasetStats {
        entities: kg.entity_count(),
        relations: kg.relation_count(),
        train: split.lines_read[0],
        valid: split.lines_read[1],
        test: split.lines_read[2],
        snapshots: kg.num_snapshots(),
        duplicates_dropped: kg.duplicates_dropped(),
    })
}

pub fn cmd_stats(cfg: &ExperimentConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(&dataset_stats(cfg)?)? + "\n")
}

pub fn cmd_synth(out: &Path, seed: u64) -> Result<String> {
    let rc = RecurrenceConfig {
        seed,
        ..RecurrenceConfig::default()
    };
    let split = recurrence_dataset(&rc)?;
    write_dataset(&out.join("data"), rc.entity_count(), rc.relations, &split, 1)?;
    let spec = ScriptedSpec {
        entity_count: rc.entity_count(),
        behavior: ScriptedBehavior::Wrong { spread: 20 },
        noise: 0.01,
        seed,
    };
    write(&out.join("wrong_lm.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
    let cfg = ExperimentConfig {
        dataset_dir: "data".into(),
        output_dir: "run".into(),
        inverse_queries: false,
        backend: "scripted:wrong_lm.json".into(),
        seed,
        ..ExperimentConfig::default()
    };
    let path = out.join("config.toml");
    write(&path, cfg.to_toml())?;
    Ok(format!("wrote {}\n", path.display()))
}

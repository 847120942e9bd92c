//! Experiment runner behind the `rapid` binary.
//!
//! # Configuration file
//!
//! One `key = value` pair per line. `#` starts a comment, blank lines are
//! ignored, unknown keys are an error. Relative paths are resolved against the
//! directory holding the file. Command-line flags are applied after the file
//! and win.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `mode` | subcommand | `verify`, `simulate`, `sweep` or `cost`; must match the subcommand if given |
//! | `corpus`, `target`, `drafter` | | corpus file and the two backend files |
//! | `out` | | output directory |
//! | `query` | | space-separated token ids, used for retrieval and as the generation prefix |
//! | `context_doc` | 0 | corpus line the target reads |
//! | `retrieval_doc` | `context_doc` | corpus line the drafter retrieves from |
//! | `retrieval` | `select` | `select` (budgeted chunk selection), `full` (whole document) or `none` |
//! | `gold` | | token counted as task success when emitted first |
//! | `gamma`, `eta`, `temperature`, `tail_factor`, `max_tokens`, `seed`, `bonus_token` | 10, 0, 1, 0.1, 64, 0, false | engine |
//! | `chunk_size`, `sim_threshold`, `min_budget`, `lambda`, `embed_dim` | 512, 0.3, 4096, 24, 64 | retrieval |
//! | `repetitions` | 1 | runs per setting; run `i` uses seed `seed + i` |
//! | `etas` | 0 5 10 20 40 50 | sweep grid, ascending |
//! | `target_params`, `drafter_params`, `retrieval_len`, `beta_sd`, `beta_rapid` | 8e9, 8e9, 4096, 0.6, 0.8 | cost model (`gamma` is shared) |
//! | `context_lens` | 1024 2048 ... 131072 | cost model grid |
//! | `crossover_threshold` | 1 | speedup that counts as a crossover |
//!
//! Lists accept spaces or commas as separators.
//!
//! # Exit codes
//!
//! 0 success, 1 verification failure, 2 configuration error, 3 internal
//! invariant breach.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cost::{self, CostParams};
use crate::engine::{augmented_target, generate, EngineConfig, Generation, GenerationStats, ETA_GRID};
use crate::error::{Error, Result};
use crate::fixtures::{self, Scenario};
use crate::json::Sig17;
use crate::lm::{AnyLm, LmBackend, ProbVector, Token, TokenSeq};
use crate::oracle::{eta_curve_csv, eta_divergence_curve, exact_step_distribution};
use crate::retrieval::{read_corpus, retrieve, RetrievalConfig};
use crate::sampling::{softmax_t, Temperature, RNG_ALGORITHM};
use crate::verify::{run_verify, Kernels, Mutation};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

/// Exit code for an error surfacing from a command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Invariant(_) | Error::DegenerateResidual | Error::NonFinite { .. } => EXIT_INVARIANT,
        _ => EXIT_CONFIG,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Verify,
    Simulate,
    Sweep,
    Cost,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Verify => "verify",
            Mode::Simulate => "simulate",
            Mode::Sweep => "sweep",
            Mode::Cost => "cost",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "verify" => Ok(Mode::Verify),
            "simulate" => Ok(Mode::Simulate),
            "sweep" => Ok(Mode::Sweep),
            "cost" => Ok(Mode::Cost),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

/// Where the drafter's context comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrievalMode {
    Select,
    Full,
    None,
}

impl RetrievalMode {
    fn name(self) -> &'static str {
        match self {
            RetrievalMode::Select => "select",
            RetrievalMode::Full => "full",
            RetrievalMode::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Option<Mode>,
    pub corpus: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub drafter: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub query: TokenSeq,
    pub context_doc: usize,
    pub retrieval_doc: Option<usize>,
    pub retrieval_mode: RetrievalMode,
    pub gold: Option<Token>,
    pub engine: EngineConfig,
    pub retrieval: RetrievalConfig,
    pub repetitions: usize,
    pub etas: Vec<f64>,
    pub cost: CostParams,
    pub context_lens: Vec<f64>,
    pub crossover_threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: None,
            corpus: None,
            target: None,
            drafter: None,
            out: None,
            query: Vec::new(),
            context_doc: 0,
            retrieval_doc: None,
            retrieval_mode: RetrievalMode::Select,
            gold: None,
            engine: EngineConfig::default(),
            retrieval: RetrievalConfig::default(),
            repetitions: 1,
            etas: ETA_GRID.to_vec(),
            cost: cost::default_params(),
            context_lens: cost::default_lengths(),
            crossover_threshold: 1.0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).map(|s| parse_num(key, s)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

impl ExperimentConfig {
    /// Parses a configuration file body; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, message: format!("expected key = value, got {line:?}") })?;
            cfg.set(key.trim(), value.trim(), base)
                .map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    /// Sets one key. Relative paths resolve against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let path = || -> Result<PathBuf> {
            if value.is_empty() {
                return Err(Error::Config(format!("{key}: empty path")));
            }
            let p = Path::new(value);
            Ok(if p.is_absolute() { p.to_path_buf() } else { base.join(p) })
        };
        match key {
            "mode" => self.mode = Some(Mode::parse(value)?),
            "corpus" => self.corpus = Some(path()?),
            "target" => self.target = Some(path()?),
            "drafter" => self.drafter = Some(path()?),
            "out" => self.out = Some(path()?),
            "query" => self.query = parse_list(key, value)?,
            "context_doc" => self.context_doc = parse_num(key, value)?,
            "retrieval_doc" => self.retrieval_doc = Some(parse_num(key, value)?),
            "retrieval" => {
                self.retrieval_mode = match value {
                    "select" => RetrievalMode::Select,
                    "full" => RetrievalMode::Full,
                    "none" => RetrievalMode::None,
                    _ => return Err(Error::Config(format!("retrieval: expected select, full or none, got {value:?}"))),
                }
            }
            "gold" => self.gold = Some(parse_num(key, value)?),
            "gamma" => {
                self.engine.gamma = parse_num(key, value)?;
                self.cost.gamma = self.engine.gamma as f64;
            }
            "eta" => self.engine.eta = parse_num(key, value)?,
            "temperature" => self.engine.temperature = Temperature::new(parse_num(key, value)?)?,
            "tail_factor" => self.engine.tail_factor = parse_num(key, value)?,
            "max_tokens" => self.engine.max_tokens = parse_num(key, value)?,
            "seed" => self.engine.seed = parse_num(key, value)?,
            "bonus_token" => self.engine.bonus_token = parse_bool(key, value)?,
            "chunk_size" => self.retrieval.chunk_size = parse_num(key, value)?,
            "sim_threshold" => self.retrieval.sim_threshold = parse_num(key, value)?,
            "min_budget" => self.retrieval.min_budget = parse_num(key, value)?,
            "lambda" => self.retrieval.lambda = parse_num(key, value)?,
            "embed_dim" => self.retrieval.embed_dim = parse_num(key, value)?,
            "repetitions" => self.repetitions = parse_num(key, value)?,
            "etas" => self.etas = parse_list(key, value)?,
            "target_params" => self.cost.target_params = parse_num(key, value)?,
            "drafter_params" => self.cost.drafter_params = parse_num(key, value)?,
            "retrieval_len" => self.cost.retrieval_len = parse_num(key, value)?,
            "beta_sd" => self.cost.beta_sd = parse_num(key, value)?,
            "beta_rapid" => self.cost.beta_rapid = parse_num(key, value)?,
            "context_lens" => self.context_lens = parse_list(key, value)?,
            "crossover_threshold" => self.crossover_threshold = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Canonical form of the configuration: every key, fixed order, absolute
    /// paths. Loading the snapshot reproduces this configuration.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(m) = self.mode {
            kv("mode", m.name().into());
        }
        for (k, p) in
            [("corpus", &self.corpus), ("target", &self.target), ("drafter", &self.drafter), ("out", &self.out)]
        {
            if let Some(p) = p {
                kv(k, std::path::absolute(p).unwrap_or_else(|_| p.clone()).display().to_string());
            }
        }
        kv("query", join(&self.query));
        kv("context_doc", self.context_doc.to_string());
        if let Some(d) = self.retrieval_doc {
            kv("retrieval_doc", d.to_string());
        }
        kv("retrieval", self.retrieval_mode.name().into());
        if let Some(g) = self.gold {
            kv("gold", g.to_string());
        }
        let e = &self.engine;
        kv("gamma", e.gamma.to_string());
        kv("eta", e.eta.to_string());
        kv("temperature", e.temperature.get().to_string());
        kv("tail_factor", e.tail_factor.to_string());
        kv("max_tokens", e.max_tokens.to_string());
        kv("seed", e.seed.to_string());
        kv("bonus_token", e.bonus_token.to_string());
        let r = &self.retrieval;
        kv("chunk_size", r.chunk_size.to_string());
        kv("sim_threshold", r.sim_threshold.to_string());
        kv("min_budget", r.min_budget.to_string());
        kv("lambda", r.lambda.to_string());
        kv("embed_dim", r.embed_dim.to_string());
        kv("repetitions", self.repetitions.to_string());
        kv("etas", join(&self.etas));
        let c = &self.cost;
        kv("target_params", c.target_params.to_string());
        kv("drafter_params", c.drafter_params.to_string());
        kv("retrieval_len", c.retrieval_len.to_string());
        kv("beta_sd", c.beta_sd.to_string());
        kv("beta_rapid", c.beta_rapid.to_string());
        kv("context_lens", join(&self.context_lens));
        kv("crossover_threshold", self.crossover_threshold.to_string());
        s
    }

    /// Checks the fields `mode` needs.
    pub fn validate_for(&self, mode: Mode) -> Result<()> {
        if let Some(m) = self.mode {
            if m != mode {
                return Err(Error::Config(format!("config is for mode {}, not {}", m.name(), mode.name())));
            }
        }
        match mode {
            Mode::Verify => Ok(()),
            Mode::Cost => {
                self.cost.validate()?;
                if self.context_lens.is_empty() {
                    return Err(Error::Config("context_lens is empty".into()));
                }
                Ok(())
            }
            Mode::Simulate | Mode::Sweep => {
                for (name, p) in [("corpus", &self.corpus), ("target", &self.target), ("drafter", &self.drafter)] {
                    match p {
                        None => return Err(Error::Config(format!("{name} is required for {}", mode.name()))),
                        Some(p) if !p.is_file() => {
                            return Err(Error::Config(format!("{name} file {} does not exist", p.display())))
                        }
                        Some(_) => {}
                    }
                }
                if self.out.is_none() {
                    return Err(Error::Config(format!("out is required for {}", mode.name())));
                }
                if self.retrieval_mode == RetrievalMode::Select {
                    if self.query.is_empty() {
                        return Err(Error::Config("query is required for chunk retrieval".into()));
                    }
                    self.retrieval.validate()?;
                }
                if self.repetitions == 0 {
                    return Err(Error::Config("repetitions must be at least 1".into()));
                }
                self.engine.validate()?;
                if mode == Mode::Sweep {
                    if self.etas.is_empty() {
                        return Err(Error::Config("etas is empty".into()));
                    }
                    if self.etas.windows(2).any(|w| !(w[0] < w[1])) || self.etas.iter().any(|e| !(*e >= 0.0)) {
                        return Err(Error::Config("etas must be non-negative and strictly ascending".into()));
                    }
                }
                Ok(())
            }
        }
    }

    fn seeds(&self) -> Vec<u64> {
        (0..self.repetitions as u64).map(|i| self.engine.seed.wrapping_add(i)).collect()
    }
}

/// Loaded inputs of a simulate or sweep run.
pub struct Workspace {
    pub target: AnyLm,
    pub drafter: AnyLm,
    pub context: TokenSeq,
    pub retrieved: TokenSeq,
    /// Retrieval trace CSV; only the header when retrieval is `full` or `none`.
    pub retrieval_csv: String,
}

impl Workspace {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let need =
            |p: &Option<PathBuf>, name: &str| p.clone().ok_or_else(|| Error::Config(format!("{name} is required")));
        let corpus = read_corpus(need(&cfg.corpus, "corpus")?)?;
        let target = AnyLm::load(need(&cfg.target, "target")?)?;
        let drafter = AnyLm::load(need(&cfg.drafter, "drafter")?)?;
        if target.vocab() != drafter.vocab() {
            return Err(Error::VocabMismatch { expected: target.vocab().size(), got: drafter.vocab().size() });
        }
        let doc = |i: usize| {
            corpus
                .get(i)
                .cloned()
                .ok_or_else(|| Error::Config(format!("corpus has {} documents, no document {i}", corpus.len())))
        };
        let context = doc(cfg.context_doc)?;
        let source = doc(cfg.retrieval_doc.unwrap_or(cfg.context_doc))?;
        target.vocab().check(&context)?;
        target.vocab().check(&source)?;
        target.vocab().check(&cfg.query)?;
        let header = "chunk_offset,score,selected\n".to_string();
        let (retrieved, retrieval_csv) = match cfg.retrieval_mode {
            RetrievalMode::Select => {
                let r = retrieve(&cfg.query, &source, &cfg.retrieval)?;
                let csv = r.trace_csv();
                (r.context, csv)
            }
            RetrievalMode::Full => (source, header),
            RetrievalMode::None => (Vec::new(), header),
        };
        Ok(Self { target, drafter, context, retrieved, retrieval_csv })
    }

    /// Runs the engine once per seed, in parallel.
    pub fn run(&self, query: &[Token], engine: &EngineConfig, seeds: &[u64]) -> Result<Vec<Generation>> {
        seeds
            .par_iter()
            .map(|&seed| {
                let cfg = EngineConfig { seed, ..engine.clone() };
                generate(&self.target, &self.drafter, &self.context, &self.retrieved, query, &cfg)
            })
            .collect()
    }

    /// Target logits and drafter distribution at the first generated position.
    pub fn first_position(&self, query: &[Token], t: Temperature) -> Result<(crate::lm::LogitVector, ProbVector)> {
        let mut target_ctx = self.context.clone();
        target_ctx.extend_from_slice(query);
        let mut draft_ctx = self.retrieved.clone();
        draft_ctx.extend_from_slice(query);
        Ok((self.target.logits(&target_ctx)?, softmax_t(&self.drafter.logits(&draft_ctx)?, t)))
    }
}

/// Per-run stats file.
#[derive(Debug, Serialize)]
pub struct RunStats<'a> {
    pub seed: u64,
    pub tokens: &'a [Token],
    pub task_success: Option<bool>,
    #[serde(flatten)]
    pub stats: &'a GenerationStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub runs: usize,
    pub total_drafted: usize,
    pub total_accepted: usize,
    pub acceptance_rate: Sig17,
    pub gold: Option<Token>,
    pub successes: Option<usize>,
    pub task_success: Option<Sig17>,
}

impl Summary {
    pub fn from_runs(runs: &[Generation], gold: Option<Token>) -> Self {
        let total_drafted: usize = runs.iter().map(|g| g.stats.total_drafted).sum();
        let total_accepted: usize = runs.iter().map(|g| g.stats.total_accepted).sum();
        let successes = gold.map(|g| runs.iter().filter(|r| r.tokens.first() == Some(&g)).count());
        Self {
            runs: runs.len(),
            total_drafted,
            total_accepted,
            acceptance_rate: Sig17(if total_drafted == 0 { 0.0 } else { total_accepted as f64 / total_drafted as f64 }),
            gold,
            successes,
            task_success: successes.map(|s| Sig17(s as f64 / runs.len() as f64)),
        }
    }
}

#[derive(Debug, Serialize)]
struct OutputDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    artifact_version: &'static str,
    mode: &'static str,
    rng_algorithm: &'static str,
    seeds: Vec<u64>,
    wall_time_ms: u128,
    config_snapshot: String,
    outputs: Vec<OutputDigest>,
}

/// Collects output files, then writes `manifest.json` with their digests.
struct OutputDir {
    root: PathBuf,
    written: Vec<OutputDigest>,
}

impl OutputDir {
    fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)
            .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", root.display())))?;
        Ok(Self { root: root.to_path_buf(), written: Vec::new() })
    }

    fn write(&mut self, rel: &str, contents: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, contents)?;
        self.written.push(OutputDigest { path: rel.to_string(), sha256: hex::encode(Sha256::digest(contents)) });
        Ok(())
    }

    fn finish(self, mode: Mode, cfg: &ExperimentConfig, seeds: Vec<u64>, started: Instant) -> Result<()> {
        let manifest = Manifest {
            artifact_version: env!("CARGO_PKG_VERSION"),
            mode: mode.name(),
            rng_algorithm: RNG_ALGORITHM,
            seeds,
            wall_time_ms: started.elapsed().as_millis(),
            config_snapshot: cfg.snapshot(),
            outputs: self.written,
        };
        std::fs::write(self.root.join("manifest.json"), to_json_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Invariant(format!("serialization failed: {e}")))
}

fn to_json_pretty<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Invariant(format!("serialization failed: {e}")))
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.out.clone().ok_or_else(|| Error::Config("out is required".into()))
}

/// Runs `repetitions` generations and writes per-run traces and stats.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<Summary> {
    let started = Instant::now();
    cfg.validate_for(Mode::Simulate)?;
    let ws = Workspace::load(cfg)?;
    let seeds = cfg.seeds();
    let runs = ws.run(&cfg.query, &cfg.engine, &seeds)?;

    let mut out = OutputDir::create(&out_dir(cfg)?)?;
    out.write("config.snapshot", cfg.snapshot().as_bytes())?;
    out.write("retrieval.csv", ws.retrieval_csv.as_bytes())?;
    for (i, (run, &seed)) in runs.iter().zip(&seeds).enumerate() {
        let mut traces = String::new();
        for t in &run.traces {
            traces.push_str(&to_json(t)?);
            traces.push('\n');
        }
        out.write(&format!("run-{i:03}/traces.jsonl"), traces.as_bytes())?;
        let stats = RunStats {
            seed,
            tokens: &run.tokens,
            task_success: cfg.gold.map(|g| run.tokens.first() == Some(&g)),
            stats: &run.stats,
        };
        out.write(&format!("run-{i:03}/stats.json"), (to_json_pretty(&stats)? + "\n").as_bytes())?;
    }
    let summary = Summary::from_runs(&runs, cfg.gold);
    out.write("summary.json", (to_json_pretty(&summary)? + "\n").as_bytes())?;
    out.finish(Mode::Simulate, cfg, seeds, started)?;
    Ok(summary)
}

/// One row of `sweep.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub eta: f64,
    pub summary: Summary,
    /// TV between the exact first-position output and the target.
    pub oracle_tv: f64,
    /// Exact first-position acceptance probability.
    pub oracle_beta: f64,
    /// Exact probability that the first emitted token is `gold`.
    pub oracle_success: Option<f64>,
}

pub const SWEEP_HEADER: &str = "eta,acceptance_rate,task_success,oracle_tv,oracle_beta,oracle_success";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s =
        String::from("# acceptance_rate and task_success are measured; oracle_* are exact at the first position\n");
    s.push_str(SWEEP_HEADER);
    s.push('\n');
    let opt = |x: Option<f64>| x.map(|v| format!("{v:.16e}")).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.16e},{},{:.16e},{:.16e},{}",
            r.eta,
            r.summary.acceptance_rate.0,
            opt(r.summary.task_success.map(|s| s.0)),
            r.oracle_tv,
            r.oracle_beta,
            opt(r.oracle_success)
        );
    }
    s
}

/// Repeats the simulation for each `η` in the grid.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let started = Instant::now();
    cfg.validate_for(Mode::Sweep)?;
    let ws = Workspace::load(cfg)?;
    let seeds = cfg.seeds();
    let t = cfg.engine.temperature;
    let (z, q) = ws.first_position(&cfg.query, t)?;

    let mut rows = Vec::with_capacity(cfg.etas.len());
    for &eta in &cfg.etas {
        let engine = EngineConfig { eta, ..cfg.engine.clone() };
        let runs = ws.run(&cfg.query, &engine, &seeds)?;
        let aug = augmented_target(&z, &q, eta, t, cfg.engine.tail_factor)?;
        let exact = exact_step_distribution(&aug.p, &aug.p_hat, &q)?;
        rows.push(SweepRow {
            eta,
            summary: Summary::from_runs(&runs, cfg.gold),
            oracle_tv: exact.tv_distance,
            oracle_beta: exact.beta,
            oracle_success: cfg.gold.map(|g| exact.exact_output.get(g)),
        });
    }

    let mut grid = cfg.etas.clone();
    if grid[0] != 0.0 {
        grid.insert(0, 0.0);
    }
    let curve = eta_divergence_curve(&z, &q, t, cfg.engine.tail_factor, &grid)?;

    let mut out = OutputDir::create(&out_dir(cfg)?)?;
    out.write("config.snapshot", cfg.snapshot().as_bytes())?;
    out.write("retrieval.csv", ws.retrieval_csv.as_bytes())?;
    out.write("sweep.csv", sweep_csv(&rows).as_bytes())?;
    out.write("eta_curve.csv", eta_curve_csv(&curve).as_bytes())?;
    out.finish(Mode::Sweep, cfg, seeds, started)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostSummary {
    pub threshold: Sig17,
    /// Smallest grid length whose RAPID speedup reaches the threshold.
    pub crossover_length: Option<Sig17>,
    /// Whether `rapid_speedup` never decreases along the grid.
    pub monotone: bool,
    /// `flops_sd / flops_rapid`, constant over the grid.
    pub rapid_over_sd: Sig17,
}

/// Evaluates the FLOPs model over the context-length grid.
pub fn cmd_cost(cfg: &ExperimentConfig) -> Result<(String, CostSummary)> {
    let started = Instant::now();
    cfg.validate_for(Mode::Cost)?;
    let points = cost::speedup_curve(&cfg.cost, &cfg.context_lens)?;
    let csv = cost::curve_csv(&points);
    let summary = CostSummary {
        threshold: Sig17(cfg.crossover_threshold),
        crossover_length: cost::crossover_length(&cfg.cost, &cfg.context_lens, cfg.crossover_threshold)?.map(Sig17),
        monotone: points.windows(2).all(|w| w[1].rapid_speedup >= w[0].rapid_speedup),
        rapid_over_sd: Sig17(cfg.cost.beta_rapid / cfg.cost.beta_sd),
    };
    if let Some(dir) = &cfg.out {
        let mut out = OutputDir::create(dir)?;
        out.write("config.snapshot", cfg.snapshot().as_bytes())?;
        out.write("cost_curve.csv", csv.as_bytes())?;
        out.write("crossover.json", (to_json_pretty(&summary)? + "\n").as_bytes())?;
        out.finish(Mode::Cost, cfg, Vec::new(), started)?;
    }
    Ok((csv, summary))
}

/// Runs the invariant suites; writes `verify_report.json` when `out` is set.
pub fn cmd_verify(cfg: &ExperimentConfig, kernels: &Kernels) -> Result<crate::verify::VerifyReport> {
    let started = Instant::now();
    cfg.validate_for(Mode::Verify)?;
    let report = run_verify(kernels, cfg.engine.seed);
    if let Some(dir) = &cfg.out {
        let mut out = OutputDir::create(dir)?;
        out.write("config.snapshot", cfg.snapshot().as_bytes())?;
        out.write("verify_report.json", (to_json_pretty(&report)? + "\n").as_bytes())?;
        out.finish(Mode::Verify, cfg, vec![cfg.engine.seed], started)?;
    }
    Ok(report)
}

#[derive(Debug, Parser)]
#[command(name = "rapid", version, about = "Retrieval-augmented speculative decoding experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the invariant suites.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// Inject a known fault into a kernel (kd-sign-flip, tail-no-renorm).
        #[arg(long, hide = true)]
        mutation: Option<String>,
    },
    /// Generate with the engine and write traces, stats and a manifest.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Repeat the simulation over a grid of transfer strengths.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated grid, overrides `etas`.
        #[arg(long)]
        etas: Option<String>,
    },
    /// Evaluate the FLOPs model over context lengths.
    Cost {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write a ready-to-run scenario (needle, unrelated, self-spec).
    Fixture {
        scenario: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub gamma: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub bonus_token: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl CommonArgs {
    /// Loads the config file, if any, then applies the flags.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let cwd = PathBuf::new();
        let mut set = |k: &str, v: String| cfg.set(k, &v, &cwd);
        if let Some(s) = self.seed {
            set("seed", s.to_string())?;
        }
        if let Some(g) = self.gamma {
            set("gamma", g.to_string())?;
        }
        if let Some(e) = self.eta {
            set("eta", e.to_string())?;
        }
        if let Some(t) = self.temperature {
            set("temperature", t.to_string())?;
        }
        if self.bonus_token {
            set("bonus_token", "true".into())?;
        }
        if let Some(o) = &self.out {
            set("out", o.display().to_string())?;
        }
        Ok(cfg)
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Verify { common, mutation } => {
            let kernels = match mutation.as_deref() {
                None => Kernels::reference(),
                Some(name) => Kernels::with_mutation(
                    Mutation::parse(name).ok_or_else(|| Error::Config(format!("unknown mutation {name:?}")))?,
                ),
            };
            let report = cmd_verify(&common.resolve()?, &kernels)?;
            println!("{report}");
            Ok(if report.passed { EXIT_OK } else { EXIT_VERIFY_FAILED })
        }
        Command::Simulate { common } => {
            let cfg = common.resolve()?;
            let s = cmd_simulate(&cfg)?;
            print!("runs {} acceptance_rate {:.6}", s.runs, s.acceptance_rate.0);
            if let (Some(k), Some(rate)) = (s.successes, s.task_success) {
                print!(" task_success {k}/{} ({:.4})", s.runs, rate.0);
            }
            println!();
            Ok(EXIT_OK)
        }
        Command::Sweep { common, etas } => {
            let mut cfg = common.resolve()?;
            if let Some(e) = etas {
                cfg.set("etas", &e, Path::new(""))?;
            }
            let rows = cmd_sweep(&cfg)?;
            print!("{}", sweep_csv(&rows));
            Ok(EXIT_OK)
        }
        Command::Cost { common } => {
            let cfg = common.resolve()?;
            let (csv, summary) = cmd_cost(&cfg)?;
            print!("{csv}");
            match summary.crossover_length {
                Some(l) => println!("crossover at L = {} (speedup >= {})", l.0, summary.threshold.0),
                None => println!("no crossover on the grid (speedup >= {})", summary.threshold.0),
            }
            Ok(EXIT_OK)
        }
        Command::Fixture { scenario, out } => {
            let s = Scenario::parse(&scenario).ok_or_else(|| {
                Error::Config(format!("unknown scenario {scenario:?}; expected needle, unrelated or self-spec"))
            })?;
            let path = fixtures::write_scenario(s, &out)?;
            println!("{}", path.display());
            Ok(EXIT_OK)
        }
    }
}

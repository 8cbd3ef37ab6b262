//! Experiment grids: expert demonstrations, training, evaluation on both
//! dynamics variants, and persistence of metrics, quantiles and manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{build_env, EnvConfig, EnvName, EnvVariant, DEFAULT_GAMMA, DEFAULT_HORIZON};
use crate::error::{Error, Result};
use crate::irl::{mfgmdp_irl_train, mfirl_train, IrlConfig, RewardModel, TrainingLog};
use crate::metrics::{compare_equilibria, expert_equilibrium, Evaluation};
use crate::mfg::{expected_return, sample_game_play, DemoSet, MfgSpec, Policy};
use crate::solver::{solve_ermfne, Equilibrium, SolverConfig};

/// Reward-learning algorithm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "mfirl")]
    Mfirl,
    #[serde(rename = "mfg-mdp")]
    MfgMdp,
}

impl Algorithm {
    pub fn key(self) -> &'static str {
        match self {
            Algorithm::Mfirl => "mfirl",
            Algorithm::MfgMdp => "mfg-mdp",
        }
    }

    pub fn train(
        self,
        spec: &MfgSpec,
        demos: &DemoSet,
        cfg: &IrlConfig,
    ) -> Result<(RewardModel, TrainingLog)> {
        match self {
            Algorithm::Mfirl => mfirl_train(spec, demos, cfg),
            Algorithm::MfgMdp => mfgmdp_irl_train(spec, demos, cfg),
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mfirl" => Ok(Algorithm::Mfirl),
            "mfg-mdp" => Ok(Algorithm::MfgMdp),
            other => Err(Error::Config(format!(
                "unknown algorithm {other:?} (expected mfirl or mfg-mdp)"
            ))),
        }
    }
}

/// A grid of (plays, seed) cells for one game and one algorithm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvName,
    /// Dynamics the demonstrations are generated under.
    pub variant: EnvVariant,
    pub agents: usize,
    /// Numbers of game plays to try.
    pub plays: Vec<usize>,
    pub horizon: usize,
    pub gamma: f64,
    pub seeds: Vec<u64>,
    pub algorithm: Algorithm,
    pub solver: SolverConfig,
    pub irl: IrlConfig,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvName::LeftRight,
            variant: EnvVariant::Original,
            agents: 100,
            plays: (1..=10).collect(),
            horizon: DEFAULT_HORIZON,
            gamma: DEFAULT_GAMMA,
            seeds: (0..10).collect(),
            algorithm: Algorithm::Mfirl,
            solver: SolverConfig::default(),
            irl: IrlConfig::default(),
            workers: 0,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.plays.is_empty() || self.plays.contains(&0) {
            return Err(Error::Config("play counts must be a non-empty list of positive numbers".into()));
        }
        if self.agents == 0 || self.horizon == 0 {
            return Err(Error::Config("agents and horizon must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        self.irl.validate()
    }

    /// The game under `variant` with this config's horizon and discount.
    pub fn game(&self, variant: EnvVariant) -> Result<MfgSpec> {
        build_env(
            &EnvConfig::new(self.env, variant)
                .with_horizon(self.horizon)
                .with_gamma(self.gamma),
        )
        .map_err(as_config)
    }

    /// SHA-256 of the compact JSON form, as lowercase hex.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(msg) => Error::Config(msg),
        other => other,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// `M` game plays of `N` agents under `policy`. Play seeds are drawn from a
/// generator seeded with `seed`.
pub fn generate_demos(
    spec: &MfgSpec,
    policy: &Policy,
    env: EnvName,
    variant: EnvVariant,
    agents: usize,
    plays: usize,
    seed: u64,
) -> Result<DemoSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(plays);
    for _ in 0..plays {
        out.push(sample_game_play(spec, policy, agents, rng.random())?.0);
    }
    DemoSet::new(env.key(), variant.key(), spec.gamma(), out)
}

/// One evaluated cell of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub env: String,
    pub variant: String,
    pub algorithm: String,
    #[serde(rename = "M")]
    pub plays: usize,
    pub seed: u64,
    pub expected_return: f64,
    pub dev_mf: f64,
    pub dev_policy: f64,
    pub dev_mf_smoothed: f64,
    pub dev_policy_smoothed: f64,
    pub converged: bool,
    /// `ok`, `not_converged`, or `error: ...`.
    pub status: String,
    pub runtime_seconds: f64,
}

impl MetricsRow {
    fn new(env: EnvName, variant: EnvVariant, algorithm: &str, plays: usize, seed: u64) -> Self {
        Self {
            env: env.key().into(),
            variant: variant.key().into(),
            algorithm: algorithm.into(),
            plays,
            seed,
            expected_return: f64::NAN,
            dev_mf: f64::NAN,
            dev_policy: f64::NAN,
            dev_mf_smoothed: f64::NAN,
            dev_policy_smoothed: f64::NAN,
            converged: false,
            status: String::new(),
            runtime_seconds: 0.0,
        }
    }

    fn fill(&mut self, evaluation: &Evaluation) {
        self.expected_return = evaluation.expected_return;
        self.dev_mf = evaluation.dev_mf;
        self.dev_policy = evaluation.dev_policy;
        self.dev_mf_smoothed = evaluation.dev_mf_smoothed;
        self.dev_policy_smoothed = evaluation.dev_policy_smoothed;
        self.converged = evaluation.converged;
        self.status = if evaluation.converged { "ok" } else { "not_converged" }.into();
    }

    fn failed(&mut self, error: &Error) {
        self.status = format!("error: {error}");
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    for row in rows {
        csv.serialize(row)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(reader: R) -> Result<Vec<MetricsRow>> {
    let mut csv = csv::Reader::from_reader(reader);
    Ok(csv.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median and 10% / 90% quantiles of one metric over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub env: String,
    pub variant: String,
    pub algorithm: String,
    #[serde(rename = "M")]
    pub plays: usize,
    pub metric: String,
    pub count: usize,
    pub q10: f64,
    pub median: f64,
    pub q90: f64,
}

const QUANTILE_METRICS: [&str; 5] = [
    "expected_return",
    "dev_mf",
    "dev_policy",
    "dev_mf_smoothed",
    "dev_policy_smoothed",
];

fn metric(row: &MetricsRow, name: &str) -> f64 {
    match name {
        "expected_return" => row.expected_return,
        "dev_mf" => row.dev_mf,
        "dev_policy" => row.dev_policy,
        "dev_mf_smoothed" => row.dev_mf_smoothed,
        _ => row.dev_policy_smoothed,
    }
}

/// Quantiles per (env, variant, algorithm, M) over the rows whose status is
/// `ok`, in first-appearance order.
pub fn quantile_rows(rows: &[MetricsRow]) -> Vec<QuantileRow> {
    let mut keys: Vec<(String, String, String, usize)> = Vec::new();
    for row in rows {
        let key = (row.env.clone(), row.variant.clone(), row.algorithm.clone(), row.plays);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut out = Vec::new();
    for (env, variant, algorithm, plays) in keys {
        let group: Vec<&MetricsRow> = rows
            .iter()
            .filter(|r| {
                r.env == env
                    && r.variant == variant
                    && r.algorithm == algorithm
                    && r.plays == plays
                    && r.status == "ok"
            })
            .collect();
        for name in QUANTILE_METRICS {
            let mut values: Vec<f64> = group.iter().map(|r| metric(r, name)).collect();
            values.sort_by(f64::total_cmp);
            out.push(QuantileRow {
                env: env.clone(),
                variant: variant.clone(),
                algorithm: algorithm.clone(),
                plays,
                metric: name.into(),
                count: values.len(),
                q10: quantile(&values, 0.1),
                median: quantile(&values, 0.5),
                q90: quantile(&values, 0.9),
            });
        }
    }
    out
}

pub fn write_quantiles_csv<W: Write>(rows: &[QuantileRow], writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    for row in rows {
        csv.serialize(row)?;
    }
    csv.flush()?;
    Ok(())
}

/// Provenance of an output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub config: serde_json::Value,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn new<C: Serialize>(config: &C, seeds: Vec<u64>, files: Vec<String>) -> Result<Self> {
        let value = serde_json::to_value(config)?;
        Ok(Self {
            name: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: sha256_hex(serde_json::to_string(&value)?.as_bytes()),
            seeds,
            config: value,
            files,
        })
    }
}

/// Expert equilibria of both dynamics variants.
struct Experts {
    train_spec: MfgSpec,
    train: Equilibrium,
    evals: Vec<(EnvVariant, MfgSpec, Equilibrium)>,
}

impl Experts {
    fn solve(cfg: &ExperimentConfig) -> Result<Self> {
        let mut evals = Vec::new();
        for variant in [EnvVariant::Original, EnvVariant::New] {
            let spec = cfg.game(variant)?;
            let eq = expert_equilibrium(&spec, &cfg.solver)?;
            evals.push((variant, spec, eq));
        }
        let (_, train_spec, train) = evals
            .iter()
            .find(|(v, ..)| *v == cfg.variant)
            .cloned()
            .expect("both variants solved");
        Ok(Self {
            train_spec,
            train,
            evals,
        })
    }
}

fn run_cell(cfg: &ExperimentConfig, experts: &Experts, plays: usize, seed: u64) -> Vec<MetricsRow> {
    let start = Instant::now();
    let mut rows: Vec<MetricsRow> = experts
        .evals
        .iter()
        .map(|(variant, ..)| MetricsRow::new(cfg.env, *variant, cfg.algorithm.key(), plays, seed))
        .collect();
    let trained = generate_demos(
        &experts.train_spec,
        &experts.train.policy,
        cfg.env,
        cfg.variant,
        cfg.agents,
        plays,
        seed,
    )
    .and_then(|demos| {
        let irl = IrlConfig {
            seed,
            ..cfg.irl.clone()
        };
        cfg.algorithm.train(&experts.train_spec, &demos, &irl)
    });
    match trained {
        Err(e) => rows.iter_mut().for_each(|r| r.failed(&e)),
        Ok((model, _)) => {
            for (row, (_, spec, expert)) in rows.iter_mut().zip(&experts.evals) {
                match solve_ermfne(&model.shaped(), spec, &cfg.solver)
                    .and_then(|learned| compare_equilibria(spec, expert, &learned))
                {
                    Ok(evaluation) => row.fill(&evaluation),
                    Err(e) => row.failed(&e),
                }
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    rows.iter_mut().for_each(|r| r.runtime_seconds = elapsed);
    rows
}

fn worker_count(requested: usize, cells: usize) -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let n = if requested == 0 { available } else { requested };
    n.clamp(1, cells.max(1))
}

/// Run every (plays, seed) cell, in parallel when workers allow. Rows are
/// returned in grid order (plays-major) regardless of scheduling; failing
/// cells are recorded in the status column.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let experts = Experts::solve(cfg)?;
    let cells: Vec<(usize, u64)> = cfg
        .plays
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results: Mutex<Vec<Option<Vec<MetricsRow>>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..worker_count(cfg.workers, cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(plays, seed)) = cells.get(i) else {
                    break;
                };
                let rows = run_cell(cfg, &experts, plays, seed);
                results.lock().expect("no worker panicked")[i] = Some(rows);
            });
        }
    });
    Ok(results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .flat_map(|rows| rows.expect("every cell ran"))
        .collect())
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const QUANTILES_FILE: &str = "quantiles.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// [`run_grid`] plus metrics, quantile and manifest files in `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<MetricsRow>> {
    let rows = run_grid(cfg)?;
    write_outputs(cfg, &cfg.seeds, &rows, out_dir, Vec::new())?;
    Ok(rows)
}

fn write_outputs<C: Serialize>(
    cfg: &C,
    seeds: &[u64],
    rows: &[MetricsRow],
    out_dir: &Path,
    mut extra_files: Vec<String>,
) -> Result<()> {
    let mut metrics = Vec::new();
    write_metrics_csv(rows, &mut metrics)?;
    write_file(&out_dir.join(METRICS_FILE), &metrics)?;
    let mut quantiles = Vec::new();
    write_quantiles_csv(&quantile_rows(rows), &mut quantiles)?;
    write_file(&out_dir.join(QUANTILES_FILE), &quantiles)?;
    let mut files = vec![METRICS_FILE.to_string(), QUANTILES_FILE.to_string()];
    files.append(&mut extra_files);
    let manifest = Manifest::new(cfg, seeds.to_vec(), files)?;
    write_file(
        &out_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(())
}

/// Ground-truth expected return (no entropy bonus) of the expert
/// equilibrium of a game.
pub fn expert_return(spec: &MfgSpec, cfg: &SolverConfig) -> Result<(f64, Equilibrium)> {
    let eq = expert_equilibrium(spec, cfg)?;
    Ok((expected_return(&eq.flow, &eq.policy, spec)?, eq))
}

/// Settings of the desk-scale table reproduction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Table1Config {
    pub envs: Vec<EnvName>,
    pub algorithms: Vec<Algorithm>,
    pub plays: usize,
    pub agents: usize,
    pub seeds: Vec<u64>,
    pub horizon: usize,
    pub gamma: f64,
    pub solver: SolverConfig,
    pub irl: IrlConfig,
    pub workers: usize,
}

impl Default for Table1Config {
    fn default() -> Self {
        Self {
            envs: EnvName::ALL.to_vec(),
            algorithms: vec![Algorithm::Mfirl, Algorithm::MfgMdp],
            plays: 10,
            agents: 100,
            seeds: (0..3).collect(),
            horizon: DEFAULT_HORIZON,
            gamma: DEFAULT_GAMMA,
            solver: SolverConfig::default(),
            irl: IrlConfig::default(),
            workers: 0,
        }
    }
}

impl Table1Config {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }
}

/// One line of the reproduced table (new dynamics).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub env: String,
    pub algorithm: String,
    pub count: usize,
    pub expected_return: f64,
    pub dev_mf: f64,
    pub dev_policy: f64,
    pub expected_return_q10: f64,
    pub expected_return_q90: f64,
}

/// Expert row plus one row per algorithm (medians over seeds) for every
/// game under the new dynamics, with demonstrations from the original
/// dynamics. Writes `table1.csv`, `metrics.csv`, `quantiles.csv` and
/// `manifest.json` into `out_dir`.
pub fn reproduce_table1(cfg: &Table1Config, out_dir: &Path) -> Result<Vec<Table1Row>> {
    if cfg.seeds.is_empty() || cfg.envs.is_empty() {
        return Err(Error::Config("table reproduction needs games and seeds".into()));
    }
    let mut table = Vec::new();
    let mut all_rows = Vec::new();
    for &env in &cfg.envs {
        let exp_cfg = ExperimentConfig {
            env,
            variant: EnvVariant::Original,
            agents: cfg.agents,
            plays: vec![cfg.plays],
            horizon: cfg.horizon,
            gamma: cfg.gamma,
            seeds: cfg.seeds.clone(),
            algorithm: Algorithm::Mfirl,
            solver: cfg.solver.clone(),
            irl: cfg.irl.clone(),
            workers: cfg.workers,
            output_dir: None,
        };
        exp_cfg.validate()?;
        let (expert, _) = expert_return(&exp_cfg.game(EnvVariant::New)?, &cfg.solver)?;
        table.push(Table1Row {
            env: env.key().into(),
            algorithm: "expert".into(),
            count: 1,
            expected_return: expert,
            dev_mf: 0.0,
            dev_policy: 0.0,
            expected_return_q10: expert,
            expected_return_q90: expert,
        });
        for &algorithm in &cfg.algorithms {
            let rows = run_grid(&ExperimentConfig {
                algorithm,
                ..exp_cfg.clone()
            })?;
            let ok: Vec<&MetricsRow> = rows
                .iter()
                .filter(|r| r.variant == EnvVariant::New.key() && r.status == "ok")
                .collect();
            let sorted = |f: fn(&MetricsRow) -> f64| {
                let mut v: Vec<f64> = ok.iter().map(|r| f(r)).collect();
                v.sort_by(f64::total_cmp);
                v
            };
            let returns = sorted(|r| r.expected_return);
            table.push(Table1Row {
                env: env.key().into(),
                algorithm: algorithm.key().into(),
                count: ok.len(),
                expected_return: quantile(&returns, 0.5),
                dev_mf: quantile(&sorted(|r| r.dev_mf_smoothed), 0.5),
                dev_policy: quantile(&sorted(|r| r.dev_policy_smoothed), 0.5),
                expected_return_q10: quantile(&returns, 0.1),
                expected_return_q90: quantile(&returns, 0.9),
            });
            all_rows.extend(rows);
        }
    }
    let mut csv = csv::Writer::from_writer(Vec::new());
    for row in &table {
        csv.serialize(row)?;
    }
    let bytes = csv.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_file(&out_dir.join("table1.csv"), &bytes)?;
    write_outputs(cfg, &cfg.seeds, &all_rows, out_dir, vec!["table1.csv".into()])?;
    Ok(table)
}

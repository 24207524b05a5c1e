//! Method x ablation x seed fan-out, run manifests and resume.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{DemoSource, ExperimentConfig, Language};
use super::HarnessError;
use crate::demos::{collect_demos, DemoPolicy, DemoStore};
use crate::env::GridWorld;
use crate::hash::{fnv1a64, mix_seed};
use crate::model::{Model, ModelConfig, TeacherSnapshot};
use crate::pretrain::{pretrain_dynamics, vae_pretrain, PretrainConfig, PretrainReport, VaeConfig};
use crate::rl::{train, Prerequisites, TrainConfig, TrainOutcome, Variant};

/// One run of the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub variant: Variant,
    pub language: Language,
    pub demo_source: DemoSource,
    pub seed: u64,
}

impl Cell {
    pub fn id(&self) -> String {
        format!(
            "{}-{}-{}-s{}",
            self.variant,
            self.demo_source.as_str(),
            self.language.as_str(),
            self.seed
        )
    }

    /// Whether the variant reads demonstrations at all.
    pub fn uses_demos(&self) -> bool {
        needs_demos(self.variant)
    }
}

fn needs_demos(v: Variant) -> bool {
    v.needs_teacher() || matches!(v, Variant::Vae | Variant::Inverse)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentMatrix {
    pub config: ExperimentConfig,
    pub cells: Vec<Cell>,
}

impl ExperimentMatrix {
    /// Cross product of the `matrix.*` lists. Variants that never read
    /// demonstrations get one cell per language and seed.
    pub fn from_config(config: &ExperimentConfig) -> Result<Self, HarnessError> {
        let m = &config.matrix;
        let mut cells = Vec::new();
        let mut seen = BTreeSet::new();
        for &variant in &m.variants {
            for &language in &m.languages {
                let sources: &[DemoSource] = if needs_demos(variant) {
                    &m.demo_sources
                } else {
                    &m.demo_sources[..1]
                };
                for &demo_source in sources {
                    for &seed in &m.seeds {
                        let c = Cell {
                            variant,
                            language,
                            demo_source,
                            seed,
                        };
                        if seen.insert(c) {
                            cells.push(c);
                        }
                    }
                }
            }
        }
        let out = ExperimentMatrix {
            config: config.clone(),
            cells,
        };
        for c in &out.cells {
            out.train_config(c).validate()?;
        }
        Ok(out)
    }

    pub fn train_config(&self, cell: &Cell) -> TrainConfig {
        self.config.train_config(cell.variant, cell.seed, cell.language)
    }

    /// The config tree as one cell sees it.
    pub fn cell_config(&self, cell: &Cell) -> ExperimentConfig {
        let mut c = self.config.clone();
        c.rl.variant = cell.variant;
        c.rl.seed = cell.seed;
        c.env.language = cell.language;
        c.demos.source = cell.demo_source;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub role: String,
    pub path: String,
    /// FNV-1a of the file bytes, hex.
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// FNV-1a of `config`, hex.
    pub config_hash: String,
    /// Canonical config text of the run.
    pub config: String,
    pub source_revision: String,
    pub variant: String,
    pub seed: u64,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
    pub status: RunStatus,
    pub error: Option<String>,
}

pub fn config_hash(text: &str) -> String {
    format!("{:016x}", fnv1a64(text.as_bytes()))
}

/// Crate version plus the git revision when one can be read.
pub fn source_revision() -> String {
    let git = std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    match git {
        Some(rev) if !rev.is_empty() => format!("{} {rev}", env!("CARGO_PKG_VERSION")),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

pub fn file_hash(path: &Path) -> Result<String, HarnessError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}

impl RunManifest {
    pub fn verify(&self) -> bool {
        config_hash(&self.config) == self.config_hash
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn write_atomic(&self, path: &Path) -> Result<(), HarnessError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| HarnessError::Json(e.to_string()))?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, json).map_err(|e| io_err(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Json(format!("{}: {e}", path.display())))
    }
}

/// Demonstrations for `source` under `language`.
pub fn collect(config: &ExperimentConfig, source: DemoSource, language: Language) -> Result<DemoStore, HarnessError> {
    let world = GridWorld::new(config.env.episode_config(language)?)?;
    let policy = match source {
        DemoSource::Expert => DemoPolicy::Expert,
        DemoSource::Random => DemoPolicy::Random,
    };
    Ok(collect_demos(&world, policy, config.demos.count, config.demos.seed, true)?)
}

pub fn model_config(config: &ExperimentConfig, language: Language) -> Result<ModelConfig, HarnessError> {
    let world = GridWorld::new(config.env.episode_config(language)?)?;
    Ok(ModelConfig::for_env(world.config(), world.vocab()))
}

/// Pretraining settings for the run paired with `seed`.
pub fn pretrain_config(config: &ExperimentConfig, seed: u64) -> PretrainConfig {
    PretrainConfig {
        seed: mix_seed(config.pretrain.seed, seed),
        ..config.pretrain.clone()
    }
}

pub fn vae_config(config: &ExperimentConfig, seed: u64) -> VaeConfig {
    VaeConfig {
        seed: mix_seed(config.vae.seed, seed),
        ..config.vae.clone()
    }
}

pub fn pretrain_teacher(
    config: &ExperimentConfig,
    demos: &DemoStore,
    language: Language,
    seed: u64,
) -> Result<(TeacherSnapshot, PretrainReport), HarnessError> {
    let (_, teacher, report) = pretrain_dynamics(demos, model_config(config, language)?, &pretrain_config(config, seed))?;
    Ok((teacher, report))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum ArtifactKey {
    Demos(DemoSource, Language),
    Teacher(DemoSource, Language, u64),
    Vae(DemoSource, Language, u64),
}

impl ArtifactKey {
    fn file(&self) -> String {
        match self {
            ArtifactKey::Demos(s, l) => format!("demos-{}-{}.lddm", s.as_str(), l.as_str()),
            ArtifactKey::Teacher(s, l, seed) => format!("teacher-{}-{}-s{seed}.ckpt", s.as_str(), l.as_str()),
            ArtifactKey::Vae(s, l, seed) => format!("vae-{}-{}-s{seed}.ckpt", s.as_str(), l.as_str()),
        }
    }
}

fn required(cell: &Cell) -> Vec<ArtifactKey> {
    let (s, l, seed) = (cell.demo_source, cell.language, cell.seed);
    let mut out = Vec::new();
    if cell.uses_demos() {
        out.push(ArtifactKey::Demos(s, l));
    }
    if cell.variant.needs_teacher() {
        out.push(ArtifactKey::Teacher(s, l, seed));
    }
    if cell.variant == Variant::Vae {
        out.push(ArtifactKey::Vae(s, l, seed));
    }
    out
}

/// One config and output directory per distillation weight; every other
/// setting is shared, so cells stay matched across the sweep.
pub fn alpha_d_sweep(config: &ExperimentConfig, values: &[f64], out_dir: &Path) -> Vec<(ExperimentConfig, PathBuf)> {
    values
        .iter()
        .map(|&v| {
            let mut c = config.clone();
            c.rl.weights.alpha_d = v;
            (c, out_dir.join(format!("alpha_d-{v}")))
        })
        .collect()
}

/// Runs `f` over `items` on `workers` threads, results in input order.
pub fn pool_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Outcome of one cell as the runner saw it.
#[derive(Debug, Clone, PartialEq)]
pub enum CellResult {
    Ran(PathBuf),
    Skipped(PathBuf),
    Failed(String),
}

pub struct MatrixRunner<'a> {
    pub matrix: &'a ExperimentMatrix,
    pub out_dir: PathBuf,
}

impl MatrixRunner<'_> {
    fn artifact_dir(&self) -> PathBuf {
        self.out_dir.join("artifacts")
    }

    pub fn run_dir(&self, cell: &Cell) -> PathBuf {
        self.out_dir.join("runs").join(cell.id())
    }

    /// Whether `cell` already finished under the current config.
    pub fn is_complete(&self, cell: &Cell) -> bool {
        let path = self.run_dir(cell).join("manifest.json");
        let text = self.matrix.cell_config(cell).to_text();
        RunManifest::read(&path)
            .map(|m| m.status == RunStatus::Complete && m.verify() && m.config_hash == config_hash(&text))
            .unwrap_or(false)
    }

    fn build(&self, key: &ArtifactKey) -> Result<(), HarnessError> {
        let cfg = &self.matrix.config;
        let path = self.artifact_dir().join(key.file());
        if path.exists() {
            return Ok(());
        }
        let tmp = path.with_extension("tmp");
        match key {
            ArtifactKey::Demos(s, l) => {
                log::info!("collecting {} demonstrations ({})", s.as_str(), l.as_str());
                collect(cfg, *s, *l)?.save(&tmp)?;
            }
            ArtifactKey::Teacher(s, l, seed) => {
                let demos = self.load_demos(*s, *l)?;
                log::info!("pretraining dynamics on {} demos, seed {seed}", s.as_str());
                let (teacher, report) = pretrain_teacher(cfg, &demos, *l, *seed)?;
                report.write_csv(&self.artifact_dir().join(format!("{}.csv", key.file())))?;
                teacher.save(&tmp)?;
            }
            ArtifactKey::Vae(s, l, seed) => {
                let demos = self.load_demos(*s, *l)?;
                log::info!("VAE pretraining on {} demos, seed {seed}", s.as_str());
                let m = vae_pretrain(&demos, model_config(cfg, *l)?, &vae_config(cfg, *seed))?;
                m.save(&tmp, &[])?;
            }
        }
        std::fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
    }

    fn load_demos(&self, s: DemoSource, l: Language) -> Result<DemoStore, HarnessError> {
        let world = GridWorld::new(self.matrix.config.env.episode_config(l)?)?;
        let path = self.artifact_dir().join(ArtifactKey::Demos(s, l).file());
        Ok(DemoStore::load(&path, world.vocab())?)
    }

    /// Runs every incomplete cell. Completed cells are never re-run.
    pub fn run(&self) -> Result<Vec<(Cell, CellResult)>, HarnessError> {
        let adir = self.artifact_dir();
        std::fs::create_dir_all(&adir).map_err(|e| io_err(&adir, e))?;
        let vocab_path = self.out_dir.join("vocab.tsv");
        let world = GridWorld::new(self.matrix.config.env.episode_config(Language::Full)?)?;
        world.vocab().save(&vocab_path)?;

        let pending: Vec<Cell> = self.matrix.cells.iter().copied().filter(|c| !self.is_complete(c)).collect();
        let keys: BTreeSet<ArtifactKey> = pending.iter().flat_map(required).collect();
        let (demo_keys, rest): (Vec<_>, Vec<_>) = keys.into_iter().partition(|k| matches!(k, ArtifactKey::Demos(..)));
        let workers = self.matrix.config.matrix.workers;
        for r in pool_map(&demo_keys, workers, |k| self.build(k)) {
            r?;
        }
        for r in pool_map(&rest, workers, |k| self.build(k)) {
            r?;
        }

        let results = pool_map(&self.matrix.cells, workers, |c| {
            if !pending.contains(c) {
                return CellResult::Skipped(self.run_dir(c));
            }
            match self.run_cell(c) {
                Ok(dir) => CellResult::Ran(dir),
                Err(e) => CellResult::Failed(e.to_string()),
            }
        });
        Ok(self.matrix.cells.iter().copied().zip(results).collect())
    }

    fn run_cell(&self, cell: &Cell) -> Result<PathBuf, HarnessError> {
        let dir = self.run_dir(cell);
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let cfg_text = self.matrix.cell_config(cell).to_text();
        std::fs::write(dir.join("config.txt"), &cfg_text).map_err(|e| io_err(&dir, e))?;
        let mut manifest = RunManifest {
            run_id: cell.id(),
            config_hash: config_hash(&cfg_text),
            config: cfg_text,
            source_revision: source_revision(),
            variant: cell.variant.to_string(),
            seed: cell.seed,
            inputs: Vec::new(),
            outputs: BTreeMap::new(),
            wall_clock_secs: 0.0,
            status: RunStatus::Running,
            error: None,
        };
        let manifest_path = dir.join("manifest.json");
        for key in required(cell) {
            let path = self.artifact_dir().join(key.file());
            let role = match key {
                ArtifactKey::Demos(..) => "demos",
                ArtifactKey::Teacher(..) => "teacher",
                ArtifactKey::Vae(..) => "init",
            };
            manifest.inputs.push(ArtifactRef {
                role: role.into(),
                hash: file_hash(&path)?,
                path: path.display().to_string(),
            });
        }
        manifest.write_atomic(&manifest_path)?;

        let start = Instant::now();
        let result = self.train_cell(cell, &dir);
        manifest.wall_clock_secs = start.elapsed().as_secs_f64();
        match &result {
            Ok(_) => {
                manifest.status = RunStatus::Complete;
                manifest.outputs.insert("metrics".into(), dir.join("metrics.csv").display().to_string());
                manifest.outputs.insert("final_checkpoint".into(), dir.join("final.ckpt").display().to_string());
            }
            Err(e) => {
                manifest.status = RunStatus::Failed;
                manifest.error = Some(e.to_string());
            }
        }
        manifest.write_atomic(&manifest_path)?;
        result.map(|_| dir)
    }

    fn train_cell(&self, cell: &Cell, dir: &Path) -> Result<TrainOutcome, HarnessError> {
        let cfg = &self.matrix.config;
        let env = cfg.env.episode_config(cell.language)?;
        let adir = self.artifact_dir();
        let demos = cell.uses_demos().then(|| self.load_demos(cell.demo_source, cell.language)).transpose()?;
        let teacher = cell
            .variant
            .needs_teacher()
            .then(|| TeacherSnapshot::load(&adir.join(ArtifactKey::Teacher(cell.demo_source, cell.language, cell.seed).file())))
            .transpose()?;
        let init = (cell.variant == Variant::Vae)
            .then(|| Model::load(&adir.join(ArtifactKey::Vae(cell.demo_source, cell.language, cell.seed).file())))
            .transpose()?
            .map(|(m, _)| m);
        let pre = Prerequisites {
            teacher: teacher.as_ref(),
            init: init.as_ref(),
            demos: demos.as_ref(),
        };
        log::info!("running {}", cell.id());
        Ok(train(&self.matrix.train_config(cell), &env, &pre, Some(dir))?)
    }
}

//! Stage graph, fingerprints and the append-only artifact layout.
//!
//! Every stage writes into `<run>/<stage>/<stage fingerprint>/` (the dataset
//! goes under the data directory instead). A stage fingerprint hashes the
//! config sections the stage reads, the global seed and the fingerprints of
//! its upstream stages, so a changed setting produces a new directory next
//! to the old one rather than replacing it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ctraj_core::seed;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::stages;

pub const SIDECAR: &str = "sidecar.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Data,
    AuditBias,
    TrainClassifier,
    TrainCodec,
    TrainDiffusion,
    GenCf,
    GenTrajectories,
    EvalCf,
    TrainVae,
    Discover,
    Montage,
    Serve,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::Data,
        Stage::AuditBias,
        Stage::TrainClassifier,
        Stage::TrainCodec,
        Stage::TrainDiffusion,
        Stage::GenCf,
        Stage::GenTrajectories,
        Stage::EvalCf,
        Stage::TrainVae,
        Stage::Discover,
        Stage::Montage,
        Stage::Serve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::AuditBias => "audit-bias",
            Stage::TrainClassifier => "train-classifier",
            Stage::TrainCodec => "train-codec",
            Stage::TrainDiffusion => "train-diffusion",
            Stage::GenCf => "gen-cf",
            Stage::GenTrajectories => "gen-trajectories",
            Stage::EvalCf => "eval-cf",
            Stage::TrainVae => "train-vae",
            Stage::Discover => "discover",
            Stage::Montage => "montage",
            Stage::Serve => "serve",
        }
    }

    pub fn from_name(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    /// What downstream stages read from this one.
    pub fn artifact(self) -> &'static str {
        match self {
            Stage::Data => "dataset",
            Stage::AuditBias => "color audit",
            Stage::TrainClassifier => "classifier checkpoint",
            Stage::TrainCodec => "codec checkpoint",
            Stage::TrainDiffusion => "diffusion checkpoints",
            Stage::GenCf => "counterfactual sets",
            Stage::GenTrajectories => "trajectory manifest",
            Stage::EvalCf => "evaluation table",
            Stage::TrainVae => "VAE checkpoint",
            Stage::Discover => "concept reports",
            Stage::Montage => "montages",
            Stage::Serve => "service",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            Data => &[],
            AuditBias | TrainClassifier => &[Data],
            TrainCodec => &[Data, TrainClassifier],
            TrainDiffusion => &[Data, TrainCodec],
            GenCf | GenTrajectories => &[Data, TrainClassifier, TrainCodec, TrainDiffusion],
            EvalCf => &[Data, TrainClassifier, GenTrajectories, GenCf],
            TrainVae => &[TrainClassifier, GenTrajectories],
            Discover => &[Data, TrainClassifier, TrainVae],
            Montage => &[Data, TrainVae, Discover],
            Serve => &[Data, TrainClassifier, TrainVae, Discover],
        }
    }

    /// Config values read by the stage itself.
    fn settings(self, cfg: &RunConfig) -> Value {
        match self {
            Stage::Data => json!(cfg.data),
            Stage::TrainClassifier => json!(cfg.classifier),
            Stage::TrainCodec => json!(cfg.codec),
            Stage::TrainDiffusion => json!({"diffusion": cfg.diffusion, "undertrained_factor": cfg.eval.undertrained_factor}),
            Stage::GenCf => json!({"guidance": cfg.guidance, "images_per_class": cfg.eval.images_per_class}),
            Stage::GenTrajectories => json!({"guidance": cfg.guidance, "trajectories": cfg.trajectories}),
            Stage::TrainVae => json!(cfg.vae),
            Stage::Discover => json!(cfg.discover),
            Stage::Montage => json!(cfg.montage),
            Stage::AuditBias | Stage::EvalCf | Stage::Serve => Value::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub stage: String,
    pub run_id: String,
    pub config_fingerprint: String,
    pub stage_fingerprint: String,
    pub upstream: BTreeMap<String, String>,
    pub summary: Value,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
    /// Recomputed and found byte-identical to the stored outputs.
    Reproduced,
}

pub struct Pipeline {
    pub config: RunConfig,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Self {
        Pipeline { config }
    }

    pub fn stage_fingerprint(&self, stage: Stage) -> String {
        let up: Vec<String> = stage.upstream().iter().map(|&u| self.stage_fingerprint(u)).collect();
        let v = json!({"stage": stage.name(), "seed": self.config.seed, "settings": stage.settings(&self.config), "upstream": up});
        format!("{:016x}", seed::hash_str(&v.to_string()))
    }

    /// Seed for a stage, combining the global seed with a section seed.
    pub fn stage_seed(&self, stage: Stage, section_seed: u64) -> u64 {
        seed::derive(self.config.seed, &[seed::hash_str(stage.name()), section_seed])
    }

    fn stage_root(&self, stage: Stage) -> PathBuf {
        match stage {
            Stage::Data => self.config.paths.data_dir.clone(),
            _ => self.config.run_dir().join(stage.name()),
        }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.stage_root(stage).join(self.stage_fingerprint(stage))
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.stage_dir(stage).join(SIDECAR).is_file()
    }

    pub fn sidecar(&self, stage: Stage) -> Result<Sidecar, CliError> {
        let path = self.stage_dir(stage).join(SIDECAR);
        let text = fs::read_to_string(&path)
            .map_err(|_| CliError::MissingArtifact { what: stage.artifact().into(), stage: stage.name().into() })?;
        let sc: Sidecar = serde_json::from_str(&text)?;
        if sc.stage_fingerprint != self.stage_fingerprint(stage) {
            return Err(CliError::FingerprintMismatch(format!(
                "{} records stage fingerprint {} but its directory is {}",
                path.display(),
                sc.stage_fingerprint,
                self.stage_fingerprint(stage)
            )));
        }
        Ok(sc)
    }

    /// Directory of a finished upstream stage.
    pub fn input(&self, stage: Stage) -> Result<PathBuf, CliError> {
        self.sidecar(stage)?;
        Ok(self.stage_dir(stage))
    }

    fn check_upstream(&self, stage: Stage) -> Result<(), CliError> {
        for &u in stage.upstream() {
            if !self.is_complete(u) {
                return Err(CliError::MissingArtifact { what: u.artifact().into(), stage: u.name().into() });
            }
        }
        Ok(())
    }

    fn warn_on_other_fingerprints(&self, stage: Stage) {
        let current = self.stage_fingerprint(stage);
        let Ok(entries) = fs::read_dir(self.stage_root(stage)) else { return };
        let others: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(SIDECAR).is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| *n != current)
            .collect();
        if !others.is_empty() {
            log::warn!(
                "{}: config changed since an earlier run ({} vs {}); writing new artifacts, earlier ones are kept",
                stage.name(),
                current,
                others.join(", ")
            );
        }
    }

    /// Runs one stage unless its outputs for the current fingerprint exist.
    /// `discover` is always recomputed and compared with stored outputs.
    pub fn run(&self, stage: Stage) -> Result<Outcome, CliError> {
        self.check_upstream(stage)?;
        if stage == Stage::Serve {
            stages::serve(self)?;
            return Ok(Outcome::Ran);
        }
        let dir = self.stage_dir(stage);
        let done = self.is_complete(stage);
        if done && stage != Stage::Discover {
            self.sidecar(stage)?;
            log::info!("{}: up to date ({})", stage.name(), dir.display());
            return Ok(Outcome::UpToDate);
        }
        if !done {
            self.warn_on_other_fingerprints(stage);
        }
        let tmp = dir.with_extension("partial");
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        log::info!("{}: running into {}", stage.name(), dir.display());
        let start = Instant::now();
        let summary = stages::run_stage(self, stage, &tmp)?;
        if done {
            let same = stages::outputs_identical(&dir, &tmp)?;
            fs::remove_dir_all(&tmp)?;
            if !same {
                return Err(CliError::NonDeterministic(format!(
                    "{} recomputed with identical config differs from {}",
                    stage.name(),
                    dir.display()
                )));
            }
            log::info!("{}: recomputed outputs are byte-identical to {}", stage.name(), dir.display());
            return Ok(Outcome::Reproduced);
        }
        let sidecar = Sidecar {
            stage: stage.name().into(),
            run_id: self.config.run_id.clone(),
            config_fingerprint: self.config.fingerprint(),
            stage_fingerprint: self.stage_fingerprint(stage),
            upstream: stage.upstream().iter().map(|&u| (u.name().to_string(), self.stage_fingerprint(u))).collect(),
            summary,
            elapsed_secs: start.elapsed().as_secs_f64(),
        };
        fs::write(tmp.join(SIDECAR), serde_json::to_string_pretty(&sidecar)?)?;
        if let Some(parent) = dir.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::rename(&tmp, &dir)?;
        log::info!("{}: done in {:.1}s", stage.name(), sidecar.elapsed_secs);
        Ok(Outcome::Ran)
    }

    /// Every stage except `serve`, in order.
    pub fn run_all(&self) -> Result<Vec<(Stage, Outcome)>, CliError> {
        let mut out = Vec::new();
        for st in Stage::ALL.into_iter().filter(|&s| s != Stage::Serve) {
            out.push((st, self.run(st)?));
        }
        Ok(out)
    }
}

/// Relative paths of every file below `dir`, sorted.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                out.push(p.strip_prefix(root).expect("below root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

//! Run configuration: one TOML file, overridden by command-line keys.

use std::path::{Path, PathBuf};

use ctraj_core::classifier::ClassifierConfig;
use ctraj_core::codec::CodecConfig;
use ctraj_core::concepts::DEFAULT_TOP_K;
use ctraj_core::counterfactual::GuidanceParams;
use ctraj_core::data::DatasetSpec;
use ctraj_core::diffusion::DiffusionConfig;
use ctraj_core::seed;
use ctraj_core::vae::VaeConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub artifact_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { data_dir: "runs/data".into(), artifact_dir: "runs/artifacts".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Test images per class used for the counterfactual comparison; every
    /// image yields one counterfactual per other class.
    pub images_per_class: usize,
    /// The weaker diffusion model is trained for `train_steps / factor`.
    pub undertrained_factor: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { images_per_class: 20, undertrained_factor: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub max_samples_per_class: usize,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig { max_samples_per_class: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoverConfig {
    pub k: usize,
    /// Cap on the number of test images searched per class.
    pub max_images: usize,
}

impl Default for DiscoverConfig {
    fn default() -> Self {
        DiscoverConfig { k: DEFAULT_TOP_K, max_images: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MontageConfig {
    /// Report entries rendered per class.
    pub top: usize,
}

impl Default for MontageConfig {
    fn default() -> Self {
        MontageConfig { top: DEFAULT_TOP_K }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub addr: String,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig { addr: "127.0.0.1:8080".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub paths: Paths,
    pub data: DatasetSpec,
    pub classifier: ClassifierConfig,
    pub codec: CodecConfig,
    pub diffusion: DiffusionConfig,
    pub guidance: GuidanceParams,
    pub eval: EvalConfig,
    pub trajectories: TrajectoryConfig,
    pub vae: VaeConfig,
    pub discover: DiscoverConfig,
    pub montage: MontageConfig,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "default".into(),
            seed: 7,
            paths: Paths::default(),
            data: DatasetSpec { image_size: 32, ..DatasetSpec::default() },
            classifier: ClassifierConfig::default(),
            codec: CodecConfig::default(),
            diffusion: DiffusionConfig::default(),
            guidance: GuidanceParams::default(),
            eval: EvalConfig::default(),
            trajectories: TrajectoryConfig::default(),
            vae: VaeConfig::default(),
            discover: DiscoverConfig::default(),
            montage: MontageConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub run_id: Option<String>,
    /// `dotted.key=value`, value in TOML syntax (bare strings accepted).
    pub set: Vec<String>,
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    (line, col)
}

fn parse_error(origin: &str, src: &str, e: &toml::de::Error) -> CliError {
    let msg = e.message().trim().to_string();
    match e.span() {
        Some(span) => {
            let (line, col) = line_col(src, span.start);
            CliError::ConfigParse(format!("{origin}: line {line}, column {col}: {msg}"))
        }
        None => CliError::ConfigParse(format!("{origin}: {msg}")),
    }
}

fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_value(root: &mut toml::Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::ConfigParse(format!("--set `{assignment}`: expected key=value")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::ConfigParse(format!("--set `{assignment}`: empty key segment")));
    }
    let mut patch = value;
    for p in parts.iter().rev() {
        let mut t = toml::Table::new();
        t.insert(p.to_string(), patch);
        patch = toml::Value::Table(t);
    }
    merge(root, patch);
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(src: &str, origin: &str) -> Result<RunConfig, CliError> {
        RunConfig::resolve(Some((src, origin)), &Overrides::default())
    }

    /// Defaults, then the file, then overrides.
    pub fn resolve(file: Option<(&str, &str)>, overrides: &Overrides) -> Result<RunConfig, CliError> {
        let mut value = toml::Value::try_from(RunConfig::default()).map_err(|e| CliError::ConfigParse(e.to_string()))?;
        if let Some((src, origin)) = file {
            // Typed parse first so errors point into the file.
            toml::from_str::<RunConfig>(src).map_err(|e| parse_error(origin, src, &e))?;
            let parsed: toml::Table = toml::from_str(src).map_err(|e| parse_error(origin, src, &e))?;
            merge(&mut value, toml::Value::Table(parsed));
        }
        for s in &overrides.set {
            set_value(&mut value, s)?;
        }
        if let Some(seed) = overrides.seed {
            set_value(&mut value, &format!("seed={seed}"))?;
        }
        if let Some(id) = &overrides.run_id {
            value.as_table_mut().expect("table").insert("run_id".into(), toml::Value::String(id.clone()));
        }
        let cfg: RunConfig =
            RunConfig::deserialize(value).map_err(|e| CliError::ConfigParse(format!("after overrides: {}", e.message().trim())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, CliError> {
        match path {
            Some(p) => {
                let src = std::fs::read_to_string(p)
                    .map_err(|e| CliError::ConfigParse(format!("{}: {e}", p.display())))?;
                RunConfig::resolve(Some((&src, &p.display().to_string())), overrides)
            }
            None => RunConfig::resolve(None, overrides),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::InvalidConfig(m));
        if self.run_id.is_empty() || !self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return bad(format!("run_id `{}` must be non-empty and use only [A-Za-z0-9._-]", self.run_id));
        }
        self.data.validate().map_err(|e| CliError::InvalidConfig(format!("data: {e}")))?;
        self.vae.validate().map_err(|e| CliError::InvalidConfig(format!("vae: {e}")))?;
        self.guidance
            .validate(self.diffusion.sampler_steps)
            .map_err(|e| CliError::InvalidConfig(format!("guidance: {e}")))?;
        if self.eval.undertrained_factor < 2 {
            return bad("eval.undertrained_factor must be at least 2".into());
        }
        if self.eval.images_per_class == 0 || self.trajectories.max_samples_per_class == 0 {
            return bad("eval.images_per_class and trajectories.max_samples_per_class must be positive".into());
        }
        if self.discover.k == 0 || self.discover.max_images == 0 {
            return bad("discover.k and discover.max_images must be positive".into());
        }
        Ok(())
    }

    /// Hash of everything except the run id and paths.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("object");
        obj.remove("run_id");
        obj.remove("paths");
        format!("{:016x}", seed::hash_str(&v.to_string()))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.paths.artifact_dir.join(&self.run_id)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.to_toml(), "x").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn parse_error_reports_line() {
        let src = "seed = 3\n\n[vae]\nlatent_dim = \"many\"\n";
        let err = RunConfig::from_toml_str(src, "run.toml").unwrap_err().to_string();
        assert!(err.contains("run.toml: line 4"), "{err}");
        let err = RunConfig::from_toml_str("seed = 1\n[vae]\nbogus = 2\n", "run.toml").unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("bogus"), "{err}");
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let src = "seed = 3\n[vae]\nepochs = 4\n[data]\nsamples_per_class = 50\n";
        let ov = Overrides { seed: Some(9), run_id: Some("r2".into()), set: vec!["vae.epochs=6".into()] };
        let cfg = RunConfig::resolve(Some((src, "f")), &ov).unwrap();
        assert_eq!((cfg.seed, cfg.run_id.as_str(), cfg.vae.epochs), (9, "r2", 6));
        assert_eq!(cfg.data.samples_per_class, 50);
        assert_eq!(cfg.data.image_size, 32);
        assert_eq!(cfg.vae.latent_dim, VaeConfig::default().latent_dim);
    }

    #[test]
    fn fingerprint_ignores_run_id_and_paths() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.run_id = "other".into();
        b.paths.artifact_dir = "/elsewhere".into();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.vae.weights.w_kld = 1e-2;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let ov = Overrides { set: vec!["guidance.t_start=0".into()], ..Overrides::default() };
        assert!(matches!(RunConfig::resolve(None, &ov), Err(CliError::InvalidConfig(_))));
        let ov = Overrides { run_id: Some("a/b".into()), ..Overrides::default() };
        assert!(RunConfig::resolve(None, &ov).is_err());
    }
}

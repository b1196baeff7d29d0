//! Declarative run configuration: a single TOML file with flat sections
//! mirroring the module configs, every field defaulted, command-line flags
//! overriding file values. Keeping sweeps in version-controlled config
//! files is what makes runs reproducible.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use stts_core::bench::{DatasetFormat, DatasetSpec};
use stts_core::forcing::ForcingConfig;
use stts_core::rlmath::{KlEstimator, RlConfig};
use stts_core::trace::MarkerConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub backend: BackendSection,
    pub forcing: ForcingSection,
    #[serde(rename = "dataset")]
    pub datasets: Vec<DatasetSection>,
    pub evaluate: EvaluateSection,
    pub curation: CurationSection,
    pub rl: RlSection,
    pub template: TemplateSection,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("stts-out"),
            backend: BackendSection::default(),
            forcing: ForcingSection::default(),
            datasets: Vec::new(),
            evaluate: EvaluateSection::default(),
            curation: CurationSection::default(),
            rl: RlSection::default(),
            template: TemplateSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Scripted,
    Http,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// Script file for the scripted backend.
    pub script: Option<PathBuf>,
    /// Completion endpoint for the HTTP backend. `STTS_BASE_URL`
    /// overrides it when set.
    pub url: String,
    /// Environment variable holding the bearer credential.
    pub credential_env: String,
    /// Bounded-concurrency limit on outstanding requests.
    pub limiter: usize,
    pub retries: u32,
    pub timeout_secs: u64,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::Http,
            script: None,
            url: "http://localhost:8000/v1/completions".into(),
            credential_env: "STTS_API_KEY".into(),
            limiter: 8,
            retries: 3,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForcingSection {
    pub budget: u32,
    /// Spliced verbatim in place of the end-of-think marker; the default
    /// carries a leading space so the wire reads `…reasoning Wait,`.
    pub injection: String,
    pub think_open: String,
    pub think_close: String,
    pub verdict_a: String,
    pub verdict_b: String,
    pub finalize_suffix: String,
    pub segment_max_tokens: u64,
    pub finalize_max_tokens: u64,
    /// Sampling temperature for evaluation runs (greedy by default).
    pub eval_temperature: f64,
    /// Sampling temperature for curation rollouts.
    pub rollout_temperature: f64,
}

impl Default for ForcingSection {
    fn default() -> Self {
        Self {
            budget: 4,
            injection: " Wait,".into(),
            think_open: "<think>".into(),
            think_close: "</think>".into(),
            verdict_a: "[[A]]".into(),
            verdict_b: "[[B]]".into(),
            finalize_suffix: "\n\n".into(),
            segment_max_tokens: 8192,
            finalize_max_tokens: 256,
            eval_temperature: 0.0,
            rollout_temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: PathBuf,
    #[serde(default)]
    pub format: DatasetFormat,
    /// Defaults to the file stem when omitted.
    #[serde(default)]
    pub tag: Option<String>,
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub shuffle_seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub parallelism: usize,
    pub max_failure_fraction: f64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            parallelism: 4,
            max_failure_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationSection {
    pub cycles: u32,
}

impl Default for CurationSection {
    fn default() -> Self {
        Self { cycles: 3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlSection {
    pub eps_low: f64,
    pub eps_high: f64,
    pub dual_clip_c: f64,
    pub kl_beta: f64,
    /// Coefficient on the bootstrapped value in the TD residual. See the
    /// kernel docs: some write-ups swap the gamma/lambda names.
    pub gae_gamma: f64,
    /// Weight on the residual mixture.
    pub gae_lambda: f64,
    pub ratio_log_cap: f64,
    pub strict_literal_dual_clip: bool,
    pub kl_estimator: KlEstimator,
}

impl Default for RlSection {
    fn default() -> Self {
        let defaults = RlConfig::default();
        Self {
            eps_low: defaults.eps_low,
            eps_high: defaults.eps_high,
            dual_clip_c: defaults.dual_clip_c,
            kl_beta: defaults.kl_beta,
            gae_gamma: defaults.gae_gamma,
            gae_lambda: defaults.gae_lambda,
            ratio_log_cap: defaults.ratio_log_cap,
            strict_literal_dual_clip: defaults.strict_literal_dual_clip,
            kl_estimator: defaults.kl_estimator,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateSection {
    /// Identifier recorded in prompts and reports.
    pub id: Option<String>,
    /// Template body file; the built-in pairwise template when omitted.
    pub path: Option<PathBuf>,
}

impl HarnessConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file `{}`", path.display()))?;
        let config: HarnessConfig = toml::from_str(&text)
            .with_context(|| format!("invalid config file `{}`", path.display()))?;
        Ok(config)
    }

    /// Environment overrides, applied after file load and before flags.
    pub fn apply_env(&mut self) {
        if let Ok(url) = std::env::var("STTS_BASE_URL") {
            if !url.is_empty() {
                self.backend.url = url;
            }
        }
    }

    pub fn markers(&self) -> MarkerConfig {
        MarkerConfig {
            think_open: self.forcing.think_open.clone(),
            think_close: self.forcing.think_close.clone(),
            verdict_pattern_a: self.forcing.verdict_a.clone(),
            verdict_pattern_b: self.forcing.verdict_b.clone(),
        }
    }

    /// Engine config for one run; evaluation and curation differ only in
    /// sampling temperature.
    pub fn forcing_config(&self, temperature: f64) -> ForcingConfig {
        ForcingConfig {
            budget: self.forcing.budget,
            injection: self.forcing.injection.clone(),
            markers: self.markers(),
            finalize_suffix: self.forcing.finalize_suffix.clone(),
            segment_max_tokens: self.forcing.segment_max_tokens,
            finalize_max_tokens: self.forcing.finalize_max_tokens,
            temperature,
            seed: Some(self.seed),
        }
    }

    pub fn rl_config(&self) -> RlConfig {
        RlConfig {
            eps_low: self.rl.eps_low,
            eps_high: self.rl.eps_high,
            dual_clip_c: self.rl.dual_clip_c,
            kl_beta: self.rl.kl_beta,
            gae_gamma: self.rl.gae_gamma,
            gae_lambda: self.rl.gae_lambda,
            ratio_log_cap: self.rl.ratio_log_cap,
            strict_literal_dual_clip: self.rl.strict_literal_dual_clip,
            kl_estimator: self.rl.kl_estimator,
        }
    }

    pub fn dataset_specs(&self) -> Result<Vec<DatasetSpec>> {
        let mut specs = Vec::with_capacity(self.datasets.len());
        for section in &self.datasets {
            let tag = match &section.tag {
                Some(tag) => tag.clone(),
                None => section
                    .path
                    .file_stem()
                    .map(|stem| stem.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "dataset".to_string()),
            };
            specs.push(DatasetSpec {
                path: section.path.clone(),
                format: section.format,
                source_tag: tag,
                limit: section.limit,
                shuffle_seed: section.shuffle_seed,
            });
        }
        Ok(specs)
    }

    /// Structural validation; anything wrong here is a usage error
    /// (exit code 2), not a run failure.
    pub fn validate(&self) -> Result<()> {
        if self.forcing.budget == 0 {
            bail!("forcing.budget must be >= 1");
        }
        if self.forcing.budget > 1 && self.forcing.injection.is_empty() {
            bail!("forcing.injection must be non-empty when budget > 1");
        }
        if self.evaluate.parallelism == 0 {
            bail!("evaluate.parallelism must be >= 1");
        }
        if self.evaluate.parallelism > self.backend.limiter {
            bail!(
                "evaluate.parallelism ({}) exceeds backend.limiter ({}); raise the limiter or lower parallelism",
                self.evaluate.parallelism,
                self.backend.limiter
            );
        }
        if !(0.0..=1.0).contains(&self.evaluate.max_failure_fraction) {
            bail!("evaluate.max_failure_fraction must be in [0, 1]");
        }
        if self.backend.kind == BackendKind::Scripted && self.backend.script.is_none() {
            bail!("backend.kind = \"scripted\" requires backend.script");
        }
        self.markers()
            .validate()
            .map_err(|e| anyhow::anyhow!("invalid markers: {e}"))?;
        self.rl_config()
            .validate()
            .map_err(|e| anyhow::anyhow!("invalid rl section: {e}"))?;
        for dataset in &self.datasets {
            if !dataset.path.exists() {
                bail!("dataset file not found: {}", dataset.path.display());
            }
        }
        Ok(())
    }
}

/// `--dataset path=...,format=...,tag=...[,limit=N][,seed=N]` parser.
/// A bare value with no `=` is shorthand for `path=`.
pub fn parse_dataset_flag(raw: &str) -> Result<DatasetSection> {
    let mut section = DatasetSection {
        path: PathBuf::new(),
        format: DatasetFormat::Pairwise,
        tag: None,
        limit: None,
        shuffle_seed: None,
    };
    for piece in raw.split(',') {
        let piece = piece.trim();
        if piece.is_empty() {
            continue;
        }
        let (key, value) = match piece.split_once('=') {
            Some(pair) => pair,
            None => ("path", piece),
        };
        match key {
            "path" => section.path = PathBuf::from(value),
            "format" => {
                section.format = match value {
                    "pairwise" => DatasetFormat::Pairwise,
                    "one_to_many" | "onetomany" => DatasetFormat::OneToMany,
                    other => bail!("unknown dataset format `{other}`"),
                }
            }
            "tag" => section.tag = Some(value.to_string()),
            "limit" => section.limit = Some(value.parse().context("bad limit")?),
            "seed" | "shuffle_seed" => {
                section.shuffle_seed = Some(value.parse().context("bad shuffle seed")?)
            }
            other => bail!("unknown dataset key `{other}`"),
        }
    }
    if section.path.as_os_str().is_empty() {
        bail!("--dataset needs a path");
    }
    Ok(section)
}

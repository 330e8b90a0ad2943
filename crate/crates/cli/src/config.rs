use std::path::{Path, PathBuf};

use dtr::data::{LongSchema, WideSchema};
use dtr::evaluation::Estimator;
use dtr::learning::LearnerSpec;
use dtr::nuisance::ModelSpec;
use dtr::policy::{Policy, StageRule};
use serde::Deserialize;
use serde_path_to_error::Segment;

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

fn version() -> u32 {
    CONFIG_VERSION
}

fn one() -> usize {
    1
}

fn dr() -> Estimator {
    Estimator::Dr
}

fn g_models() -> Vec<ModelSpec> {
    vec![ModelSpec::g_default()]
}

fn q_models() -> Vec<ModelSpec> {
    vec![ModelSpec::q_default()]
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    #[default]
    Wide,
    Long,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    #[serde(default)]
    pub layout: Layout,
    /// Baseline table for the long layout.
    #[serde(default)]
    pub baseline_path: Option<PathBuf>,
    pub schema: serde_json::Value,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub result: Option<PathBuf>,
    #[serde(default)]
    pub policy: Option<PathBuf>,
    #[serde(default)]
    pub value: Option<PathBuf>,
    #[serde(default)]
    pub ic: Option<PathBuf>,
    #[serde(default)]
    pub actions: Option<PathBuf>,
}

/// A run configuration file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "version")]
    pub version: u32,
    pub data: DataConfig,
    #[serde(default)]
    pub policy: Option<Policy>,
    #[serde(default)]
    pub policy_file: Option<PathBuf>,
    #[serde(default)]
    pub learner: Option<LearnerSpec>,
    #[serde(default = "g_models")]
    pub g_models: Vec<ModelSpec>,
    #[serde(default = "q_models")]
    pub q_models: Vec<ModelSpec>,
    #[serde(default = "dr")]
    pub estimator: Estimator,
    /// Number of cross-fitting folds used for evaluation.
    #[serde(default = "one")]
    pub folds: usize,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cluster: Option<String>,
    #[serde(default)]
    pub conditional_by: Option<String>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone)]
pub enum Schema {
    Wide(WideSchema),
    Long(LongSchema),
}

impl Schema {
    pub fn baseline(&self) -> &[String] {
        match self {
            Schema::Wide(s) => &s.baseline,
            Schema::Long(s) => &s.baseline,
        }
    }
}

fn pointer<'a>(segments: impl Iterator<Item = &'a Segment>) -> String {
    let mut out = String::new();
    for s in segments {
        match s {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => {
                out.push('/');
                out.push_str(&key.replace('~', "~0").replace('/', "~1"));
            }
            Segment::Enum { .. } | Segment::Unknown => {}
        }
    }
    out
}

pub fn config_error(at: &str, message: impl std::fmt::Display) -> CliError {
    let at = if at.is_empty() { "(root)" } else { at };
    CliError::config(format!("{at}: {message}"))
}

/// A parsed configuration with paths resolved against the config file.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub run: RunConfig,
    pub schema: Schema,
}

impl Loaded {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::config(format!("cannot read config '{}': {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        Self::from_slice(&bytes, base)
    }

    pub fn from_slice(bytes: &[u8], base: &Path) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let mut run: RunConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| config_error(&pointer(e.path().iter()), e.inner()))?;
        let schema = match run.data.layout {
            Layout::Wide => serde_path_to_error::deserialize(run.data.schema.clone()).map(Schema::Wide),
            Layout::Long => serde_path_to_error::deserialize(run.data.schema.clone()).map(Schema::Long),
        }
        .map_err(|e| config_error(&format!("/data/schema{}", pointer(e.path().iter())), e.inner()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut run.data.path);
        run.data.baseline_path.as_mut().map(resolve);
        run.policy_file.as_mut().map(resolve);
        let out = &mut run.output;
        for p in [&mut out.result, &mut out.policy, &mut out.value, &mut out.ic, &mut out.actions] {
            p.as_mut().map(resolve);
        }
        let loaded = Loaded { run, schema };
        loaded.validate()?;
        Ok(loaded)
    }

    fn validate(&self) -> Result<(), CliError> {
        let r = &self.run;
        if r.version != CONFIG_VERSION {
            return Err(config_error("/version", format!("unsupported version {}, expected {CONFIG_VERSION}", r.version)));
        }
        if r.folds == 0 {
            return Err(config_error("/folds", "at least one fold is needed"));
        }
        if let Some(a) = r.alpha {
            if !(0.0..0.5).contains(&a) {
                return Err(config_error("/alpha", format!("alpha must lie in [0, 0.5), got {a}")));
            }
        }
        if r.data.layout == Layout::Wide && r.data.baseline_path.is_some() {
            return Err(config_error("/data/baseline_path", "only used with the long layout"));
        }
        if let Some(p) = &r.policy {
            for (i, rule) in p.rules.iter().enumerate() {
                if !matches!(
                    rule,
                    StageRule::Static { .. } | StageRule::LinearThreshold { .. } | StageRule::Table { .. }
                ) {
                    return Err(config_error(
                        &format!("/policy/rules/{i}/kind"),
                        "inline rules must be static, linear_threshold or table; load learned policies with policy_file",
                    ));
                }
            }
        }
        if r.policy.is_some() && r.policy_file.is_some() {
            return Err(config_error("/policy_file", "give either policy or policy_file"));
        }
        for (key, var) in [("/cluster", &r.cluster), ("/conditional_by", &r.conditional_by)] {
            if let Some(v) = var {
                if !self.schema.baseline().contains(v) {
                    return Err(config_error(key, format!("'{v}' must be listed in /data/schema/baseline")));
                }
            }
        }
        Ok(())
    }

    /// Columns of the main data file named by the schema and the run.
    pub fn referenced_columns(&self) -> Vec<String> {
        let mut cols = Vec::new();
        match &self.schema {
            Schema::Wide(s) => {
                cols.extend(s.id.iter().cloned());
                cols.extend(s.actions.iter().cloned());
                for (_, per_stage) in &s.covariates {
                    cols.extend(per_stage.iter().flatten().cloned());
                }
                cols.extend(s.utility.iter().cloned());
                cols.extend(s.baseline.iter().cloned());
            }
            Schema::Long(s) => {
                cols.extend([s.id.clone(), s.stage.clone(), s.event.clone(), s.action.clone(), s.utility.clone()]);
                cols.extend(s.covariates.iter().cloned());
                if self.run.data.baseline_path.is_none() {
                    cols.extend(s.baseline.iter().cloned());
                }
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        cols.retain(|c| seen.insert(c.clone()));
        cols
    }
}

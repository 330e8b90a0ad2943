use std::io::Write;
use std::path::{Path, PathBuf};

use dtr::data::{ingest_long, ingest_wide, PolicyData};
use dtr::evaluation::{
    clustered_variance, conditional_value, value_dr, value_ipw, value_of_learner, value_or, EvalResult, EvalSummary,
    Estimator,
};
use dtr::learning::{get_policy, learn as fit_learner, LearnerSpec};
use dtr::policy::{apply_policy, deserialize_policy, serialize_policy, Policy};
use dtr::simulation::{
    sim_single_stage, sim_two_stage, single_stage_schema, two_stage_schema, SingleStageParams, TwoStageParams,
};
use dtr::table::Table;
use serde::Serialize;

use crate::config::{config_error, Loaded, Schema};
use crate::CliError;

pub const RESULT_VERSION: u32 = 1;

#[derive(Serialize)]
struct ResultFile {
    version: u32,
    result: EvalSummary,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    conditional: Vec<EvalSummary>,
}

fn write_bytes(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, bytes).map_err(|e| CliError::data(format!("cannot write '{}': {e}", p.display()))),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| CliError::data(format!("cannot write to stdout: {e}"))),
    }
}

fn write_csv(path: Option<&Path>, t: &Table) -> Result<(), CliError> {
    let mut buf = Vec::new();
    t.write_csv(&mut buf)?;
    write_bytes(path, &buf)
}

fn write_json<T: Serialize>(path: Option<&Path>, v: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(|e| CliError::data(e.to_string()))?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

fn read_table(path: &Path) -> Result<Table, CliError> {
    Table::read_csv_path(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn simulate(
    two: bool,
    n: usize,
    seed: u64,
    par: Option<&str>,
    out: Option<PathBuf>,
    schema_out: Option<PathBuf>,
) -> Result<(), CliError> {
    let bad = |e: dtr::Error| CliError::config(format!("--par: {e}"));
    let (sim, schema) = if two {
        let p = par.map_or(Ok(TwoStageParams::default()), TwoStageParams::parse).map_err(bad)?;
        (sim_two_stage(n, seed, &p).map_err(|e| CliError::config(e.to_string()))?, two_stage_schema())
    } else {
        let p = par.map_or(Ok(SingleStageParams::default()), SingleStageParams::parse).map_err(bad)?;
        (sim_single_stage(n, seed, &p).map_err(|e| CliError::config(e.to_string()))?, single_stage_schema())
    };
    write_csv(out.as_deref(), &sim.table)?;
    if let Some(p) = schema_out {
        write_json(Some(&p), &schema)?;
    }
    Ok(())
}

/// Reads the data file, reporting every schema column it lacks at once.
pub fn load_data(cfg: &Loaded) -> Result<PolicyData, CliError> {
    let table = read_table(&cfg.run.data.path)?;
    let missing: Vec<String> = cfg
        .referenced_columns()
        .into_iter()
        .filter(|c| !table.has_column(c))
        .collect();
    if !missing.is_empty() {
        return Err(CliError::data(format!(
            "{} is missing columns: {}",
            cfg.run.data.path.display(),
            missing.join(", ")
        )));
    }
    let pd = match &cfg.schema {
        Schema::Wide(s) => ingest_wide(&table, s)?,
        Schema::Long(s) => {
            let baseline = cfg.run.data.baseline_path.as_deref().map(read_table).transpose()?;
            ingest_long(&table, baseline.as_ref(), s)?
        }
    };
    Ok(pd)
}

fn learner_spec(cfg: &Loaded) -> Result<LearnerSpec, CliError> {
    let mut spec = cfg
        .run
        .learner
        .clone()
        .ok_or_else(|| config_error("/learner", "a learner is required"))?;
    if let Some(a) = cfg.run.alpha {
        spec.alpha = a;
    }
    spec.seed = cfg.run.seed;
    Ok(spec)
}

fn policy(cfg: &Loaded) -> Result<Option<Policy>, CliError> {
    if let Some(p) = &cfg.run.policy {
        return Ok(Some(p.clone()));
    }
    match &cfg.run.policy_file {
        Some(path) => {
            let bytes = std::fs::read(path)
                .map_err(|e| CliError::config(format!("cannot read policy '{}': {e}", path.display())))?;
            Ok(Some(
                deserialize_policy(&bytes).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?,
            ))
        }
        None => Ok(None),
    }
}

fn inference(cfg: &Loaded, pd: &PolicyData, result: EvalResult) -> Result<ResultFile, CliError> {
    let conditional = match &cfg.run.conditional_by {
        Some(v) => conditional_value(&result, pd, v)?.iter().map(EvalResult::summary).collect(),
        None => Vec::new(),
    };
    let result = match &cfg.run.cluster {
        Some(c) => {
            let labels: Vec<String> = pd
                .baseline_column(c)?
                .iter()
                .zip(&result.ids)
                .map(|(v, id)| {
                    v.as_label()
                        .ok_or_else(|| CliError::data(format!("cluster '{c}' is missing for id '{id}'")))
                })
                .collect::<Result<_, _>>()?;
            clustered_variance(&result, &labels)?
        }
        None => result,
    };
    Ok(ResultFile {
        version: RESULT_VERSION,
        result: result.summary(),
        conditional,
    })
}

pub fn evaluate(cfg: &Loaded) -> Result<(), CliError> {
    let run = &cfg.run;
    let fixed = policy(cfg)?;
    if fixed.is_some() == run.learner.is_some() {
        return Err(config_error("", "give exactly one of policy, policy_file or learner"));
    }
    let pd = load_data(cfg)?;
    let result = match fixed {
        Some(p) => match run.estimator {
            Estimator::Dr => value_dr(&pd, &p, &run.g_models, &run.q_models, run.folds, run.seed)?,
            Estimator::Ipw => value_ipw(&pd, &p, &run.g_models, run.folds, run.seed)?,
            Estimator::Or => value_or(&pd, &p, &run.q_models, run.folds, run.seed)?,
        },
        None => {
            if run.estimator != Estimator::Dr {
                return Err(config_error("/estimator", "learners are evaluated with the dr estimator"));
            }
            let spec = learner_spec(cfg)?;
            value_of_learner(&pd, &spec, &run.g_models, &run.q_models, run.folds, run.seed)?
        }
    };
    if let Some(p) = &run.output.ic {
        write_csv(Some(p), &result.ic_table())?;
    }
    let file = inference(cfg, &pd, result)?;
    write_json(run.output.result.as_deref(), &file)
}

pub fn learn(cfg: &Loaded) -> Result<(), CliError> {
    let run = &cfg.run;
    let spec = learner_spec(cfg)?;
    let pd = load_data(cfg)?;
    let po = fit_learner(&pd, &spec)?;
    let p = get_policy(&po);
    write_bytes(run.output.policy.as_deref(), &serialize_policy(&p)?)?;
    if let Some(path) = &run.output.value {
        let v = value_of_learner(&pd, &spec, &run.g_models, &run.q_models, run.folds, run.seed)?;
        let file = inference(cfg, &pd, v)?;
        write_json(Some(path), &file)?;
    }
    Ok(())
}

pub fn apply(cfg: &Loaded) -> Result<(), CliError> {
    let p = policy(cfg)?.ok_or_else(|| config_error("/policy", "a policy or policy_file is required"))?;
    let pd = load_data(cfg)?;
    let at = apply_policy(&p, &pd)?;
    write_csv(cfg.run.output.actions.as_deref(), &at.to_table())
}

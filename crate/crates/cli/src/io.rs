//! File formats: MDP JSON in, CSV tables and JSON summaries out.

use std::fs;
use std::path::{Path, PathBuf};

use bisimlab::mdp::{matrix, tensor3, validate_mdp, Location, ViolationKind};
use bisimlab::metric::SolveTrace;
use bisimlab::representation::TrainTrace;
use bisimlab::{PolicyTable, TabularMdp};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Shape { path: PathBuf, message: String },
    #[error("{path}: invalid MDP\n{}", .diagnostics.join("\n"))]
    Invalid { path: PathBuf, diagnostics: Vec<String> },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {message}")]
    Table { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// On-disk MDP. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    pub gamma: f64,
    pub states: Vec<String>,
    pub actions: Vec<String>,
    /// `[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `[s][a]`
    pub reward: Vec<Vec<f64>>,
    /// `[s][a]`
    pub policy: Vec<Vec<f64>>,
}

impl MdpFile {
    pub fn from_mdp(mdp: &TabularMdp, policy: &PolicyTable) -> Self {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        Self {
            gamma: mdp.gamma(),
            states: mdp.state_names().to_vec(),
            actions: mdp.action_names().to_vec(),
            transition: (0..ns)
                .map(|s| (0..na).map(|a| mdp.next_distribution(s, a).to_vec()).collect())
                .collect(),
            reward: mdp.reward().rows().into_iter().map(|r| r.to_vec()).collect(),
            policy: policy.probs().rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

fn describe(kind: ViolationKind, location: Location, magnitude: f64, mdp: &TabularMdp) -> String {
    let s = |i: usize| &mdp.state_names()[i];
    let a = |i: usize| &mdp.action_names()[i];
    let field = match location {
        Location::Transition { state, action } => format!("transition[{state}][{action}] ({}, {})", s(state), a(action)),
        Location::Reward { state, action } => format!("reward[{state}][{action}] ({}, {})", s(state), a(action)),
        Location::Policy { state } => format!("policy[{state}] ({})", s(state)),
        Location::Gamma => "gamma".to_string(),
    };
    let what = match kind {
        ViolationKind::RowSum | ViolationKind::PolicyRowSum => format!("row sum is off by {magnitude:e}"),
        ViolationKind::NegativeProbability | ViolationKind::PolicyNegative => format!("negative entry of size {magnitude}"),
        ViolationKind::NonFinite => format!("non-finite value {magnitude}"),
        ViolationKind::GammaRange => format!("{magnitude} is outside (0, 1)"),
        ViolationKind::PolicyShape => "policy shape does not match the MDP".to_string(),
    };
    format!("  {field}: {what}")
}

/// Parses and validates an MDP file.
pub fn parse_mdp(text: &str, path: &Path) -> Result<(TabularMdp, PolicyTable), IoError> {
    let file: MdpFile = serde_json::from_str(text).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let shape = |message: String| IoError::Shape {
        path: path.to_path_buf(),
        message,
    };
    let transition = tensor3(file.transition).map_err(|e| shape(e.to_string()))?;
    let reward = matrix(file.reward, "reward").map_err(|e| shape(e.to_string()))?;
    let probs = matrix(file.policy, "policy").map_err(|e| shape(e.to_string()))?;
    let mdp = TabularMdp::new(transition, reward, file.gamma)
        .and_then(|m| m.with_names(file.states, file.actions))
        .map_err(|e| shape(e.to_string()))?;
    if probs.dim() != (mdp.n_states(), mdp.n_actions()) {
        return Err(shape(format!(
            "policy is {:?}, expected [{}, {}]",
            probs.shape(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    let policy = PolicyTable::new(probs).map_err(|e| shape(e.to_string()))?;
    check_valid(&mdp, &policy, path)?;
    Ok((mdp, policy))
}

/// Runs the value-level validation and turns violations into diagnostics.
pub fn check_valid(mdp: &TabularMdp, policy: &PolicyTable, path: &Path) -> Result<(), IoError> {
    let report = validate_mdp(mdp, policy);
    if report.is_ok() {
        return Ok(());
    }
    Err(IoError::Invalid {
        path: path.to_path_buf(),
        diagnostics: report
            .violations
            .iter()
            .map(|v| describe(v.kind, v.location, v.magnitude, mdp))
            .collect(),
    })
}

pub fn load_mdp(path: &Path) -> Result<(TabularMdp, PolicyTable), IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_mdp(&text, path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable report");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn create_dir(path: &Path) -> Result<(), IoError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// Shortest representation that parses back to the same bits.
pub fn fmt_float(x: f64) -> String {
    format!("{x}")
}

/// Square table with a header row and a leading name column.
pub fn write_matrix_csv(path: &Path, names: &[String], table: &Array2<f64>) -> Result<(), IoError> {
    let err = csv_err(path);
    let mut w = csv::Writer::from_path(path).map_err(&err)?;
    let mut header = vec![String::new()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(&err)?;
    for (name, row) in names.iter().zip(table.rows()) {
        let mut record = vec![name.clone()];
        record.extend(row.iter().map(|&v| fmt_float(v)));
        w.write_record(&record).map_err(&err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Inverse of [`write_matrix_csv`].
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, Array2<f64>), IoError> {
    let err = csv_err(path);
    let bad = |message: String| IoError::Table {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(&err)?;
    let names: Vec<String> = r.headers().map_err(&err)?.iter().skip(1).map(str::to_string).collect();
    let n = names.len();
    let mut values = Vec::with_capacity(n * n);
    let mut rows = 0;
    for record in r.records() {
        let record = record.map_err(&err)?;
        if record.len() != n + 1 {
            return Err(bad(format!("row {} has {} cells, expected {}", rows + 1, record.len(), n + 1)));
        }
        for cell in record.iter().skip(1) {
            values.push(cell.parse::<f64>().map_err(|e| bad(format!("row {}: {cell:?}: {e}", rows + 1)))?);
        }
        rows += 1;
    }
    if rows != n {
        return Err(bad(format!("{rows} rows for {n} columns")));
    }
    Ok((names, Array2::from_shape_vec((n, n), values).expect("checked shape")))
}

/// `sweep,residual`, one row per sweep.
pub fn write_solve_trace_csv(path: &Path, trace: &SolveTrace) -> Result<(), IoError> {
    let err = csv_err(path);
    let mut w = csv::Writer::from_path(path).map_err(&err)?;
    w.write_record(["sweep", "residual"]).map_err(&err)?;
    for (k, r) in trace.residuals.iter().enumerate() {
        w.write_record([(k + 1).to_string(), fmt_float(*r)]).map_err(&err)?;
    }
    w.flush().map_err(io_err(path))
}

/// `step,encoder_loss,c_value,c_delta`, one row per step. The coefficient
/// columns are empty between records.
pub fn write_train_trace_csv(path: &Path, trace: &TrainTrace) -> Result<(), IoError> {
    let err = csv_err(path);
    let mut w = csv::Writer::from_path(path).map_err(&err)?;
    w.write_record(["step", "encoder_loss", "c_value", "c_delta"]).map_err(&err)?;
    let mut next = 0;
    for (k, loss) in trace.encoder_losses.iter().enumerate() {
        let step = k + 1;
        let (c, d) = if trace.c_steps.get(next) == Some(&step) {
            next += 1;
            (fmt_float(trace.c_values[next - 1]), fmt_float(trace.c_deltas[next - 1]))
        } else {
            (String::new(), String::new())
        };
        w.write_record([step.to_string(), fmt_float(*loss), c, d]).map_err(&err)?;
    }
    w.flush().map_err(io_err(path))
}

/// `step,c_value,c_delta`, one row per coefficient record.
pub fn write_c_curve_csv(path: &Path, trace: &TrainTrace) -> Result<(), IoError> {
    let err = csv_err(path);
    let mut w = csv::Writer::from_path(path).map_err(&err)?;
    w.write_record(["step", "c_value", "c_delta"]).map_err(&err)?;
    for ((step, c), d) in trace.c_steps.iter().zip(&trace.c_values).zip(&trace.c_deltas) {
        w.write_record([step.to_string(), fmt_float(*c), fmt_float(*d)]).map_err(&err)?;
    }
    w.flush().map_err(io_err(path))
}

//! Trajectory CSV and checkpoint JSON.
//!
//! Trajectory files hold one row per (time, body), bodies numbered from 1,
//! with columns `t,body,rx,ry[,rz],vx,vy[,vz]`. Leading `#` lines carry a
//! `config_echo`. Floats are written with 17 significant digits, so a file
//! read back reproduces the trajectory bit for bit.

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::dynamics::{BodySpec, SystemState};
use crate::error::{Error, Result};
use crate::integrators::{TimeGrid, Trajectory};
use crate::models::{Model, ModelKind};
use crate::neural::{MlpSpec, ParamVector};

const AXES: [&str; 3] = ["x", "y", "z"];

/// Formats `v` with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn trajectory_header(dim: usize) -> Vec<String> {
    let mut h = vec!["t".to_string(), "body".to_string()];
    h.extend(AXES[..dim].iter().map(|a| format!("r{a}")));
    h.extend(AXES[..dim].iter().map(|a| format!("v{a}")));
    h
}

/// Component labels in state order, e.g. `r1x`, `v3z`.
pub fn component_labels(n_bodies: usize, dim: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(2 * dim * n_bodies);
    for i in 1..=n_bodies {
        out.extend(AXES[..dim].iter().map(|a| format!("r{i}{a}")));
        out.extend(AXES[..dim].iter().map(|a| format!("v{i}{a}")));
    }
    out
}

fn write_comments<W: Write>(w: &mut W, config_echo: Option<&str>) -> Result<()> {
    if let Some(echo) = config_echo {
        for line in echo.lines() {
            writeln!(w, "# config_echo: {line}")?;
        }
    }
    Ok(())
}

pub fn write_trajectory_to<W: Write>(mut w: W, traj: &Trajectory, dim: usize, config_echo: Option<&str>) -> Result<()> {
    let d = traj.state_len();
    if dim == 0 || d % (2 * dim) != 0 {
        return Err(Error::DimensionMismatch {
            what: "trajectory state",
            expected: 2 * dim,
            got: d,
        });
    }
    write_comments(&mut w, config_echo)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(trajectory_header(dim))?;
    for (t, s) in traj.times().iter().zip(traj.states()) {
        for (i, body) in s.chunks(2 * dim).enumerate() {
            let mut row = vec![fmt_f64(*t), (i + 1).to_string()];
            row.extend(body.iter().map(|v| fmt_f64(*v)));
            csv.write_record(&row)?;
        }
    }
    csv.flush()?;
    Ok(())
}

pub fn write_trajectory(path: &Path, traj: &Trajectory, dim: usize, config_echo: Option<&str>) -> Result<()> {
    let mut buf = Vec::new();
    write_trajectory_to(&mut buf, traj, dim, config_echo)?;
    fs::write(path, buf).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Reads a trajectory file, inferring the spatial dimension from the header.
pub fn read_trajectory(path: &Path) -> Result<(Trajectory, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_trajectory(&text).map_err(|e| match e {
        Error::Io(m) => Error::Io(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_trajectory(text: &str) -> Result<(Trajectory, usize)> {
    let bad = |m: String| Error::Io(format!("malformed trajectory csv: {m}"));
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let dim = match header.len() {
        6 => 2,
        8 => 3,
        n => return Err(bad(format!("{n} columns"))),
    };
    if header != trajectory_header(dim) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    // A row with body 1 opens a new sample time.
    let mut times: Vec<f64> = Vec::new();
    let mut states: Vec<Vec<f64>> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 1;
        let parse = |k: usize| -> Result<f64> {
            rec[k].trim().parse::<f64>().map_err(|e| bad(format!("row {row}: column {k}: {e}")))
        };
        let t = parse(0)?;
        let body: usize = rec[1].trim().parse().map_err(|e| bad(format!("row {row}: body: {e}")))?;
        if body == 1 {
            times.push(t);
            states.push(Vec::new());
            counts.push(0);
        }
        let (Some(&t0), Some(count)) = (times.last(), counts.last_mut()) else {
            return Err(bad(format!("row {row}: first row must be body 1")));
        };
        if body != *count + 1 || t != t0 {
            return Err(bad(format!("row {row}: body {body} at t = {t} out of order")));
        }
        *count += 1;
        let state = states.last_mut().expect("opened above");
        for k in 2..2 + 2 * dim {
            state.push(parse(k)?);
        }
    }
    if let Some(&n) = counts.first() {
        if let Some(k) = counts.iter().position(|&c| c != n) {
            return Err(bad(format!("time {} has {} bodies, expected {n}", times[k], counts[k])));
        }
    } else {
        return Err(bad("no data rows".into()));
    }
    let grid = TimeGrid::new(times)?;
    let states = states
        .into_iter()
        .map(|v| SystemState::new(v, dim))
        .collect::<Result<Vec<_>>>()?;
    Ok((Trajectory::new(grid, states)?, dim))
}

/// Loss history with the stage (1 first-order, 2 L-BFGS) of each entry.
pub fn write_loss_history(path: &Path, history: &[f64], stage1_len: usize, config_echo: Option<&str>) -> Result<()> {
    let mut buf = Vec::new();
    write_comments(&mut buf, config_echo)?;
    {
        let mut csv = csv::Writer::from_writer(&mut buf);
        csv.write_record(["step", "stage", "loss"])?;
        for (k, l) in history.iter().enumerate() {
            let stage = if k < stage1_len { "1" } else { "2" };
            csv.write_record([(k + 1).to_string(), stage.to_string(), fmt_f64(*l)])?;
        }
        csv.flush()?;
    }
    fs::write(path, buf).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub const CHECKPOINT_FORMAT: &str = "nbody-sciml-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    pub mlp: MlpSpec,
    pub bodies: BodySpec,
    pub params: ParamVector,
    pub final_loss: Option<f64>,
    /// Training stopped on divergence; `params` are the best seen before.
    pub diverged: bool,
    #[serde(default)]
    pub config_echo: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(model: &Model, params: ParamVector, final_loss: Option<f64>, diverged: bool) -> Result<Self> {
        if params.len() != model.param_count() {
            return Err(Error::DimensionMismatch {
                what: "checkpoint parameters",
                expected: model.param_count(),
                got: params.len(),
            });
        }
        Ok(Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: model.kind(),
            mlp: model.mlp_spec().clone(),
            bodies: model.bodies().clone(),
            params,
            final_loss,
            diverged,
            config_echo: None,
        })
    }

    /// Rebuilds the model, checking the parameter count.
    pub fn model(&self) -> Result<Model> {
        let model = Model::new(self.kind, self.mlp.clone(), self.bodies.clone())
            .map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
        if self.params.len() != model.param_count() {
            return Err(Error::CheckpointMismatch(format!(
                "{} parameters stored, network needs {}",
                self.params.len(),
                model.param_count()
            )));
        }
        Ok(model)
    }

    /// Errors unless the checkpoint describes the same network shape and
    /// system as `expected` (initialization seeds may differ).
    pub fn check_compatible(&self, kind: ModelKind, mlp: &MlpSpec, bodies: &BodySpec) -> Result<()> {
        let mut problems = Vec::new();
        if self.kind != kind {
            problems.push(format!("model kind {} vs {}", self.kind, kind));
        }
        if self.mlp.layer_sizes != mlp.layer_sizes {
            problems.push(format!("layer sizes {:?} vs {:?}", self.mlp.layer_sizes, mlp.layer_sizes));
        }
        if self.mlp.activation != mlp.activation {
            problems.push(format!("activation {} vs {}", self.mlp.activation, mlp.activation));
        }
        if &self.bodies != bodies {
            problems.push("system bodies differ".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::CheckpointMismatch(problems.join("; ")))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointMismatch(format!("unsupported format {} v{}", c.format, c.version)));
        }
        c.model()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json();
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Writes pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

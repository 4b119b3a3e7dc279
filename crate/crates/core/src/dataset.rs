//! Datasets of observed trajectories and their on-disk formats.
//!
//! Trajectory CSV: one row per jump record,
//! `traj_id,z_1,...,z_d,time,state,censored`, rows of a trajectory in
//! ascending time. `censored` is 1 only on the censoring record.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chain::{CensoringModel, ChainTopology, CovariateLaw, Jump, Trajectory};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    topology: ChainTopology,
    trajectories: Vec<Trajectory>,
    dim: usize,
}

impl Dataset {
    pub fn new(topology: ChainTopology, trajectories: Vec<Trajectory>) -> Result<Self> {
        let Some(first) = trajectories.first() else {
            return Err(Error::InvalidConfig(
                "dataset needs at least one trajectory".into(),
            ));
        };
        let dim = first.covariate.len();
        for (i, t) in trajectories.iter().enumerate() {
            if t.covariate.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: t.covariate.len(),
                });
            }
            t.validate(&topology, i)?;
        }
        Ok(Dataset {
            topology,
            trajectories,
            dim,
        })
    }

    pub fn topology(&self) -> &ChainTopology {
        &self.topology
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn covariates(&self) -> Vec<Vec<f64>> {
        self.trajectories
            .iter()
            .map(|t| t.covariate.clone())
            .collect()
    }

    /// Subset of trajectories by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let trajectories = indices
            .iter()
            .map(|&i| self.trajectories[i].clone())
            .collect();
        Dataset::new(self.topology.clone(), trajectories)
    }

    pub fn with_topology(self, topology: ChainTopology) -> Result<Dataset> {
        Dataset::new(topology, self.trajectories)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_trajectories_csv(&self.trajectories, writer)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

pub fn write_trajectories_csv<W: Write>(trajectories: &[Trajectory], writer: W) -> Result<()> {
    let dim = trajectories.first().map_or(0, |t| t.covariate.len());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["traj_id".to_string()];
    header.extend((1..=dim).map(|j| format!("z_{j}")));
    header.extend(["time", "state", "censored"].map(String::from));
    w.write_record(&header)?;
    for (id, t) in trajectories.iter().enumerate() {
        let n = t.jumps.len();
        for (k, j) in t.jumps.iter().enumerate() {
            let mut row = vec![id.to_string()];
            row.extend(t.covariate.iter().map(|v| v.to_string()));
            row.push(j.time.to_string());
            row.push(j.state.to_string());
            row.push(if t.censored && k + 1 == n { "1" } else { "0" }.to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses trajectory CSV. Trajectories are returned in order of first appearance.
pub fn read_trajectories_csv<R: Read>(reader: R) -> Result<Vec<Trajectory>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = r.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    let pos = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Format(format!("missing column '{name}'")))
    };
    let id_col = pos("traj_id")?;
    let time_col = pos("time")?;
    let state_col = pos("state")?;
    let cens_col = pos("censored")?;
    let mut z_cols = Vec::new();
    for j in 1.. {
        match cols.iter().position(|c| *c == format!("z_{j}")) {
            Some(p) => z_cols.push(p),
            None => break,
        }
    }

    let mut index: HashMap<String, usize> = HashMap::new();
    let mut out: Vec<(Vec<f64>, Vec<Jump>, bool)> = Vec::new();
    for (row_no, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = row_no + 2;
        let field = |c: usize| {
            rec.get(c)
                .ok_or_else(|| Error::Format(format!("line {line}: short row")))
        };
        let num = |c: usize| -> Result<f64> {
            let s = field(c)?;
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("line {line}: bad number '{s}'")))
        };
        let id = field(id_col)?.to_string();
        let z: Vec<f64> = z_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?;
        let time = num(time_col)?;
        let state_s = field(state_col)?;
        let state = state_s
            .parse::<usize>()
            .map_err(|_| Error::Format(format!("line {line}: bad state '{state_s}'")))?;
        let censored = match field(cens_col)? {
            "1" | "true" | "TRUE" | "True" => true,
            "0" | "false" | "FALSE" | "False" => false,
            other => {
                return Err(Error::Format(format!(
                    "line {line}: bad censored flag '{other}'"
                )))
            }
        };
        let next = index.len();
        let slot = *index.entry(id).or_insert(next);
        if slot == out.len() {
            out.push((z, Vec::new(), false));
        } else if out[slot].0 != z {
            return Err(Error::Format(format!(
                "line {line}: covariate changes within a trajectory"
            )));
        }
        let entry = &mut out[slot];
        if entry.2 {
            return Err(Error::Format(format!(
                "line {line}: record after censoring"
            )));
        }
        entry.1.push(Jump { time, state });
        entry.2 = censored;
    }
    Ok(out
        .into_iter()
        .map(|(z, jumps, c)| Trajectory::new(z, jumps, c))
        .collect())
}

pub fn load_trajectories_csv(path: &Path) -> Result<Vec<Trajectory>> {
    let file = std::fs::File::open(path)?;
    read_trajectories_csv(std::io::BufReader::new(file))
}

/// JSON sidecar written next to a simulated `data.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub seed: u64,
    pub n_trajectories: usize,
    pub topology: ChainTopology,
    pub censoring: CensoringModel,
    pub covariate_law: CovariateLaw,
    pub initial_state: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case: Option<String>,
}

impl DatasetMetadata {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

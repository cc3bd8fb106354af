//! Write-once store of agent forecast densities.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::target::TargetRole;
use crate::calendar::YearMonth;
use crate::density::AgentForecastDensity;
use crate::error::{BpsError, Result};

pub const ARCHIVE_HEADER: &str = "origin_date,target_date,series,type,param_name,value";
const META_FILE: &str = "archive.meta";
const ALL_SERIES: &str = "*";

/// `(origin, horizon, agent)`.
pub type ArchiveKey = (YearMonth, usize, usize);

/// Agent forecasts indexed by origin date, horizon and agent.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForecastArchive {
    pub series: Vec<String>,
    pub roles: Vec<TargetRole>,
    pub agents: Vec<String>,
    entries: BTreeMap<ArchiveKey, AgentForecastDensity>,
}

impl ForecastArchive {
    pub fn new(series: Vec<String>, roles: Vec<TargetRole>, agents: Vec<String>) -> Result<Self> {
        if series.len() != roles.len() || series.is_empty() || agents.is_empty() {
            return Err(BpsError::Archive("archive needs matching series/roles and at least one agent".into()));
        }
        if series.iter().any(|s| s.is_empty() || s == ALL_SERIES || s.contains([',', '\n']))
            || agents.iter().any(|a| a.is_empty() || a.contains([';', '\n']))
        {
            return Err(BpsError::Archive("series or agent name contains a reserved character".into()));
        }
        Ok(Self { series, roles, agents, entries: BTreeMap::new() })
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn num_series(&self) -> usize {
        self.series.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Store a forecast. A key can be written only once.
    pub fn insert(
        &mut self,
        origin: YearMonth,
        horizon: usize,
        agent: usize,
        density: AgentForecastDensity,
    ) -> Result<()> {
        if agent >= self.num_agents() {
            return Err(BpsError::Archive(format!("agent index {agent} out of range")));
        }
        if density.dim() != self.num_series() {
            return Err(BpsError::Archive(format!(
                "forecast has dimension {}, archive has {} series",
                density.dim(),
                self.num_series()
            )));
        }
        density.validate()?;
        match self.entries.entry((origin, horizon, agent)) {
            std::collections::btree_map::Entry::Occupied(_) => Err(BpsError::Archive(format!(
                "forecast for origin {origin}, horizon {horizon}, agent {} already archived",
                self.agents[agent]
            ))),
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(density);
                Ok(())
            }
        }
    }

    pub fn get(&self, origin: YearMonth, horizon: usize, agent: usize) -> Option<&AgentForecastDensity> {
        self.entries.get(&(origin, horizon, agent))
    }

    /// All agents' forecasts for one origin and horizon, if complete.
    pub fn agent_set(&self, origin: YearMonth, horizon: usize) -> Option<Vec<AgentForecastDensity>> {
        (0..self.num_agents())
            .map(|j| self.get(origin, horizon, j).cloned())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ArchiveKey, &AgentForecastDensity)> {
        self.entries.iter()
    }

    /// Distinct origins that have at least one forecast at `horizon`.
    pub fn origins(&self, horizon: usize) -> Vec<YearMonth> {
        let mut out: Vec<YearMonth> =
            self.entries.keys().filter(|k| k.1 == horizon).map(|k| k.0).collect();
        out.dedup();
        out
    }

    pub fn horizons(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.entries.keys().map(|k| k.1).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Merge another archive with the same layout; overlapping keys are an error.
    pub fn merge(&mut self, other: ForecastArchive) -> Result<()> {
        if other.series != self.series || other.agents != self.agents || other.roles != self.roles {
            return Err(BpsError::Archive("cannot merge archives with different layouts".into()));
        }
        for ((o, k, j), d) in other.entries {
            self.insert(o, k, j, d)?;
        }
        Ok(())
    }

    /// Write `archive.meta` plus one `agent<j>_k<k>.csv` per agent and horizon.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut meta = String::new();
        let _ = writeln!(meta, "series={}", self.series.join(","));
        let roles: Vec<&str> = self.roles.iter().map(|r| r.as_str()).collect();
        let _ = writeln!(meta, "roles={}", roles.join(","));
        let _ = writeln!(meta, "agents={}", self.agents.join(";"));
        fs::write(dir.join(META_FILE), meta)?;
        for k in self.horizons() {
            for j in 0..self.num_agents() {
                let mut out = String::from(ARCHIVE_HEADER);
                out.push('\n');
                for ((origin, _, _), d) in self.entries.iter().filter(|(key, _)| key.1 == k && key.2 == j) {
                    self.write_density(&mut out, *origin, k, d);
                }
                fs::write(dir.join(file_name(j, k)), out)?;
            }
        }
        Ok(())
    }

    fn write_density(&self, out: &mut String, origin: YearMonth, k: usize, d: &AgentForecastDensity) {
        let target = origin.add_months(k as i64);
        let mut row = |series: &str, kind: &str, param: &str, value: f64| {
            let _ = writeln!(out, "{origin},{target},{series},{kind},{param},{value:?}");
        };
        let names = &self.series;
        match d {
            AgentForecastDensity::Normal { mean, cov } => {
                for (r, name) in names.iter().enumerate() {
                    row(name, "normal", "mean", mean[r]);
                }
                for (r, name) in names.iter().enumerate() {
                    for (c, other) in names.iter().enumerate() {
                        row(name, "normal", &format!("cov:{other}"), cov[(r, c)]);
                    }
                }
            }
            AgentForecastDensity::StudentT { dof, loc, scale } => {
                row(ALL_SERIES, "student_t", "dof", *dof);
                for (r, name) in names.iter().enumerate() {
                    row(name, "student_t", "loc", loc[r]);
                }
                for (r, name) in names.iter().enumerate() {
                    for (c, other) in names.iter().enumerate() {
                        row(name, "student_t", &format!("scale:{other}"), scale[(r, c)]);
                    }
                }
            }
            AgentForecastDensity::Empirical { draws, .. } => {
                for i in 0..draws.nrows() {
                    for (r, name) in names.iter().enumerate() {
                        row(name, "empirical", &format!("draw:{i}"), draws[(i, r)]);
                    }
                }
            }
        }
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta = fs::read_to_string(dir.join(META_FILE))
            .map_err(|e| BpsError::Archive(format!("cannot read {}: {e}", dir.join(META_FILE).display())))?;
        let mut series = None;
        let mut roles = None;
        let mut agents = None;
        for line in meta.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| BpsError::Archive(format!("bad metadata line '{line}'")))?;
            match key {
                "series" => series = Some(value.split(',').map(String::from).collect::<Vec<_>>()),
                "roles" => {
                    roles = Some(value.split(',').map(str::parse).collect::<Result<Vec<TargetRole>>>()?)
                }
                "agents" => agents = Some(value.split(';').map(String::from).collect::<Vec<_>>()),
                _ => return Err(BpsError::Archive(format!("unknown metadata key '{key}'"))),
            }
        }
        let missing = |what: &str| BpsError::Archive(format!("archive metadata lacks '{what}'"));
        let mut archive = Self::new(
            series.ok_or_else(|| missing("series"))?,
            roles.ok_or_else(|| missing("roles"))?,
            agents.ok_or_else(|| missing("agents"))?,
        )?;
        let mut files: Vec<(usize, usize, std::path::PathBuf)> = Vec::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            if let Some((j, k)) = parse_file_name(&name) {
                files.push((j, k, path));
            }
        }
        files.sort();
        for (j, k, path) in files {
            let text = fs::read_to_string(&path)?;
            archive.read_file(&text, j, k, &path.display().to_string())?;
        }
        Ok(archive)
    }

    fn read_file(&mut self, text: &str, agent: usize, k: usize, what: &str) -> Result<()> {
        let mut lines = text.lines();
        if lines.next() != Some(ARCHIVE_HEADER) {
            return Err(BpsError::Archive(format!("{what}: unexpected header")));
        }
        let q = self.num_series();
        let series = self.series.clone();
        let index_of = |name: &str| -> Result<usize> {
            series
                .iter()
                .position(|s| s == name)
                .ok_or_else(|| BpsError::Archive(format!("{what}: unknown series '{name}'")))
        };
        let mut groups: Vec<(YearMonth, String, Vec<(String, String, f64)>)> = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(BpsError::Archive(format!("{what}:{}: expected 6 fields", n + 2)));
            }
            let origin: YearMonth = f[0].parse()?;
            let target: YearMonth = f[1].parse()?;
            if target != origin.add_months(k as i64) {
                return Err(BpsError::Archive(format!("{what}:{}: target date does not match horizon", n + 2)));
            }
            let value: f64 = f[5]
                .parse()
                .map_err(|_| BpsError::Archive(format!("{what}:{}: bad value '{}'", n + 2, f[5])))?;
            match groups.last_mut() {
                Some((o, kind, rows)) if *o == origin && kind == f[3] => {
                    rows.push((f[2].to_string(), f[4].to_string(), value))
                }
                _ => groups.push((origin, f[3].to_string(), vec![(f[2].to_string(), f[4].to_string(), value)])),
            }
        }
        for (origin, kind, rows) in groups {
            let density = match kind.as_str() {
                "normal" | "student_t" => {
                    let mut dof = None;
                    let mut loc = DVector::zeros(q);
                    let mut mat = DMatrix::zeros(q, q);
                    for (series, param, value) in &rows {
                        if param == "dof" {
                            dof = Some(*value);
                        } else if param == "mean" || param == "loc" {
                            loc[index_of(series)?] = *value;
                        } else if let Some(other) =
                            param.strip_prefix("cov:").or_else(|| param.strip_prefix("scale:"))
                        {
                            mat[(index_of(series)?, index_of(other)?)] = *value;
                        } else {
                            return Err(BpsError::Archive(format!("{what}: unknown parameter '{param}'")));
                        }
                    }
                    if kind == "normal" {
                        AgentForecastDensity::normal(loc, mat)
                    } else {
                        let dof = dof.ok_or_else(|| BpsError::Archive(format!("{what}: missing dof at {origin}")))?;
                        AgentForecastDensity::student_t(dof, loc, mat)
                    }
                }
                "empirical" => {
                    let mut cells = Vec::with_capacity(rows.len());
                    for (series, param, value) in &rows {
                        let i: usize = param
                            .strip_prefix("draw:")
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| BpsError::Archive(format!("{what}: bad draw label '{param}'")))?;
                        cells.push((i, index_of(series)?, *value));
                    }
                    let n = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
                    if cells.len() != n * q {
                        return Err(BpsError::Archive(format!("{what}: incomplete draws at {origin}")));
                    }
                    let mut draws = DMatrix::zeros(n, q);
                    for (i, r, v) in cells {
                        draws[(i, r)] = v;
                    }
                    AgentForecastDensity::empirical(draws)
                }
                other => return Err(BpsError::Archive(format!("{what}: unknown density type '{other}'"))),
            };
            self.insert(origin, k, agent, density)?;
        }
        Ok(())
    }
}

fn file_name(agent: usize, k: usize) -> String {
    format!("agent{}_k{k}.csv", agent + 1)
}

fn parse_file_name(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("agent")?.strip_suffix(".csv")?;
    let (j, k) = rest.split_once("_k")?;
    let j: usize = j.parse().ok()?;
    Some((j.checked_sub(1)?, k.parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ym(s: &str) -> YearMonth {
        s.parse().unwrap()
    }

    fn sample_archive() -> ForecastArchive {
        let mut a = ForecastArchive::new(
            vec!["p".into(), "i".into()],
            vec![TargetRole::ChangeFromOrigin, TargetRole::Cumulative],
            vec!["VAR(1)".into(), "VAR(1:3:9)".into()],
        )
        .unwrap();
        let scale = DMatrix::from_row_slice(2, 2, &[0.3, 0.1 / 7.0, 0.1 / 7.0, 2.0]);
        a.insert(ym("2000-12"), 1, 0, AgentForecastDensity::student_t(11.7, DVector::from_vec(vec![0.1, -1e-9]), scale.clone()))
            .unwrap();
        a.insert(ym("2000-12"), 1, 1, AgentForecastDensity::normal(DVector::from_vec(vec![1.0 / 3.0, 2.0]), scale))
            .unwrap();
        let draws = DMatrix::from_fn(5, 2, |i, r| (i as f64 + 0.1) / (r as f64 + 3.0));
        a.insert(ym("2000-12"), 12, 0, AgentForecastDensity::empirical(draws.clone())).unwrap();
        a.insert(ym("2001-01"), 12, 0, AgentForecastDensity::empirical(draws * std::f64::consts::PI)).unwrap();
        a
    }

    #[test]
    fn write_once() {
        let mut a = sample_archive();
        let err = a
            .insert(ym("2000-12"), 1, 0, AgentForecastDensity::point_mass(DVector::zeros(2)))
            .unwrap_err();
        assert!(err.to_string().contains("already archived"));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let a = sample_archive();
        let dir = tempfile::tempdir().unwrap();
        a.write_dir(dir.path()).unwrap();
        let b = ForecastArchive::read_dir(dir.path()).unwrap();
        assert_eq!(a, b);
        let text = fs::read_to_string(dir.path().join("agent1_k12.csv")).unwrap();
        assert!(text.starts_with(ARCHIVE_HEADER));
        assert!(text.contains("2001-01,2002-01,i,empirical,draw:4,"));
    }

    #[test]
    fn agent_sets_need_every_agent() {
        let a = sample_archive();
        assert_eq!(a.agent_set(ym("2000-12"), 1).unwrap().len(), 2);
        assert!(a.agent_set(ym("2000-12"), 12).is_none());
        assert_eq!(a.origins(12), vec![ym("2000-12"), ym("2001-01")]);
        assert_eq!(a.horizons(), vec![1, 12]);
    }
}

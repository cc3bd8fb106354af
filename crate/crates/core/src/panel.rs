//! Monthly multivariate time-series panel and its CSV form.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::calendar::YearMonth;
use crate::error::{BpsError, Result};

/// How a raw series was transformed before modelling, which fixes how its
/// multi-step forecast targets are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SeriesTransform {
    /// Annual percent change; k-step targets are changes from the origin value.
    AnnualChange,
    /// Monthly change; k-step targets are cumulative sums over the horizon.
    MonthlyChange,
    /// Level; k-step targets are the level at the target date.
    #[default]
    Level,
}

impl SeriesTransform {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::AnnualChange => "annual_change",
            Self::MonthlyChange => "monthly_change",
            Self::Level => "level",
        }
    }
}

impl FromStr for SeriesTransform {
    type Err = BpsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "annual_change" => Ok(Self::AnnualChange),
            "monthly_change" => Ok(Self::MonthlyChange),
            "level" => Ok(Self::Level),
            other => Err(BpsError::Config(format!(
                "unknown series transform '{other}' (annual_change | monthly_change | level)"
            ))),
        }
    }
}

/// `T x q` observations on a gap-free monthly index.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesPanel {
    pub dates: Vec<YearMonth>,
    pub values: DMatrix<f64>,
    pub names: Vec<String>,
    pub transforms: Vec<SeriesTransform>,
}

impl TimeSeriesPanel {
    pub fn new(
        dates: Vec<YearMonth>,
        values: DMatrix<f64>,
        names: Vec<String>,
        transforms: Vec<SeriesTransform>,
    ) -> Result<Self> {
        let panel = Self { dates, values, names, transforms };
        panel.validate()?;
        Ok(panel)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.nrows() != self.dates.len() {
            return Err(BpsError::Data(format!(
                "{} dates but {} rows of values",
                self.dates.len(),
                self.values.nrows()
            )));
        }
        if self.values.ncols() != self.names.len() || self.names.len() != self.transforms.len() {
            return Err(BpsError::Data("series names, transforms and columns disagree".into()));
        }
        for w in self.dates.windows(2) {
            if w[1] == w[0] {
                return Err(BpsError::Data(format!("duplicate date {}", w[0])));
            }
            if w[1] != w[0].succ() {
                return Err(BpsError::Data(format!(
                    "gap in dates: {} is followed by {} (expected {})",
                    w[0],
                    w[1],
                    w[0].succ()
                )));
            }
        }
        if let Some((i, _)) = self.values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (r, c) = (i % self.values.nrows(), i / self.values.nrows());
            return Err(BpsError::Data(format!(
                "non-finite value for {} at {}",
                self.names[c], self.dates[r]
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn num_series(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, t: usize) -> DVector<f64> {
        self.values.row(t).transpose()
    }

    /// Row index of `date`, if inside the panel.
    pub fn index_of(&self, date: YearMonth) -> Option<usize> {
        let first = *self.dates.first()?;
        let i = date.months_since(first);
        (i >= 0 && (i as usize) < self.len()).then_some(i as usize)
    }

    /// Apply transform tags by series name; unknown names are an error.
    pub fn with_transforms(mut self, tags: &HashMap<String, SeriesTransform>) -> Result<Self> {
        for name in tags.keys() {
            if !self.names.contains(name) {
                return Err(BpsError::Config(format!("transform given for unknown series '{name}'")));
            }
        }
        for (i, name) in self.names.iter().enumerate() {
            if let Some(t) = tags.get(name) {
                self.transforms[i] = *t;
            }
        }
        Ok(self)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("date");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (t, d) in self.dates.iter().enumerate() {
            let _ = write!(out, "{d}");
            for c in 0..self.num_series() {
                let _ = write!(out, ",{:?}", self.values[(t, c)]);
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| BpsError::Data("empty panel file".into()))?;
        let mut cols = header.split(',').map(str::trim);
        if cols.next() != Some("date") {
            return Err(BpsError::Data("panel header must start with 'date'".into()));
        }
        let names: Vec<String> = cols.map(String::from).collect();
        if names.is_empty() {
            return Err(BpsError::Data("panel has no series columns".into()));
        }
        let q = names.len();
        let mut dates = Vec::new();
        let mut flat = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != q + 1 {
                return Err(BpsError::Data(format!(
                    "line {}: expected {} fields, found {}",
                    lineno + 2,
                    q + 1,
                    fields.len()
                )));
            }
            dates.push(fields[0].parse::<YearMonth>()?);
            for (c, f) in fields[1..].iter().enumerate() {
                let v: f64 = f.parse().map_err(|_| {
                    BpsError::Data(format!(
                        "line {}: non-numeric value '{f}' for series {}",
                        lineno + 2,
                        names[c]
                    ))
                })?;
                flat.push(v);
            }
        }
        let values = DMatrix::from_row_slice(dates.len(), q, &flat);
        Self::new(dates, values, names, vec![SeriesTransform::Level; q])
    }
}

/// Read a `date,<name1>,...` CSV. Transforms default to `Level`.
pub fn load_panel(path: &Path) -> Result<TimeSeriesPanel> {
    let text = fs::read_to_string(path)
        .map_err(|e| BpsError::Data(format!("cannot read {}: {e}", path.display())))?;
    TimeSeriesPanel::parse_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dates = vec!["2000-01".parse().unwrap(), "2000-02".parse().unwrap()];
        let values = DMatrix::from_row_slice(2, 2, &[0.1, 1.0 / 3.0, -2.5e-12, 1e300]);
        let p = TimeSeriesPanel::new(dates, values, vec!["a".into(), "b".into()], vec![SeriesTransform::Level; 2]).unwrap();
        let back = TimeSeriesPanel::parse_csv(&p.to_csv_string()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn gap_is_named() {
        let text = "date,a\n2000-01,1\n2000-03,2\n";
        let err = TimeSeriesPanel::parse_csv(text).unwrap_err().to_string();
        assert!(err.contains("2000-01") && err.contains("2000-03"), "{err}");
    }

    #[test]
    fn duplicate_and_non_numeric_rejected() {
        assert!(TimeSeriesPanel::parse_csv("date,a\n2000-01,1\n2000-01,2\n")
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
        assert!(TimeSeriesPanel::parse_csv("date,a\n2000-01,x\n")
            .unwrap_err()
            .to_string()
            .contains("non-numeric"));
    }

    #[test]
    fn transforms_by_name() {
        let p = TimeSeriesPanel::parse_csv("date,p,i\n2000-01,1,2\n").unwrap();
        let tags = HashMap::from([("i".to_string(), SeriesTransform::MonthlyChange)]);
        let p = p.with_transforms(&tags).unwrap();
        assert_eq!(p.transforms, vec![SeriesTransform::Level, SeriesTransform::MonthlyChange]);
        let bad = HashMap::from([("z".to_string(), SeriesTransform::Level)]);
        assert!(p.with_transforms(&bad).is_err());
    }
}

//! Lag sets for the VAR agents.

use std::fmt;
use std::str::FromStr;

use crate::error::{BpsError, Result};

/// Strictly increasing set of positive lags.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LagSpec {
    lags: Vec<usize>,
}

impl LagSpec {
    pub fn new(mut lags: Vec<usize>) -> Result<Self> {
        lags.sort_unstable();
        lags.dedup();
        if lags.is_empty() || lags[0] == 0 {
            return Err(BpsError::Config("lag set must be nonempty and positive".into()));
        }
        Ok(Self { lags })
    }

    pub fn lags(&self) -> &[usize] {
        &self.lags
    }

    pub fn max_lag(&self) -> usize {
        *self.lags.last().expect("nonempty by construction")
    }

    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `"p"` gives lags `1..=p`; `"a:s:b"` gives `a` then every multiple of `s` up to `b`.
pub fn parse_lag_spec(text: &str) -> Result<LagSpec> {
    let text = text.trim();
    let num = |s: &str| -> Result<usize> {
        s.trim()
            .parse::<usize>()
            .ok()
            .filter(|v| *v > 0)
            .ok_or_else(|| BpsError::Config(format!("malformed lag spec '{text}': '{s}' is not a positive integer")))
    };
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        [p] => LagSpec::new((1..=num(p)?).collect()),
        [a, s, b] => {
            let (a, s, b) = (num(a)?, num(s)?, num(b)?);
            if b % s != 0 {
                return Err(BpsError::Config(format!(
                    "lag spec '{text}': end {b} is not a multiple of the interval {s}"
                )));
            }
            if a > b {
                return Err(BpsError::Config(format!("lag spec '{text}': start exceeds end")));
            }
            let mut lags = vec![a];
            lags.extend((1..=b / s).map(|i| i * s));
            LagSpec::new(lags)
        }
        _ => Err(BpsError::Config(format!(
            "malformed lag spec '{text}', expected 'p' or 'a:s:b'"
        ))),
    }
}

impl FromStr for LagSpec {
    type Err = BpsError;

    fn from_str(s: &str) -> Result<Self> {
        parse_lag_spec(s)
    }
}

impl fmt::Display for LagSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let body: Vec<String> = self.lags.iter().map(|l| l.to_string()).collect();
        write!(f, "{{{}}}", body.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_rule() {
        assert_eq!(parse_lag_spec("1:3:9").unwrap().lags(), &[1, 3, 6, 9]);
        assert_eq!(parse_lag_spec("1:6:12").unwrap().lags(), &[1, 6, 12]);
        assert_eq!(parse_lag_spec("3").unwrap().lags(), &[1, 2, 3]);
        assert_eq!(parse_lag_spec("12").unwrap().max_lag(), 12);
    }

    #[test]
    fn malformed() {
        for bad in ["", "0", "x", "1:3", "1:4:9", "1:0:3", "9:3:6", "1:2:3:4"] {
            assert!(parse_lag_spec(bad).is_err(), "{bad}");
        }
    }
}

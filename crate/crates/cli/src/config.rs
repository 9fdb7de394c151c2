//! Experiment configuration: defaults, flat `key=value` files and overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dharq_core::sim::{CdfPoint, Protocol};
use dharq_core::{ApproximationMode, CombiningScheme};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value for '{key}': {reason}")]
    BadValue { key: String, reason: String },
    #[error("{path}:{line}: expected key=value")]
    Syntax { path: String, line: usize },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Inclusive arithmetic grid `start:stop:step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Grid {
    pub fn single(value: f64) -> Self {
        Self {
            start: value,
            stop: value,
            step: 1.0,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        let count = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| self.start + i as f64 * self.step).collect()
    }
}

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let num = |p: &str| p.parse::<f64>().map_err(|e| format!("'{p}': {e}"));
        let grid = match parts.as_slice() {
            [v] => Self::single(num(v)?),
            [a, b, c] => Self {
                start: num(a)?,
                stop: num(b)?,
                step: num(c)?,
            },
            _ => return Err(format!("expected start:stop:step or a single value, got '{s}'")),
        };
        if ![grid.start, grid.stop, grid.step].iter().all(|v| v.is_finite()) {
            return Err("grid bounds must be finite".into());
        }
        if grid.step <= 0.0 || grid.stop < grid.start {
            return Err(format!("grid '{s}' is empty (need step > 0 and stop >= start)"));
        }
        Ok(grid)
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.start, self.stop, self.step)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scheme: CombiningScheme,
    pub mode: ApproximationMode,
    pub protocols: Vec<Protocol>,
    pub k: u32,
    pub n: u32,
    pub l: u32,
    pub m: Vec<u32>,
    pub snr_db: Grid,
    /// Information lengths for `sweep-rate`.
    pub k_grid: Vec<u32>,
    pub packets: usize,
    pub warmup: usize,
    pub replicas: usize,
    pub seed: u64,
    /// Monte Carlo samples per fading-averaged error probability.
    pub samples: usize,
    pub realizations: usize,
    pub cdf_points: usize,
    pub cdf_point: CdfPoint,
    pub out: Option<PathBuf>,
    pub json: Option<PathBuf>,
    pub cache: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scheme: CombiningScheme::ChaseCombining,
            mode: ApproximationMode::StandardNormal,
            protocols: Protocol::ALL.to_vec(),
            k: 32,
            n: 32,
            l: 2,
            m: vec![1],
            snr_db: Grid {
                start: 0.0,
                stop: 20.0,
                step: 1.0,
            },
            k_grid: (8..=64).step_by(8).collect(),
            packets: 1_000_000,
            warmup: dharq_core::sim::DEFAULT_WARMUP,
            replicas: 1,
            seed: 1,
            samples: dharq_core::averaging::DEFAULT_SAMPLE_COUNT,
            realizations: 100_000,
            cdf_points: 10_000,
            cdf_point: CdfPoint::Cap,
            out: None,
            json: None,
            cache: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        reason: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// `a:b:c` as an integer range or `a,b,c` as an explicit list.
fn parse_int_grid(key: &str, value: &str) -> Result<Vec<u32>, ConfigError> {
    if value.contains(':') {
        let grid: Grid = parse(key, value)?;
        let bad = |reason: &str| ConfigError::BadValue {
            key: key.into(),
            reason: reason.into(),
        };
        if grid.start < 0.0 || grid.start.fract() != 0.0 || grid.step.fract() != 0.0 {
            return Err(bad("integer grid needs whole, nonnegative bounds"));
        }
        Ok(grid.values().into_iter().map(|v| v as u32).collect())
    } else {
        parse_list(key, value)
    }
}

impl ExperimentConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "scheme" => self.scheme = parse(key, value)?,
            "mode" => self.mode = parse(key, value)?,
            "protocols" => self.protocols = parse_list(key, value)?,
            "k" => self.k = parse(key, value)?,
            "n" => self.n = parse(key, value)?,
            "L" | "l" => self.l = parse(key, value)?,
            "m" => self.m = parse_list(key, value)?,
            "snr-db" | "snr_db" => self.snr_db = parse(key, value)?,
            "k-grid" | "k_grid" => self.k_grid = parse_int_grid(key, value)?,
            "packets" => self.packets = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "replicas" => self.replicas = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            "realizations" => self.realizations = parse(key, value)?,
            "cdf-points" | "cdf_points" => self.cdf_points = parse(key, value)?,
            "cdf-point" | "cdf_point" => self.cdf_point = parse(key, value)?,
            "out" => self.out = Some(PathBuf::from(value)),
            "json" => self.json = Some(PathBuf::from(value)),
            "cache" => self.cache = Some(PathBuf::from(value)),
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Applies a flat `key=value` file; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: path.display().to_string(),
                line: i + 1,
            })?;
            self.apply(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        if self.protocols.is_empty() {
            return invalid("protocol list is empty".into());
        }
        if self.k == 0 || self.n == 0 {
            return invalid("k and n must be positive".into());
        }
        if self.l == 0 {
            return invalid("L must be positive".into());
        }
        if self.m.is_empty() {
            return invalid("m list is empty".into());
        }
        if let Some(m) = self.m.iter().find(|m| **m >= self.l) {
            return invalid(format!("m={m} violates 0 <= m < L={}", self.l));
        }
        if self.k_grid.is_empty() || self.k_grid.contains(&0) {
            return invalid("k grid must be nonempty with positive entries".into());
        }
        if self.samples == 0 || self.packets == 0 || self.realizations == 0 {
            return invalid("samples, packets and realizations must be positive".into());
        }
        if self.replicas == 0 || self.replicas > self.packets {
            return invalid(format!("replicas must be in 1..={}", self.packets));
        }
        Ok(())
    }

    /// Everything needed to reproduce a run, as one line.
    pub fn fingerprint(&self, command: &str) -> String {
        let join = |v: &[u32]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let protocols = self.protocols.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(",");
        let cdf_point = match self.cdf_point {
            CdfPoint::Cap => "cap",
            CdfPoint::Termination => "termination",
        };
        format!(
            "dharq {} {command} scheme={} mode={} protocols={protocols} k={} n={} L={} m={} snr_db={} k_grid={} samples={} seed={} packets={} warmup={} replicas={} realizations={} cdf_points={} cdf_point={cdf_point}",
            env!("CARGO_PKG_VERSION"),
            self.scheme,
            self.mode,
            self.k,
            self.n,
            self.l,
            join(&self.m),
            self.snr_db,
            join(&self.k_grid),
            self.samples,
            self.seed,
            self.packets,
            self.warmup,
            self.replicas,
            self.realizations,
            self.cdf_points,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g: Grid = "0:20:1".parse().unwrap();
        assert_eq!(g.values().len(), 21);
        let g: Grid = "5:6:0.5".parse().unwrap();
        assert_eq!(g.values(), vec![5.0, 5.5, 6.0]);
        let g: Grid = "0:1:0.1".parse().unwrap();
        assert_eq!(g.values().len(), 11);
        assert_eq!("10".parse::<Grid>().unwrap().values(), vec![10.0]);
        assert!("3:1:1".parse::<Grid>().is_err());
        assert!("0:1:0".parse::<Grid>().is_err());
        assert!("a:b".parse::<Grid>().is_err());
        assert!("0:inf:1".parse::<Grid>().is_err());
    }

    #[test]
    fn apply_keys() {
        let mut c = ExperimentConfig::default();
        c.apply("L", "4").unwrap();
        c.apply("m", "0,1,2").unwrap();
        c.apply("k-grid", "8:24:8").unwrap();
        c.apply("protocols", "dharq,fixed").unwrap();
        c.apply("mode", "verbatim").unwrap();
        assert_eq!(c.l, 4);
        assert_eq!(c.m, vec![0, 1, 2]);
        assert_eq!(c.k_grid, vec![8, 16, 24]);
        assert_eq!(c.protocols, vec![Protocol::DHarq, Protocol::FixedTx]);
        assert_eq!(c.mode, ApproximationMode::Verbatim);
        assert!(matches!(c.apply("bogus", "1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(c.apply("k", "x"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn validation() {
        let mut c = ExperimentConfig::default();
        assert!(c.validate().is_ok());
        c.protocols.clear();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.m = vec![2];
        assert!(c.validate().is_err());
    }

    #[test]
    fn file_then_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.cfg");
        fs::write(&path, "# operating point\nk = 24\nL=3\nm=2 # max credit\n\nscheme=ir\n").unwrap();
        let mut c = ExperimentConfig::default();
        c.apply_file(&path).unwrap();
        c.apply("k", "40").unwrap();
        assert_eq!((c.k, c.l, c.m.clone(), c.scheme), (40, 3, vec![2], CombiningScheme::IncrementalRedundancy));
        fs::write(&path, "k 24\n").unwrap();
        assert!(matches!(ExperimentConfig::default().apply_file(&path), Err(ConfigError::Syntax { line: 1, .. })));
    }

    #[test]
    fn fingerprint_records_everything() {
        let f = ExperimentConfig::default().fingerprint("analyze");
        for needle in ["analyze", "scheme=cc", "mode=normal", "seed=1", "samples=1000000", "L=2", "m=1", "snr_db=0:20:1"] {
            assert!(f.contains(needle), "{needle} missing from {f}");
        }
    }
}

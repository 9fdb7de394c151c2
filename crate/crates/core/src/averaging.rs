//! Fading-averaged error probabilities `eps_w(k, N)`.
//!
//! `eps_w` is the expectation of the conditional error over `w` i.i.d.
//! exponential branch SNRs, estimated by Monte Carlo. Samples are split into
//! fixed chunks of [`CHUNK_SIZE`]; branch `b` of chunk `c` comes from its own
//! ChaCha stream, so:
//!
//! * the estimate for `w + 1` reuses exactly the first `w` branches of the
//!   estimate for `w` (nested common random numbers, which keeps Chase
//!   combining tables monotone sample by sample),
//! * every mean SNR reuses the same unit exponentials,
//! * the result does not depend on the number of worker threads.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{FadingSource, AVERAGING_STREAM_BIT};
use crate::error::{Error, Result};
use crate::fbl::{dispersion, ApproximationMode, CombiningScheme, ErrorModel};

pub const CHUNK_SIZE: usize = 1 << 14;
pub const DEFAULT_SAMPLE_COUNT: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AveragingConfig {
    pub sample_count: usize,
    pub seed: u64,
    pub cache_enabled: bool,
}

impl Default for AveragingConfig {
    fn default() -> Self {
        Self {
            sample_count: DEFAULT_SAMPLE_COUNT,
            seed: 1,
            cache_enabled: true,
        }
    }
}

/// Everything that determines an estimate bit for bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateKey {
    pub scheme: CombiningScheme,
    pub mode: ApproximationMode,
    pub w: u32,
    pub k: u32,
    pub block_len: u32,
    pub gamma0: f64,
    pub samples: usize,
    pub seed: u64,
}

impl EstimateKey {
    /// `scheme|mode|w|k|N|gamma0|samples|seed`, with `gamma0` in shortest
    /// round-trip decimal form.
    pub fn cache_key(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}|{}|{}",
            self.scheme, self.mode, self.w, self.k, self.block_len, self.gamma0, self.samples, self.seed
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimate {
    pub epsilon: f64,
    pub stderr: f64,
}

impl ErrorEstimate {
    /// `eps_0 = 1`: nothing received, nothing decoded.
    pub const CERTAIN_FAILURE: Self = Self {
        epsilon: 1.0,
        stderr: 0.0,
    };
}

/// Joint estimate of `eps_1 ..= eps_wmax` from one set of samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorProfile {
    /// `estimates[w - 1]` is `eps_w`.
    pub estimates: Vec<ErrorEstimate>,
    /// Covariance of the estimators (not of the samples), indexed like
    /// `estimates`.
    pub covariance: Vec<Vec<f64>>,
}

impl ErrorProfile {
    pub fn epsilon(&self, w: u32) -> f64 {
        if w == 0 {
            1.0
        } else {
            self.estimates[w as usize - 1].epsilon
        }
    }

    pub fn max_w(&self) -> u32 {
        self.estimates.len() as u32
    }
}

fn validate(w: u32, gamma0: f64, samples: usize) -> Result<()> {
    if w < 1 {
        return Err(Error::Domain("transmission count must be >= 1".into()));
    }
    if !gamma0.is_finite() || gamma0 <= 0.0 {
        return Err(Error::Domain(format!("mean SNR must be finite and > 0, got {gamma0}")));
    }
    if samples == 0 {
        return Err(Error::Domain("sample count must be positive".into()));
    }
    Ok(())
}

fn stream_id(chunk: usize, branch: u32) -> u64 {
    AVERAGING_STREAM_BIT | (u64::from(branch) << 40) | chunk as u64
}

/// Per-chunk sums: `sum[w]` and `cross[a][b]` over samples.
struct ChunkSums {
    sum: Vec<f64>,
    cross: Vec<Vec<f64>>,
}

fn chunk_sums(model: &ErrorModel, w_max: u32, gamma0: f64, seed: u64, chunk: usize, len: usize, with_cross: bool) -> ChunkSums {
    let wm = w_max as usize;
    let mut snr_sum = vec![0.0; len];
    let mut cap_sum = vec![0.0; len];
    let mut disp_sum = vec![0.0; len];
    let mut sum = vec![0.0; wm];
    let mut cross = if with_cross { vec![vec![0.0; wm]; wm] } else { Vec::new() };
    // eps for every w of the current sample block, sample-major
    let mut values = if with_cross { vec![0.0; len * wm] } else { Vec::new() };

    for b in 0..w_max {
        // gamma0 > 0 was validated by the caller
        let mut src = FadingSource::new(gamma0, seed, stream_id(chunk, b)).expect("validated mean SNR");
        let count = b + 1;
        let mut s = 0.0;
        for i in 0..len {
            let g = src.sample_snr();
            let eps = match model.scheme() {
                CombiningScheme::ChaseCombining => {
                    snr_sum[i] += g;
                    model.cc(snr_sum[i])
                }
                CombiningScheme::IncrementalRedundancy => {
                    cap_sum[i] += g.ln_1p() * std::f64::consts::LOG2_E;
                    disp_sum[i] += dispersion(g);
                    model.ir(cap_sum[i], disp_sum[i], count)
                }
            };
            s += eps;
            if with_cross {
                values[i * wm + b as usize] = eps;
            }
        }
        sum[b as usize] = s;
    }

    if with_cross {
        for row in values.chunks_exact(wm) {
            for a in 0..wm {
                for b in a..wm {
                    cross[a][b] += row[a] * row[b];
                }
            }
        }
        for a in 0..wm {
            for b in 0..a {
                cross[a][b] = cross[b][a];
            }
        }
    }
    ChunkSums { sum, cross }
}

fn chunk_lengths(samples: usize) -> Vec<usize> {
    let full = samples / CHUNK_SIZE;
    let mut lens = vec![CHUNK_SIZE; full];
    if !samples.is_multiple_of(CHUNK_SIZE) {
        lens.push(samples % CHUNK_SIZE);
    }
    lens
}

/// Estimates `eps_1 ..= eps_wmax` jointly, with the estimator covariance.
#[allow(clippy::too_many_arguments)]
pub fn averaged_error_profile(
    w_max: u32,
    k: u32,
    block_len: u32,
    gamma0: f64,
    scheme: CombiningScheme,
    mode: ApproximationMode,
    sample_count: usize,
    seed: u64,
) -> Result<ErrorProfile> {
    validate(w_max, gamma0, sample_count)?;
    let model = ErrorModel::new(k, block_len, scheme, mode);
    let partials: Vec<ChunkSums> = chunk_lengths(sample_count)
        .into_par_iter()
        .enumerate()
        .map(|(c, len)| chunk_sums(&model, w_max, gamma0, seed, c, len, true))
        .collect();

    let wm = w_max as usize;
    let mut sum = vec![0.0; wm];
    let mut cross = vec![vec![0.0; wm]; wm];
    for p in &partials {
        for a in 0..wm {
            sum[a] += p.sum[a];
            for b in 0..wm {
                cross[a][b] += p.cross[a][b];
            }
        }
    }
    let n = sample_count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let denom = if sample_count > 1 { n * (n - 1.0) } else { f64::INFINITY };
    let covariance: Vec<Vec<f64>> = (0..wm)
        .map(|a| (0..wm).map(|b| (cross[a][b] - n * mean[a] * mean[b]) / denom).collect())
        .collect();
    let estimates = (0..wm)
        .map(|a| ErrorEstimate {
            epsilon: mean[a],
            stderr: covariance[a][a].max(0.0).sqrt(),
        })
        .collect();
    Ok(ErrorProfile { estimates, covariance })
}

/// Fading-averaged error probability after `w` transmissions.
pub fn averaged_error(
    w: u32,
    k: u32,
    block_len: u32,
    gamma0: f64,
    scheme: CombiningScheme,
    mode: ApproximationMode,
    avg: &AveragingConfig,
) -> Result<ErrorEstimate> {
    validate(w, gamma0, avg.sample_count)?;
    let model = ErrorModel::new(k, block_len, scheme, mode);
    let lens = chunk_lengths(avg.sample_count);
    let partials: Vec<(f64, f64)> = lens
        .into_par_iter()
        .enumerate()
        .map(|(c, len)| {
            let sums = chunk_sums(&model, w, gamma0, avg.seed, c, len, true);
            let last = w as usize - 1;
            (sums.sum[last], sums.cross[last][last])
        })
        .collect();
    let (mut s, mut sq) = (0.0, 0.0);
    for (a, b) in partials {
        s += a;
        sq += b;
    }
    let n = avg.sample_count as f64;
    let mean = s / n;
    let var = if avg.sample_count > 1 {
        ((sq - n * mean * mean) / (n * (n - 1.0))).max(0.0)
    } else {
        0.0
    };
    Ok(ErrorEstimate {
        epsilon: mean,
        stderr: var.sqrt(),
    })
}

/// Concurrent `eps` cache persisted as one JSON object keyed by
/// [`EstimateKey::cache_key`].
#[derive(Debug, Default)]
pub struct EpsilonCache {
    entries: RwLock<BTreeMap<String, ErrorEstimate>>,
    path: Option<PathBuf>,
}

impl EpsilonCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens a cache file; a missing file is an empty cache.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let entries = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Cache(format!("{}: {e}", path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(Error::Cache(format!("{}: {e}", path.display()))),
        };
        Ok(Self {
            entries: RwLock::new(entries),
            path: Some(path),
        })
    }

    pub fn get(&self, key: &str) -> Option<ErrorEstimate> {
        self.entries.read().expect("cache lock poisoned").get(key).copied()
    }

    pub fn insert(&self, key: String, value: ErrorEstimate) {
        self.entries.write().expect("cache lock poisoned").insert(key, value);
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the cache through a temp file in the target directory and an
    /// atomic rename. No-op for in-memory caches.
    pub fn save(&self) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let text = {
            let entries = self.entries.read().expect("cache lock poisoned");
            serde_json::to_string_pretty(&*entries).map_err(|e| Error::Cache(e.to_string()))?
        };
        let io = |e: std::io::Error| Error::Cache(format!("{}: {e}", path.display()));
        let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io)?;
        tmp.write_all(text.as_bytes()).map_err(io)?;
        tmp.write_all(b"\n").map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }
}

/// Averaging front-end with an optional shared cache.
#[derive(Debug, Clone)]
pub struct Averager {
    config: AveragingConfig,
    cache: Option<Arc<EpsilonCache>>,
}

impl Averager {
    pub fn new(config: AveragingConfig) -> Self {
        let cache = config.cache_enabled.then(|| Arc::new(EpsilonCache::in_memory()));
        Self { config, cache }
    }

    pub fn with_cache(config: AveragingConfig, cache: Arc<EpsilonCache>) -> Self {
        let cache = config.cache_enabled.then_some(cache);
        Self { config, cache }
    }

    pub fn config(&self) -> &AveragingConfig {
        &self.config
    }

    pub fn cache(&self) -> Option<&Arc<EpsilonCache>> {
        self.cache.as_ref()
    }

    fn key(&self, w: u32, k: u32, block_len: u32, gamma0: f64, scheme: CombiningScheme, mode: ApproximationMode) -> EstimateKey {
        EstimateKey {
            scheme,
            mode,
            w,
            k,
            block_len,
            gamma0,
            samples: self.config.sample_count,
            seed: self.config.seed,
        }
    }

    /// `eps_w` for `w >= 1`.
    pub fn estimate(
        &self,
        w: u32,
        k: u32,
        block_len: u32,
        gamma0: f64,
        scheme: CombiningScheme,
        mode: ApproximationMode,
    ) -> Result<ErrorEstimate> {
        let key = self.key(w, k, block_len, gamma0, scheme, mode).cache_key();
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(hit);
        }
        let value = averaged_error(w, k, block_len, gamma0, scheme, mode, &self.config)?;
        if let Some(cache) = &self.cache {
            cache.insert(key, value);
        }
        Ok(value)
    }

    /// Like [`Averager::estimate`] but also accepts `w = 0`, returning the
    /// certain-failure convention.
    pub fn epsilon(
        &self,
        w: u32,
        k: u32,
        block_len: u32,
        gamma0: f64,
        scheme: CombiningScheme,
        mode: ApproximationMode,
    ) -> Result<ErrorEstimate> {
        if w == 0 {
            return Ok(ErrorEstimate::CERTAIN_FAILURE);
        }
        self.estimate(w, k, block_len, gamma0, scheme, mode)
    }

    /// `eps_1 ..= eps_wmax`, served from the cache when every entry is
    /// present and computed in a single joint pass otherwise.
    pub fn estimates_upto(
        &self,
        w_max: u32,
        k: u32,
        block_len: u32,
        gamma0: f64,
        scheme: CombiningScheme,
        mode: ApproximationMode,
    ) -> Result<Vec<ErrorEstimate>> {
        validate(w_max, gamma0, self.config.sample_count)?;
        if let Some(cache) = &self.cache {
            let hits: Option<Vec<ErrorEstimate>> = (1..=w_max)
                .map(|w| cache.get(&self.key(w, k, block_len, gamma0, scheme, mode).cache_key()))
                .collect();
            if let Some(hits) = hits {
                return Ok(hits);
            }
        }
        Ok(self.profile(w_max, k, block_len, gamma0, scheme, mode)?.estimates)
    }

    /// Joint estimate with covariance. Always recomputed; refreshes the cache.
    pub fn profile(
        &self,
        w_max: u32,
        k: u32,
        block_len: u32,
        gamma0: f64,
        scheme: CombiningScheme,
        mode: ApproximationMode,
    ) -> Result<ErrorProfile> {
        let profile = averaged_error_profile(w_max, k, block_len, gamma0, scheme, mode, self.config.sample_count, self.config.seed)?;
        if let Some(cache) = &self.cache {
            for (i, est) in profile.estimates.iter().enumerate() {
                cache.insert(self.key(i as u32 + 1, k, block_len, gamma0, scheme, mode).cache_key(), *est);
            }
        }
        Ok(profile)
    }
}

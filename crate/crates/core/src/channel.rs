//! Rayleigh block fading.
//!
//! Every transmission sees an independent fading coefficient
//! `h ~ CN(0, 1)`, so the received SNR `gamma0 * |h|^2` is exponential with
//! mean `gamma0`.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64(seed)`; `stream_id` selects one of the 2^64 independent
//! ChaCha streams under that key. Parallel work is partitioned by stream id,
//! never by sharing a source.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::error::{Error, Result};

/// Stream ids with this bit set are reserved for fading-average estimation;
/// simulator replicas use ids below it.
pub const AVERAGING_STREAM_BIT: u64 = 1 << 63;

#[derive(Debug, Clone)]
pub struct FadingSource {
    gamma0: f64,
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl FadingSource {
    pub fn new(gamma0: f64, seed: u64, stream_id: u64) -> Result<Self> {
        if !gamma0.is_finite() || gamma0 <= 0.0 {
            return Err(Error::Domain(format!("mean SNR must be finite and > 0, got {gamma0}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Ok(Self {
            gamma0,
            seed,
            stream_id,
            rng,
        })
    }

    pub fn gamma0(&self) -> f64 {
        self.gamma0
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Draws the linear SNR of one transmission.
    #[inline]
    pub fn sample_snr(&mut self) -> f64 {
        let unit: f64 = self.rng.sample(Exp1);
        self.gamma0 * unit
    }

    /// Uniform variate on `[0, 1)` from the same stream, used to realize
    /// decoding outcomes.
    #[inline]
    pub fn sample_uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

pub fn snr_from_db(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn snr_to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn db_conversion() {
        assert_eq!(snr_from_db(0.0), 1.0);
        assert_eq!(snr_from_db(10.0), 10.0);
        assert!((snr_from_db(3.0) - 1.995262314968879601352455396739535557986).abs() < 1e-15);
        for db in [-20.0, -3.3, 0.1, 7.0, 25.5] {
            let back = snr_to_db(snr_from_db(db));
            assert!((back - db).abs() <= 1e-12 * db.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_bad_mean() {
        assert!(FadingSource::new(0.0, 1, 0).is_err());
        assert!(FadingSource::new(-1.0, 1, 0).is_err());
        assert!(FadingSource::new(f64::NAN, 1, 0).is_err());
    }

    #[test]
    fn deterministic_per_stream() {
        let mut a = FadingSource::new(10.0, 42, 3).unwrap();
        let mut b = FadingSource::new(10.0, 42, 3).unwrap();
        let mut c = FadingSource::new(10.0, 42, 4).unwrap();
        let xs: Vec<f64> = (0..100).map(|_| a.sample_snr()).collect();
        let ys: Vec<f64> = (0..100).map(|_| b.sample_snr()).collect();
        let zs: Vec<f64> = (0..100).map(|_| c.sample_snr()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }

    #[test]
    fn mean_and_median() {
        let mut src = FadingSource::new(10.0, 1, 0).unwrap();
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut below = 0usize;
        let median = 10.0 * std::f64::consts::LN_2;
        for _ in 0..n {
            let g = src.sample_snr();
            sum += g;
            if g < median {
                below += 1;
            }
        }
        let mean = sum / n as f64;
        assert!((mean - 10.0).abs() < 0.04, "mean {mean}");
        let frac = below as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.002, "median fraction {frac}");
    }

    #[test]
    fn lag_one_autocorrelation() {
        let mut src = FadingSource::new(3.0, 9, 1).unwrap();
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| src.sample_snr()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let cov = xs.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / (n - 1) as f64;
        let rho = cov / var;
        assert!(rho.abs() <= 4.0 / (n as f64).sqrt(), "rho {rho}");
    }
}

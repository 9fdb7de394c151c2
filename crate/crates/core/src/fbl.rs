//! Finite-blocklength normal approximation for combined re-transmissions.
//!
//! The block error probability of a length-`N` code carrying `k` bits is
//! approximated by
//!
//! ```text
//! eps ~= Q( (N * C - penalty) / sqrt(N * V) )
//! ```
//!
//! where `C` is the accumulated capacity in bits per symbol and `V` the
//! accumulated channel dispersion. Chase combining sums branch SNRs before
//! taking capacity and dispersion; incremental redundancy sums per-branch
//! capacities and dispersions. Two variants of the rate penalty are exposed
//! through [`ApproximationMode`].

use std::f64::consts::{FRAC_1_SQRT_2, LOG2_E};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `log2(e)^2`, the supremum of the channel dispersion.
pub const DISPERSION_LIMIT: f64 = LOG2_E * LOG2_E;

/// Information length and mini-slot geometry of a packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSpec {
    /// Information bits per packet.
    pub k: u32,
    /// Symbols per mini-slot; a timeslot holds `2n` symbols.
    pub n: u32,
}

impl CodeSpec {
    pub fn new(k: u32, n: u32) -> Result<Self> {
        if k == 0 || n == 0 {
            return Err(Error::Domain(format!("code spec needs k >= 1 and n >= 1, got k={k}, n={n}")));
        }
        Ok(Self { k, n })
    }

    pub fn timeslot_symbols(&self) -> u32 {
        2 * self.n
    }

    /// Block length of one transmission in the feedback-based schemes.
    pub fn harq_block_length(&self) -> u32 {
        self.n
    }

    /// Block length of one transmission in open-loop fixed transmission.
    pub fn fixed_block_length(&self) -> u32 {
        2 * self.n
    }

    pub fn harq_rate(&self) -> f64 {
        f64::from(self.k) / f64::from(self.n)
    }

    pub fn fixed_rate(&self) -> f64 {
        f64::from(self.k) / f64::from(2 * self.n)
    }
}

/// Linear per-branch SNRs of the transmissions received so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrList(Vec<f64>);

impl SnrList {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("SNR list must not be empty".into()));
        }
        if let Some(bad) = values.iter().find(|g| !g.is_finite() || **g < 0.0) {
            return Err(Error::Domain(format!("branch SNR must be finite and >= 0, got {bad}")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Rate-penalty variant of the normal approximation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApproximationMode {
    /// Penalty `k * log2(N)` (CC) and `k * log2(mN)` (IR).
    Verbatim,
    /// Penalty `k - log2(N) / 2` (CC) and `k - log2(mN) / 2` (IR).
    #[default]
    StandardNormal,
}

impl ApproximationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Verbatim => "verbatim",
            Self::StandardNormal => "normal",
        }
    }

    /// Rate penalty subtracted from `N * C` for an effective length of
    /// `effective_len` symbols.
    #[inline]
    pub fn penalty(&self, k: f64, effective_len: f64) -> f64 {
        match self {
            Self::Verbatim => k * effective_len.log2(),
            Self::StandardNormal => k - 0.5 * effective_len.log2(),
        }
    }
}

impl fmt::Display for ApproximationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ApproximationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verbatim" => Ok(Self::Verbatim),
            "normal" => Ok(Self::StandardNormal),
            other => Err(Error::Domain(format!("unknown approximation mode '{other}' (expected verbatim|normal)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombiningScheme {
    #[default]
    ChaseCombining,
    IncrementalRedundancy,
}

impl CombiningScheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::ChaseCombining => "cc",
            Self::IncrementalRedundancy => "ir",
        }
    }
}

impl fmt::Display for CombiningScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CombiningScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cc" => Ok(Self::ChaseCombining),
            "ir" => Ok(Self::IncrementalRedundancy),
            other => Err(Error::Domain(format!("unknown combining scheme '{other}' (expected cc|ir)"))),
        }
    }
}

/// Upper tail of the standard normal distribution.
///
/// Evaluated through `erfc`, so the result keeps full relative precision deep
/// into the upper tail instead of cancelling in `1 - Phi(x)`.
#[inline]
pub fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// Channel dispersion `V(gamma)` of the complex AWGN channel, in bits^2.
pub fn channel_dispersion(gamma: f64) -> Result<f64> {
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::Domain(format!("dispersion needs a finite SNR >= 0, got {gamma}")));
    }
    Ok(dispersion(gamma))
}

#[inline]
pub(crate) fn dispersion(gamma: f64) -> f64 {
    let g1 = gamma + 1.0;
    // gamma (gamma + 2) / (gamma + 1)^2 == 1 - 1 / (gamma + 1)^2
    (1.0 - 1.0 / (g1 * g1)) * DISPERSION_LIMIT
}

fn check_block_length(block_len: u32) -> Result<()> {
    if block_len < 1 {
        return Err(Error::Domain("block length must be >= 1".into()));
    }
    Ok(())
}

/// Conditional error probability after Chase combining of `snrs`.
pub fn conditional_error_cc(spec: &CodeSpec, block_len: u32, snrs: &SnrList, mode: ApproximationMode) -> Result<f64> {
    check_block_length(block_len)?;
    let model = ErrorModel::new(spec.k, block_len, CombiningScheme::ChaseCombining, mode);
    Ok(model.cc(snrs.total()))
}

/// Conditional error probability after incremental-redundancy decoding of
/// `snrs.len()` blocks.
pub fn conditional_error_ir(spec: &CodeSpec, block_len: u32, snrs: &SnrList, mode: ApproximationMode) -> Result<f64> {
    check_block_length(block_len)?;
    let model = ErrorModel::new(spec.k, block_len, CombiningScheme::IncrementalRedundancy, mode);
    let mut acc = Accumulator::default();
    for &g in snrs.as_slice() {
        acc.push(g);
    }
    Ok(model.evaluate(&acc))
}

/// Dispatches on the combining scheme.
pub fn conditional_error(
    spec: &CodeSpec,
    block_len: u32,
    snrs: &SnrList,
    scheme: CombiningScheme,
    mode: ApproximationMode,
) -> Result<f64> {
    match scheme {
        CombiningScheme::ChaseCombining => conditional_error_cc(spec, block_len, snrs, mode),
        CombiningScheme::IncrementalRedundancy => conditional_error_ir(spec, block_len, snrs, mode),
    }
}

/// Running sufficient statistics of the received branches.
///
/// Holds what both combining rules need, so a simulator can feed branches one
/// at a time and query the conditional error after each.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    pub count: u32,
    /// Sum of branch SNRs (Chase combining).
    pub snr_sum: f64,
    /// Sum of per-branch capacities in bits (incremental redundancy).
    pub capacity_sum: f64,
    /// Sum of per-branch dispersions (incremental redundancy).
    pub dispersion_sum: f64,
}

impl Accumulator {
    #[inline]
    pub fn push(&mut self, gamma: f64) {
        self.count += 1;
        self.snr_sum += gamma;
        self.capacity_sum += gamma.ln_1p() * LOG2_E;
        self.dispersion_sum += dispersion(gamma);
    }
}

/// Pre-bound `(k, N, scheme, mode)` evaluator used on hot paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorModel {
    k: f64,
    block_len: f64,
    scheme: CombiningScheme,
    mode: ApproximationMode,
}

impl ErrorModel {
    pub fn new(k: u32, block_len: u32, scheme: CombiningScheme, mode: ApproximationMode) -> Self {
        Self {
            k: f64::from(k),
            block_len: f64::from(block_len),
            scheme,
            mode,
        }
    }

    pub fn scheme(&self) -> CombiningScheme {
        self.scheme
    }

    /// Chase combining on a total SNR.
    #[inline]
    pub fn cc(&self, snr_sum: f64) -> f64 {
        if snr_sum <= 0.0 {
            return 1.0;
        }
        let n = self.block_len;
        let num = n * snr_sum.ln_1p() * LOG2_E - self.mode.penalty(self.k, n);
        let den = (n * dispersion(snr_sum)).sqrt();
        q_function(num / den)
    }

    /// Incremental redundancy over `count` blocks.
    #[inline]
    pub fn ir(&self, capacity_sum: f64, dispersion_sum: f64, count: u32) -> f64 {
        if count == 0 || dispersion_sum <= 0.0 {
            return 1.0;
        }
        let n = self.block_len;
        let num = n * capacity_sum - self.mode.penalty(self.k, f64::from(count) * n);
        let den = (n * dispersion_sum).sqrt();
        q_function(num / den)
    }

    #[inline]
    pub fn evaluate(&self, acc: &Accumulator) -> f64 {
        if acc.count == 0 {
            return 1.0;
        }
        match self.scheme {
            CombiningScheme::ChaseCombining => self.cc(acc.snr_sum),
            CombiningScheme::IncrementalRedundancy => self.ir(acc.capacity_sum, acc.dispersion_sum, acc.count),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec() -> CodeSpec {
        CodeSpec::new(32, 32).unwrap()
    }

    fn snrs(v: &[f64]) -> SnrList {
        SnrList::new(v.to_vec()).unwrap()
    }

    /// Adaptive Simpson on the defining integral of Q.
    fn q_by_quadrature(x: f64) -> f64 {
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let f = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let (a, b) = (x, x + 40.0);
        let (fa, fb) = (f(a), f(b));
        let fm = f(0.5 * (a + b));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        simpson(&f, a, b, fa, fm, fb, whole, 1e-15, 50)
    }

    #[test]
    fn q_at_zero_is_half() {
        assert_eq!(q_function(0.0), 0.5);
    }

    #[test]
    fn q_reflection() {
        for x in [0.5, 1.0, 2.0] {
            assert!((q_function(x) - (1.0 - q_function(-x))).abs() < 1e-15);
        }
    }

    #[test]
    fn q_matches_quadrature_at_decile() {
        let oracle = q_by_quadrature(1.2815515655);
        assert!((oracle - 0.1).abs() < 1e-9, "oracle {oracle}");
        assert!((q_function(1.2815515655) - 0.1).abs() < 1e-9);
        assert!((q_function(1.2815515655) - oracle).abs() < 1e-12);
    }

    #[test]
    fn q_high_precision_points() {
        let cases = [
            (-6.0, 0.99999999901341235496),
            (-2.01, 0.97778440557056852524),
            (-0.5, 0.69146246127401310364),
            (0.0, 0.5),
            (0.5, 0.30853753872598689636),
            (1.0, 0.15865525393145705141),
            (2.01, 0.022215594429431474762),
            (4.0, 0.000031671241833119921254),
            (6.0, 9.865876450376981407e-10),
            (8.0, 6.2209605742717841235e-16),
            (12.0, 1.7764821120776789977e-33),
            (20.0, 2.7536241186062336951e-89),
        ];
        for (x, want) in cases {
            let rel = (q_function(x) - want).abs() / want;
            assert!(rel <= 1e-13, "x={x} rel={rel}");
        }
    }

    #[test]
    fn q_agrees_with_statrs() {
        for i in -800..=800 {
            let x = f64::from(i) / 100.0;
            let reference = 0.5 * statrs::function::erf::erfc(x / std::f64::consts::SQRT_2);
            let rel = (q_function(x) - reference).abs() / reference;
            assert!(rel <= 1e-9, "x={x} rel={rel}");
        }
    }

    #[test]
    fn q_decreasing_on_grid() {
        let mut prev = q_function(-8.0);
        for i in 1..=1600 {
            let x = -8.0 + f64::from(i) * 0.01;
            let q = q_function(x);
            if x > -5.0 {
                assert!(q < prev, "not decreasing at {x}");
            } else {
                assert!(q <= prev, "increasing at {x}");
            }
            prev = q;
        }
    }

    #[test]
    fn dispersion_values() {
        assert_eq!(channel_dispersion(0.0).unwrap(), 0.0);
        assert!((channel_dispersion(1e8).unwrap() - 2.081368981005607797869581603734991425064).abs() < 1e-6);
        assert!((channel_dispersion(1.0).unwrap() - 1.561026735754205848402186202801243568798).abs() < 1e-15);
        assert!(matches!(channel_dispersion(-1e-3), Err(Error::Domain(_))));
        assert!(channel_dispersion(f64::NAN).is_err());
    }

    #[test]
    fn dispersion_bounded_and_monotone() {
        let mut prev = 0.0;
        for i in 0..1000 {
            let g = 10f64.powf(-4.0 + f64::from(i) * 0.01);
            let v = channel_dispersion(g).unwrap();
            assert!(v >= prev && v <= DISPERSION_LIMIT);
            prev = v;
        }
    }

    #[test]
    fn cc_regression_point() {
        let eps = conditional_error_cc(&spec(), 32, &snrs(&[10.0]), ApproximationMode::StandardNormal).unwrap();
        let expected = 8.326494003913719152719005404728195630436e-24;
        assert!((eps - expected).abs() / expected < 1e-11, "{eps}");
        let verbatim = conditional_error_cc(&spec(), 32, &snrs(&[10.0]), ApproximationMode::Verbatim).unwrap();
        assert!((verbatim - 0.9999999993432456259534358800475069330752).abs() < 1e-15);
    }

    #[test]
    fn cc_at_penalty_threshold_is_half() {
        // 32 log2(1 + g) = 32 - log2(32)/2  =>  g = 2^(29.5/32) - 1
        let g = 2f64.powf(29.5 / 32.0) - 1.0;
        let eps = conditional_error_cc(&spec(), 32, &snrs(&[g]), ApproximationMode::StandardNormal).unwrap();
        assert!((eps - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cc_limits() {
        let s = spec();
        let huge = conditional_error_cc(&s, 32, &snrs(&[1e12]), ApproximationMode::StandardNormal).unwrap();
        assert_eq!(huge, 0.0);
        let zero = conditional_error_cc(&s, 32, &snrs(&[0.0, 0.0]), ApproximationMode::StandardNormal).unwrap();
        assert_eq!(zero, 1.0);
    }

    #[test]
    fn ir_regression_point_and_gain_over_cc() {
        let s = spec();
        let list = snrs(&[4.0, 10.0]);
        let ir = conditional_error_ir(&s, 32, &list, ApproximationMode::StandardNormal).unwrap();
        let expected = 6.433828394454184795850850387919914865984e-43;
        assert!((ir - expected).abs() / expected < 1e-10, "{ir}");
        let cc = conditional_error_cc(&s, 32, &list, ApproximationMode::StandardNormal).unwrap();
        assert!((cc - 4.449739510940221898244098009734281547034e-32).abs() / cc < 1e-10);
        assert!(ir <= cc);
    }

    #[test]
    fn ir_single_branch_matches_cc() {
        let s = spec();
        for g in [0.3, 1.0, 3.0, 10.0, 50.0] {
            for mode in [ApproximationMode::StandardNormal, ApproximationMode::Verbatim] {
                let a = conditional_error_ir(&s, 32, &snrs(&[g]), mode).unwrap();
                let b = conditional_error_cc(&s, 32, &snrs(&[g]), mode).unwrap();
                assert!((a - b).abs() <= 1e-15 + 1e-12 * b, "g={g}");
            }
        }
    }

    #[test]
    fn ir_all_zero_fails() {
        let eps = conditional_error_ir(&spec(), 32, &snrs(&[0.0, 0.0, 0.0]), ApproximationMode::StandardNormal).unwrap();
        assert_eq!(eps, 1.0);
    }

    #[test]
    fn invalid_inputs() {
        assert!(SnrList::new(vec![]).is_err());
        assert!(SnrList::new(vec![1.0, -0.5]).is_err());
        assert!(SnrList::new(vec![f64::INFINITY]).is_err());
        assert!(conditional_error_cc(&spec(), 0, &snrs(&[1.0]), ApproximationMode::StandardNormal).is_err());
        assert!(CodeSpec::new(0, 32).is_err());
    }

    #[test]
    fn mode_and_scheme_parse() {
        assert_eq!("normal".parse::<ApproximationMode>().unwrap(), ApproximationMode::StandardNormal);
        assert_eq!("verbatim".parse::<ApproximationMode>().unwrap(), ApproximationMode::Verbatim);
        assert_eq!("ir".parse::<CombiningScheme>().unwrap(), CombiningScheme::IncrementalRedundancy);
        assert!("xx".parse::<CombiningScheme>().is_err());
    }

    // Prefix monotonicity is not guaranteed by the dispersion term; count
    // violations instead of asserting none.
    #[test]
    fn prefix_monotonicity_violations_are_rare() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut violations = 0u32;
        let mut cases = 0u32;
        for _ in 0..20_000 {
            let k = rng.random_range(8..=32);
            let s = CodeSpec::new(k, 32).unwrap();
            let len = rng.random_range(2..=6);
            let list: Vec<f64> = (0..len).map(|_| -10.0 * rng.random::<f64>().ln() * rng.random::<f64>()).collect();
            for scheme in [CombiningScheme::ChaseCombining, CombiningScheme::IncrementalRedundancy] {
                for cut in 1..len {
                    let a = conditional_error(&s, 32, &snrs(&list[..cut]), scheme, ApproximationMode::StandardNormal).unwrap();
                    let b = conditional_error(&s, 32, &snrs(&list[..cut + 1]), scheme, ApproximationMode::StandardNormal).unwrap();
                    cases += 1;
                    if b > a + 1e-12 {
                        violations += 1;
                        assert_eq!(scheme, CombiningScheme::IncrementalRedundancy, "CC must be prefix-monotone");
                    }
                }
            }
        }
        assert!(f64::from(violations) < 1e-3 * f64::from(cases), "{violations}/{cases}");
    }

    proptest! {
        #[test]
        fn cc_nonincreasing_in_any_branch(
            list in prop::collection::vec(0.0f64..100.0, 1..6),
            idx in 0usize..6,
            bump in 0.0f64..50.0,
            verbatim in any::<bool>(),
        ) {
            let mode = if verbatim { ApproximationMode::Verbatim } else { ApproximationMode::StandardNormal };
            let s = spec();
            let before = conditional_error_cc(&s, 32, &snrs(&list), mode).unwrap();
            let mut raised = list.clone();
            let i = idx % raised.len();
            raised[i] += bump;
            let after = conditional_error_cc(&s, 32, &snrs(&raised), mode).unwrap();
            prop_assert!(after <= before + 1e-15);
        }

        #[test]
        fn q_reflection_holds(x in -8.0f64..8.0) {
            prop_assert!((q_function(x) + q_function(-x) - 1.0).abs() <= 1e-12);
        }
    }
}

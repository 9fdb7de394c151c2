//! Packet-level Monte Carlo of fixed transmission, HARQ and D-HARQ.
//!
//! Each packet draws one uniform `U` and then one fading SNR per allowed
//! transmission. Decoding succeeds at the first attempt `w` with
//! `U > min(eps_1, ..., eps_w)`, where `eps_i` is the conditional error after
//! `i` combined receptions. A single `U` per packet makes failures nested
//! (failing at `w` implies failing at every earlier attempt).
//!
//! All `L + credit` SNRs are drawn up front whether or not they are used, so
//! stream consumption is the same with and without CDF recording.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::FadingSource;
use crate::error::{Error, Result};
use crate::fbl::{Accumulator, ApproximationMode, CodeSpec, CombiningScheme, ErrorModel};
use crate::markov::ProtocolParams;

pub const DEFAULT_WARMUP: usize = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    FixedTx,
    Harq,
    DHarq,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::FixedTx, Protocol::Harq, Protocol::DHarq];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::FixedTx => "fixed",
            Self::Harq => "harq",
            Self::DHarq => "dharq",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" | "fixed-tx" => Ok(Self::FixedTx),
            "harq" => Ok(Self::Harq),
            "dharq" | "d-harq" => Ok(Self::DHarq),
            other => Err(Error::Config(format!("unknown protocol '{other}' (expected fixed|harq|dharq)"))),
        }
    }
}

/// Which conditional error a packet contributes to the CDF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdfPoint {
    /// After all `L + credit` allowed transmissions.
    #[default]
    Cap,
    /// After the transmission at which the packet terminated.
    Termination,
}

impl FromStr for CdfPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cap" => Ok(Self::Cap),
            "termination" => Ok(Self::Termination),
            other => Err(Error::Config(format!("unknown CDF point '{other}' (expected cap|termination)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub protocol: Protocol,
    pub params: ProtocolParams,
    pub spec: CodeSpec,
    pub gamma0: f64,
    pub scheme: CombiningScheme,
    pub mode: ApproximationMode,
    /// Packets counted in the statistics, after warmup.
    pub packet_count: usize,
    pub seed: u64,
    pub warmup_packets: usize,
}

impl SimConfig {
    pub fn new(protocol: Protocol, params: ProtocolParams, spec: CodeSpec, gamma0: f64) -> Self {
        Self {
            protocol,
            params,
            spec,
            gamma0,
            scheme: CombiningScheme::ChaseCombining,
            mode: ApproximationMode::StandardNormal,
            packet_count: 100_000,
            seed: 1,
            warmup_packets: DEFAULT_WARMUP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gamma0.is_finite() || self.gamma0 <= 0.0 {
            return Err(Error::Config(format!("mean SNR must be finite and > 0, got {}", self.gamma0)));
        }
        if self.packet_count == 0 {
            return Err(Error::Config("packet_count must be positive".into()));
        }
        ProtocolParams::new(self.params.l, self.params.m).map_err(|e| Error::Config(e.to_string()))?;
        CodeSpec::new(self.spec.k, self.spec.n).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Credit cap actually in effect for the protocol.
    fn credit_cap(&self) -> u32 {
        match self.protocol {
            Protocol::DHarq => self.params.m,
            Protocol::Harq | Protocol::FixedTx => 0,
        }
    }

    fn block_len(&self) -> u32 {
        match self.protocol {
            Protocol::FixedTx => self.spec.fixed_block_length(),
            Protocol::Harq | Protocol::DHarq => self.spec.harq_block_length(),
        }
    }

    fn model(&self) -> ErrorModel {
        let scheme = match self.protocol {
            // L copies of the same codeword
            Protocol::FixedTx => CombiningScheme::ChaseCombining,
            _ => self.scheme,
        };
        ErrorModel::new(self.spec.k, self.block_len(), scheme, self.mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PacketOutcome {
    /// Credit the packet started with; 0 after a drop.
    pub credit_on_entry: u32,
    /// True when the previous packet was dropped.
    pub after_error: bool,
    pub transmissions_used: u32,
    pub success: bool,
    /// Conditional error after all allowed transmissions.
    pub conditional_error_at_cap: f64,
    /// Coupled conditional error at the attempt the packet stopped.
    pub conditional_error_at_termination: f64,
    /// Attempts where the conditional error rose above an earlier one and was
    /// clamped by the running minimum.
    pub clamped_attempts: u32,
}

/// Sequential packet stream of one protocol instance.
#[derive(Debug, Clone)]
pub struct PacketStream {
    config: SimConfig,
    model: ErrorModel,
    fading: FadingSource,
    credit: u32,
    after_error: bool,
    snrs: Vec<f64>,
}

impl PacketStream {
    pub fn new(config: SimConfig, fading: FadingSource) -> Result<Self> {
        config.validate()?;
        let credit = config.credit_cap();
        Ok(Self {
            config,
            model: config.model(),
            fading,
            credit,
            after_error: false,
            snrs: Vec::with_capacity((config.params.l + config.params.m) as usize),
        })
    }

    /// Chain state of the next packet: credit index, or `m + 1` after a drop.
    pub fn state_index(&self) -> usize {
        if self.after_error {
            self.config.credit_cap() as usize + 1
        } else {
            self.credit as usize
        }
    }

    pub fn next_packet(&mut self) -> PacketOutcome {
        let l = self.config.params.l;
        let budget = l + self.credit;
        let u = self.fading.sample_uniform();
        self.snrs.clear();
        for _ in 0..budget {
            let g = self.fading.sample_snr();
            self.snrs.push(g);
        }

        let mut outcome = PacketOutcome {
            credit_on_entry: self.credit,
            after_error: self.after_error,
            transmissions_used: budget,
            success: false,
            conditional_error_at_cap: 1.0,
            conditional_error_at_termination: 1.0,
            clamped_attempts: 0,
        };

        let mut acc = Accumulator::default();
        if self.config.protocol == Protocol::FixedTx {
            for &g in &self.snrs {
                acc.push(g);
            }
            let eps = self.model.evaluate(&acc);
            outcome.success = u > eps;
            outcome.conditional_error_at_cap = eps;
            outcome.conditional_error_at_termination = eps;
            self.after_error = !outcome.success;
            return outcome;
        }

        let mut running_min = 1.0f64;
        let mut raw = 1.0;
        let mut decoded_at = None;
        for (i, &g) in self.snrs.iter().enumerate() {
            acc.push(g);
            if decoded_at.is_some() {
                continue;
            }
            raw = self.model.evaluate(&acc);
            if raw > running_min {
                outcome.clamped_attempts += 1;
            }
            running_min = running_min.min(raw);
            if u > running_min {
                decoded_at = Some(i as u32 + 1);
            }
        }
        outcome.conditional_error_at_cap = if decoded_at.is_some() { self.model.evaluate(&acc) } else { raw };
        outcome.conditional_error_at_termination = running_min;

        let cap = self.config.credit_cap();
        match decoded_at {
            Some(w) => {
                outcome.success = true;
                outcome.transmissions_used = w;
                self.credit = (budget - w).min(cap);
                self.after_error = false;
            }
            None => {
                self.credit = 0;
                self.after_error = true;
            }
        }
        debug_assert!(outcome.transmissions_used <= l + outcome.credit_on_entry);
        debug_assert!(self.credit <= cap);
        outcome
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    pub config: SimConfig,
    pub packets: usize,
    pub drops: usize,
    pub per_estimate: f64,
    pub per_stderr: f64,
    /// Delivered bits per transmitted symbol, counting actual transmissions.
    pub throughput_measured: f64,
    pub mean_transmissions: f64,
    /// Fraction of packets entering each state `[J=0, ..., J=m, J=e]`; for
    /// fixed transmission and HARQ the credit part is the single state `J=0`.
    pub state_occupancy: Vec<f64>,
    pub clamped_attempts: u64,
    /// Sorted conditional errors, when recorded.
    pub cdf_samples: Vec<f64>,
}

/// Raw counters, mergeable across replicas.
#[derive(Debug, Clone, PartialEq)]
struct Tally {
    packets: usize,
    drops: usize,
    successes: usize,
    transmissions: u64,
    occupancy: Vec<usize>,
    clamped: u64,
    cdf: Vec<f64>,
}

impl Tally {
    fn new(states: usize) -> Self {
        Self {
            packets: 0,
            drops: 0,
            successes: 0,
            transmissions: 0,
            occupancy: vec![0; states],
            clamped: 0,
            cdf: Vec::new(),
        }
    }

    fn merge(&mut self, other: Tally) {
        self.packets += other.packets;
        self.drops += other.drops;
        self.successes += other.successes;
        self.transmissions += other.transmissions;
        for (a, b) in self.occupancy.iter_mut().zip(other.occupancy) {
            *a += b;
        }
        self.clamped += other.clamped;
        self.cdf.extend(other.cdf);
    }

    fn into_result(mut self, config: SimConfig) -> SimResult {
        let n = self.packets as f64;
        let per = self.drops as f64 / n;
        self.cdf.sort_by(f64::total_cmp);
        SimResult {
            config,
            packets: self.packets,
            drops: self.drops,
            per_estimate: per,
            per_stderr: (per * (1.0 - per) / n).sqrt(),
            throughput_measured: f64::from(config.spec.k) * self.successes as f64
                / (2.0 * f64::from(config.spec.n) * self.transmissions as f64),
            mean_transmissions: self.transmissions as f64 / n,
            state_occupancy: self.occupancy.iter().map(|c| *c as f64 / n).collect(),
            clamped_attempts: self.clamped,
            cdf_samples: self.cdf,
        }
    }
}

fn simulate(config: &SimConfig, fading: FadingSource, packets: usize, record: Option<CdfPoint>) -> Result<Tally> {
    let mut stream = PacketStream::new(*config, fading)?;
    for _ in 0..config.warmup_packets {
        stream.next_packet();
    }
    let mut tally = Tally::new(config.credit_cap() as usize + 2);
    if record.is_some() {
        tally.cdf.reserve(packets);
    }
    for _ in 0..packets {
        let state = stream.state_index();
        let out = stream.next_packet();
        tally.packets += 1;
        tally.occupancy[state] += 1;
        tally.transmissions += u64::from(out.transmissions_used);
        tally.clamped += u64::from(out.clamped_attempts);
        if out.success {
            tally.successes += 1;
        } else {
            tally.drops += 1;
        }
        match record {
            Some(CdfPoint::Cap) => tally.cdf.push(out.conditional_error_at_cap),
            Some(CdfPoint::Termination) => tally.cdf.push(out.conditional_error_at_termination),
            None => {}
        }
    }
    Ok(tally)
}

fn expect_protocol(config: &SimConfig, protocol: Protocol) -> Result<()> {
    if config.protocol != protocol {
        return Err(Error::Config(format!("expected protocol {protocol}, config says {}", config.protocol)));
    }
    Ok(())
}

fn check_source(config: &SimConfig, fading: &FadingSource) -> Result<()> {
    if fading.gamma0() != config.gamma0 {
        return Err(Error::Config(format!(
            "fading source mean SNR {} differs from config {}",
            fading.gamma0(),
            config.gamma0
        )));
    }
    Ok(())
}

pub fn run_dharq(config: &SimConfig, fading: FadingSource) -> Result<SimResult> {
    expect_protocol(config, Protocol::DHarq)?;
    run(config, fading)
}

pub fn run_harq(config: &SimConfig, fading: FadingSource) -> Result<SimResult> {
    expect_protocol(config, Protocol::Harq)?;
    run(config, fading)
}

pub fn run_fixed(config: &SimConfig, fading: FadingSource) -> Result<SimResult> {
    expect_protocol(config, Protocol::FixedTx)?;
    run(config, fading)
}

/// Runs whichever protocol the config names on one stream.
pub fn run(config: &SimConfig, fading: FadingSource) -> Result<SimResult> {
    check_source(config, &fading)?;
    Ok(simulate(config, fading, config.packet_count, None)?.into_result(*config))
}

/// Splits `packet_count` over `replicas` independent streams (stream ids
/// `0..replicas` under `config.seed`), each with its own warmup, and merges
/// them in replica order.
pub fn run_replicated(config: &SimConfig, replicas: usize) -> Result<SimResult> {
    config.validate()?;
    if replicas == 0 || replicas > config.packet_count {
        return Err(Error::Config(format!("replica count must be in 1..={}", config.packet_count)));
    }
    let base = config.packet_count / replicas;
    let extra = config.packet_count % replicas;
    let tallies: Vec<Tally> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let fading = FadingSource::new(config.gamma0, config.seed, r as u64)?;
            simulate(config, fading, base + usize::from(r < extra), None)
        })
        .collect::<Result<_>>()?;
    let mut total = Tally::new(config.credit_cap() as usize + 2);
    for t in tallies {
        total.merge(t);
    }
    Ok(total.into_result(*config))
}

/// Sorted conditional errors at the transmission cap for `realizations`
/// post-warmup packets.
pub fn conditional_per_cdf(config: &SimConfig, fading: FadingSource, realizations: usize) -> Result<Vec<f64>> {
    conditional_per_cdf_at(config, fading, realizations, CdfPoint::Cap)
}

pub fn conditional_per_cdf_at(config: &SimConfig, fading: FadingSource, realizations: usize, point: CdfPoint) -> Result<Vec<f64>> {
    check_source(config, &fading)?;
    if realizations == 0 {
        return Err(Error::Config("realizations must be positive".into()));
    }
    let mut tally = simulate(config, fading, realizations, Some(point))?;
    tally.cdf.sort_by(f64::total_cmp);
    Ok(tally.cdf)
}

/// Down-samples a sorted sample to at most `max_points` `(quantile, value)`
/// pairs, always keeping both ends.
pub fn quantile_points(sorted: &[f64], max_points: usize) -> Vec<(f64, f64)> {
    let n = sorted.len();
    if n == 0 || max_points == 0 {
        return Vec::new();
    }
    if n <= max_points {
        return sorted.iter().enumerate().map(|(i, v)| ((i + 1) as f64 / n as f64, *v)).collect();
    }
    if max_points == 1 {
        return vec![(1.0, sorted[n - 1])];
    }
    (0..max_points)
        .map(|j| {
            let idx = j * (n - 1) / (max_points - 1);
            ((idx + 1) as f64 / n as f64, sorted[idx])
        })
        .collect()
}

/// Empirical CDF of a sorted sample at `x`.
pub fn empirical_cdf(sorted: &[f64], x: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    sorted.partition_point(|v| *v <= x) as f64 / sorted.len() as f64
}

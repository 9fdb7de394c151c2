//! The four experiment commands. Each returns typed rows in grid order; a row
//! whose computation failed carries the error text instead of values, and the
//! rest of the grid still runs.

use std::sync::Arc;

use dharq_core::markov::{fixed_tx_from_epsilon, harq_from_table, stationary_stderr};
use dharq_core::sim::{conditional_per_cdf_at, quantile_points, run_replicated, Protocol, SimConfig, SimResult};
use dharq_core::{
    analyze_dharq, snr_from_db, Averager, AveragingConfig, CodeSpec, CombiningScheme, EpsilonCache, ErrorTable, FadingSource, ProtocolParams,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::output::{Cell, Table};

/// Shared state of one CLI invocation.
pub struct Context {
    pub config: ExperimentConfig,
    averager: Averager,
    cache: Arc<EpsilonCache>,
}

impl Context {
    pub fn new(config: ExperimentConfig) -> dharq_core::Result<Self> {
        let cache = Arc::new(match &config.cache {
            Some(path) => EpsilonCache::open(path)?,
            None => EpsilonCache::in_memory(),
        });
        let averager = Averager::with_cache(
            AveragingConfig {
                sample_count: config.samples,
                seed: config.seed,
                cache_enabled: true,
            },
            cache.clone(),
        );
        Ok(Self { config, averager, cache })
    }

    pub fn averager(&self) -> &Averager {
        &self.averager
    }

    /// Persists the cache when one was configured.
    pub fn finish(&self) -> dharq_core::Result<()> {
        self.cache.save()
    }

    fn largest_m(&self) -> u32 {
        self.config.m.iter().copied().max().unwrap_or(0)
    }

    /// Protocol rows for one grid point: the baselines once, D-HARQ once per
    /// credit cap.
    fn variants(&self) -> Vec<(Protocol, Option<u32>)> {
        let mut out = Vec::new();
        for &p in &self.config.protocols {
            match p {
                Protocol::DHarq => out.extend(self.config.m.iter().map(|&m| (p, Some(m)))),
                _ => out.push((p, None)),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnalyticPoint {
    pub per: f64,
    pub throughput: f64,
    /// Throughput with exact transmission counts (differs from `throughput`
    /// only for D-HARQ).
    pub throughput_exact: f64,
    pub mean_transmissions: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyzeRow {
    pub snr_db: f64,
    pub k: u32,
    pub protocol: Protocol,
    pub m: Option<u32>,
    pub result: Result<AnalyticPoint, String>,
}

fn harq_table(ctx: &Context, k: u32, gamma0: f64, w_max: u32) -> dharq_core::Result<ErrorTable> {
    let cfg = &ctx.config;
    let est = ctx.averager.estimates_upto(w_max, k, cfg.n, gamma0, cfg.scheme, cfg.mode)?;
    ErrorTable::from_one(est.iter().map(|e| e.epsilon).collect())
}

fn fixed_epsilon(ctx: &Context, k: u32, gamma0: f64) -> dharq_core::Result<dharq_core::ErrorEstimate> {
    let cfg = &ctx.config;
    ctx.averager
        .estimate(cfg.l, k, 2 * cfg.n, gamma0, CombiningScheme::ChaseCombining, cfg.mode)
}

fn analytic_rows(ctx: &Context, snr_db: f64, k: u32) -> Vec<AnalyzeRow> {
    let cfg = &ctx.config;
    let gamma0 = snr_from_db(snr_db);
    let row = |protocol, m, result| AnalyzeRow {
        snr_db,
        k,
        protocol,
        m,
        result,
    };
    if k > 2 * cfg.n {
        return ctx
            .variants()
            .into_iter()
            .map(|(p, m)| row(p, m, Err(format!("rejected: k={k} exceeds 2n={} (rate above 1)", 2 * cfg.n))))
            .collect();
    }
    let spec = CodeSpec { k, n: cfg.n };
    let needs_harq_family = cfg.protocols.iter().any(|p| *p != Protocol::FixedTx);
    let table = if needs_harq_family {
        harq_table(ctx, k, gamma0, cfg.l + ctx.largest_m()).map_err(|e| e.to_string())
    } else {
        Err(String::new())
    };

    ctx.variants()
        .into_iter()
        .map(|(protocol, m)| {
            let result = match protocol {
                Protocol::FixedTx => fixed_epsilon(ctx, k, gamma0)
                    .and_then(|e| fixed_tx_from_epsilon(&spec, ProtocolParams { l: cfg.l, m: 0 }, e.epsilon))
                    .map(|b| AnalyticPoint {
                        per: b.per,
                        throughput: b.throughput,
                        throughput_exact: b.throughput,
                        mean_transmissions: b.mean_transmissions,
                    })
                    .map_err(|e| e.to_string()),
                Protocol::Harq => table.clone().and_then(|t| {
                    harq_from_table(&spec, ProtocolParams { l: cfg.l, m: 0 }, &t)
                        .map(|b| AnalyticPoint {
                            per: b.per,
                            throughput: b.throughput,
                            throughput_exact: b.throughput,
                            mean_transmissions: b.mean_transmissions,
                        })
                        .map_err(|e| e.to_string())
                }),
                Protocol::DHarq => table.clone().and_then(|t| {
                    let params = ProtocolParams::new(cfg.l, m.unwrap_or(0)).map_err(|e| e.to_string())?;
                    analyze_dharq(params, &t, &spec)
                        .map(|a| AnalyticPoint {
                            per: a.per,
                            throughput: a.throughput,
                            throughput_exact: a.throughput_exact.unwrap_or(f64::NAN),
                            mean_transmissions: a.mean_transmissions_lambda,
                        })
                        .map_err(|e| e.to_string())
                }),
            };
            row(protocol, m, result)
        })
        .collect()
}

/// Analytical PER and throughput over the SNR grid.
pub fn cmd_analyze(ctx: &Context) -> Vec<AnalyzeRow> {
    let k = ctx.config.k;
    ctx.config
        .snr_db
        .values()
        .into_par_iter()
        .map(|snr| analytic_rows(ctx, snr, k))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Analytical PER and throughput over the information-length grid at the
/// first SNR of the grid.
pub fn cmd_sweep_rate(ctx: &Context) -> Vec<AnalyzeRow> {
    let snr = ctx.config.snr_db.start;
    ctx.config
        .k_grid
        .clone()
        .into_par_iter()
        .map(|k| analytic_rows(ctx, snr, k))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Largest analytical throughput among successful rows of `protocol` (and
/// credit cap `m`) whose PER does not exceed `target`.
pub fn max_throughput_under(rows: &[AnalyzeRow], protocol: Protocol, m: Option<u32>, target: f64) -> Option<(u32, f64)> {
    rows.iter()
        .filter(|r| r.protocol == protocol && r.m == m)
        .filter_map(|r| r.result.as_ref().ok().map(|p| (r.k, p)))
        .filter(|(_, p)| p.per <= target)
        .map(|(k, p)| (k, p.throughput))
        .max_by(|a, b| a.1.total_cmp(&b.1))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticWithError {
    pub point: AnalyticPoint,
    pub per_stderr: f64,
    /// Analytical state occupancy with delta-method standard errors.
    pub occupancy: Vec<f64>,
    pub occupancy_stderr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateRow {
    pub snr_db: f64,
    pub protocol: Protocol,
    pub m: Option<u32>,
    pub sim: Result<SimResult, String>,
    pub analytic: Result<AnalyticWithError, String>,
}

impl SimulateRow {
    /// `|sim - analytic| / sqrt(se_sim^2 + se_analytic^2)` for the PER.
    pub fn per_z_score(&self) -> Option<f64> {
        let (s, a) = (self.sim.as_ref().ok()?, self.analytic.as_ref().ok()?);
        let combined = (s.per_stderr.powi(2) + a.per_stderr.powi(2)).sqrt();
        let diff = (s.per_estimate - a.point.per).abs();
        Some(if combined == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff / combined
        })
    }

    /// Largest per-state deviation in units of
    /// `sqrt(p (1 - p) / packets + se_analytic^2)`.
    pub fn occupancy_z_score(&self) -> Option<f64> {
        let (s, a) = (self.sim.as_ref().ok()?, self.analytic.as_ref().ok()?);
        let n = s.packets as f64;
        let mut worst: f64 = 0.0;
        for ((emp, p), se) in s.state_occupancy.iter().zip(&a.occupancy).zip(&a.occupancy_stderr) {
            let sigma = (p * (1.0 - p) / n + se * se).sqrt();
            let diff = (emp - p).abs();
            let z = if sigma == 0.0 {
                if diff == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                diff / sigma
            };
            worst = worst.max(z);
        }
        Some(worst)
    }

    pub fn agrees(&self) -> Option<bool> {
        self.per_z_score().map(|z| z <= 3.0)
    }
}

fn analytic_with_error(ctx: &Context, gamma0: f64, protocol: Protocol, m: Option<u32>) -> dharq_core::Result<AnalyticWithError> {
    let cfg = &ctx.config;
    let spec = CodeSpec::new(cfg.k, cfg.n)?;
    let l = cfg.l;
    let two_state = |per: f64, se: f64| (vec![1.0 - per, per], vec![se, se]);
    match protocol {
        Protocol::FixedTx => {
            let e = fixed_epsilon(ctx, cfg.k, gamma0)?;
            let b = fixed_tx_from_epsilon(&spec, ProtocolParams::new(l, 0)?, e.epsilon)?;
            let (occupancy, occupancy_stderr) = two_state(b.per, e.stderr);
            Ok(AnalyticWithError {
                point: AnalyticPoint {
                    per: b.per,
                    throughput: b.throughput,
                    throughput_exact: b.throughput,
                    mean_transmissions: b.mean_transmissions,
                },
                per_stderr: e.stderr,
                occupancy,
                occupancy_stderr,
            })
        }
        Protocol::Harq => {
            let profile = ctx.averager.profile(l, cfg.k, cfg.n, gamma0, cfg.scheme, cfg.mode)?;
            let table = ErrorTable::from_one(profile.estimates.iter().map(|e| e.epsilon).collect())?;
            let b = harq_from_table(&spec, ProtocolParams::new(l, 0)?, &table)?;
            let se = profile.estimates[l as usize - 1].stderr;
            let (occupancy, occupancy_stderr) = two_state(b.per, se);
            Ok(AnalyticWithError {
                point: AnalyticPoint {
                    per: b.per,
                    throughput: b.throughput,
                    throughput_exact: b.throughput,
                    mean_transmissions: b.mean_transmissions,
                },
                per_stderr: se,
                occupancy,
                occupancy_stderr,
            })
        }
        Protocol::DHarq => {
            let params = ProtocolParams::new(l, m.unwrap_or(0))?;
            let profile = ctx.averager.profile(params.max_w(), cfg.k, cfg.n, gamma0, cfg.scheme, cfg.mode)?;
            let table = ErrorTable::from_one(profile.estimates.iter().map(|e| e.epsilon).collect())?;
            let a = analyze_dharq(params, &table, &spec)?;
            let occupancy_stderr = stationary_stderr(params, &table, &profile.covariance)?;
            Ok(AnalyticWithError {
                point: AnalyticPoint {
                    per: a.per,
                    throughput: a.throughput,
                    throughput_exact: a.throughput_exact.unwrap_or(f64::NAN),
                    mean_transmissions: a.mean_transmissions_lambda,
                },
                per_stderr: *occupancy_stderr.last().expect("at least two states"),
                occupancy: a.stationary.p.clone(),
                occupancy_stderr,
            })
        }
    }
}

fn sim_config(ctx: &Context, gamma0: f64, protocol: Protocol, m: Option<u32>, packets: usize) -> dharq_core::Result<SimConfig> {
    let cfg = &ctx.config;
    let mut sc = SimConfig::new(
        protocol,
        ProtocolParams::new(cfg.l, m.unwrap_or(0))?,
        CodeSpec::new(cfg.k, cfg.n)?,
        gamma0,
    );
    sc.scheme = cfg.scheme;
    sc.mode = cfg.mode;
    sc.packet_count = packets;
    sc.seed = cfg.seed;
    sc.warmup_packets = cfg.warmup;
    Ok(sc)
}

/// Monte Carlo runs over the SNR grid with analytical columns alongside.
pub fn cmd_simulate(ctx: &Context) -> Vec<SimulateRow> {
    let points: Vec<(f64, Protocol, Option<u32>)> = ctx
        .config
        .snr_db
        .values()
        .into_iter()
        .flat_map(|snr| ctx.variants().into_iter().map(move |(p, m)| (snr, p, m)))
        .collect();
    points
        .into_par_iter()
        .map(|(snr_db, protocol, m)| {
            let gamma0 = snr_from_db(snr_db);
            let sim = sim_config(ctx, gamma0, protocol, m, ctx.config.packets)
                .and_then(|sc| run_replicated(&sc, ctx.config.replicas))
                .map_err(|e| e.to_string());
            let analytic = analytic_with_error(ctx, gamma0, protocol, m).map_err(|e| e.to_string());
            SimulateRow {
                snr_db,
                protocol,
                m,
                sim,
                analytic,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdfRow {
    pub snr_db: f64,
    pub protocol: Protocol,
    pub m: Option<u32>,
    /// Sorted conditional error samples, or the failure reason.
    pub samples: Result<Vec<f64>, String>,
}

/// Conditional-PER samples per protocol and SNR.
pub fn cmd_cdf(ctx: &Context) -> Vec<CdfRow> {
    let points: Vec<(f64, Protocol, Option<u32>)> = ctx
        .config
        .snr_db
        .values()
        .into_iter()
        .flat_map(|snr| ctx.variants().into_iter().map(move |(p, m)| (snr, p, m)))
        .collect();
    points
        .into_par_iter()
        .map(|(snr_db, protocol, m)| {
            let gamma0 = snr_from_db(snr_db);
            let samples = sim_config(ctx, gamma0, protocol, m, ctx.config.realizations)
                .and_then(|sc| {
                    let fading = FadingSource::new(gamma0, sc.seed, 0)?;
                    conditional_per_cdf_at(&sc, fading, ctx.config.realizations, ctx.config.cdf_point)
                })
                .map_err(|e| e.to_string());
            CdfRow {
                snr_db,
                protocol,
                m,
                samples,
            }
        })
        .collect()
}

fn m_cell(m: Option<u32>) -> Cell {
    m.map_or(Cell::Empty, |m| Cell::Int(i64::from(m)))
}

fn status_cell<T>(r: &Result<T, String>) -> Cell {
    match r {
        Ok(_) => Cell::Text("ok".into()),
        Err(e) => Cell::Text(format!("error: {e}")),
    }
}

pub fn analyze_table(ctx: &Context, command: &str, rows: &[AnalyzeRow]) -> Table {
    let mut t = Table::new(
        ctx.config.fingerprint(command),
        &["snr_db", "k", "protocol", "L", "m", "per", "throughput", "throughput_exact", "mean_transmissions", "status"],
    );
    for r in rows {
        let mut cells = vec![
            Cell::Num(r.snr_db),
            Cell::Int(i64::from(r.k)),
            Cell::Text(r.protocol.to_string()),
            Cell::Int(i64::from(ctx.config.l)),
            m_cell(r.m),
        ];
        match &r.result {
            Ok(p) => cells.extend([Cell::Num(p.per), Cell::Num(p.throughput), Cell::Num(p.throughput_exact), Cell::Num(p.mean_transmissions)]),
            Err(_) => cells.extend([Cell::Empty, Cell::Empty, Cell::Empty, Cell::Empty]),
        }
        cells.push(status_cell(&r.result));
        t.push(cells);
    }
    t
}

pub fn simulate_table(ctx: &Context, rows: &[SimulateRow]) -> Table {
    let mut t = Table::new(
        ctx.config.fingerprint("simulate"),
        &[
            "snr_db",
            "protocol",
            "L",
            "m",
            "packets",
            "per",
            "per_stderr",
            "throughput_measured",
            "mean_transmissions",
            "occupancy",
            "per_analytic",
            "per_analytic_stderr",
            "throughput_analytic",
            "throughput_analytic_exact",
            "per_z",
            "agreement",
            "status",
        ],
    );
    for r in rows {
        let mut cells = vec![
            Cell::Num(r.snr_db),
            Cell::Text(r.protocol.to_string()),
            Cell::Int(i64::from(ctx.config.l)),
            m_cell(r.m),
        ];
        match &r.sim {
            Ok(s) => cells.extend([
                Cell::Int(s.packets as i64),
                Cell::Num(s.per_estimate),
                Cell::Num(s.per_stderr),
                Cell::Num(s.throughput_measured),
                Cell::Num(s.mean_transmissions),
                Cell::NumList(s.state_occupancy.clone()),
            ]),
            Err(_) => cells.extend(std::iter::repeat_n(Cell::Empty, 6)),
        }
        match &r.analytic {
            Ok(a) => cells.extend([
                Cell::Num(a.point.per),
                Cell::Num(a.per_stderr),
                Cell::Num(a.point.throughput),
                Cell::Num(a.point.throughput_exact),
            ]),
            Err(_) => cells.extend(std::iter::repeat_n(Cell::Empty, 4)),
        }
        cells.push(r.per_z_score().map_or(Cell::Empty, Cell::Num));
        cells.push(match r.agrees() {
            Some(true) => Cell::Text("pass".into()),
            Some(false) => Cell::Text("fail".into()),
            None => Cell::Empty,
        });
        let status = match (&r.sim, &r.analytic) {
            (Err(e), _) => Cell::Text(format!("error: simulation: {e}")),
            (_, Err(e)) => Cell::Text(format!("error: analysis: {e}")),
            _ => Cell::Text("ok".into()),
        };
        cells.push(status);
        t.push(cells);
    }
    t
}

pub fn cdf_table(ctx: &Context, rows: &[CdfRow]) -> Table {
    let mut t = Table::new(ctx.config.fingerprint("cdf"), &["snr_db", "protocol", "L", "m", "quantile", "value", "status"]);
    for r in rows {
        let head = [
            Cell::Num(r.snr_db),
            Cell::Text(r.protocol.to_string()),
            Cell::Int(i64::from(ctx.config.l)),
            m_cell(r.m),
        ];
        match &r.samples {
            Ok(samples) => {
                for (q, v) in quantile_points(samples, ctx.config.cdf_points) {
                    let mut cells = head.to_vec();
                    cells.extend([Cell::Num(q), Cell::Num(v), Cell::Text("ok".into())]);
                    t.push(cells);
                }
            }
            Err(e) => {
                let mut cells = head.to_vec();
                cells.extend([Cell::Empty, Cell::Empty, Cell::Text(format!("error: {e}"))]);
                t.push(cells);
            }
        }
    }
    t
}

/// Human-readable descriptions of failed rows.
pub fn failures(table: &Table) -> Vec<String> {
    let status = table.columns.iter().position(|c| c == "status");
    table
        .rows
        .iter()
        .enumerate()
        .filter_map(|(i, row)| {
            let cell = &row[status?];
            match cell {
                Cell::Text(s) if s.starts_with("error") => Some(format!("row {}: {}", i + 1, s)),
                _ => None,
            }
        })
        .collect()
}

//! Throughput, SLO attainment, tail latency and fairness from simulation
//! records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim_engine::{RequestRecord, SimOutput, UnitStats};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("percentile of an empty sample")]
    Empty,
    #[error("percentile rank {0} outside (0, 1]")]
    Rank(f64),
}

/// Relative slack when comparing a latency against its SLO target, so a
/// request served exactly at the reference latency passes despite rounding.
const SLO_REL_TOL: f64 = 1e-9;

/// Nearest-rank percentile: the `ceil(q * n)`-th smallest value.
pub fn percentile(values: &[f64], q: f64) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(MetricsError::Rank(q));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[rank - 1])
}

pub fn p99(values: &[f64]) -> Result<f64, MetricsError> {
    percentile(values, 0.99)
}

fn completed_by(r: &RequestRecord, horizon_s: f64) -> bool {
    r.done_s.is_some_and(|d| d <= horizon_s)
}

/// Completed requests per second for each LLM over `[0, horizon_s]`.
pub fn per_llm_throughput(records: &[RequestRecord], horizon_s: f64) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    for r in records {
        let e = out.entry(r.llm.clone()).or_insert(0.0);
        if completed_by(r, horizon_s) {
            *e += 1.0;
        }
    }
    for v in out.values_mut() {
        *v /= horizon_s;
    }
    out
}

/// Rate-weighted average of per-LLM throughputs.
pub fn aggregated_throughput(records: &[RequestRecord], rates: &BTreeMap<String, f64>, horizon_s: f64) -> f64 {
    let total_rate: f64 = rates.values().sum();
    if records.is_empty() || total_rate <= 0.0 || horizon_s <= 0.0 {
        return 0.0;
    }
    let tpt = per_llm_throughput(records, horizon_s);
    rates
        .iter()
        .map(|(llm, rate)| rate / total_rate * tpt.get(llm).copied().unwrap_or(0.0))
        .sum()
}

/// Fraction of requests finishing within `slo_scale` times their reference
/// latency. Unfinished requests count as misses.
pub fn slo_attainment(records: &[RequestRecord], slo_scale: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let ok = records
        .iter()
        .filter(|r| {
            r.latency_s()
                .is_some_and(|l| l <= slo_scale * r.reference_s * (1.0 + SLO_REL_TOL))
        })
        .count();
    ok as f64 / records.len() as f64
}

/// Normalized token-block usage of each LLM in a unit: its share of the
/// pool over its share of the unit's KV demand. Zero-rate LLMs get `None`.
pub fn resource_usage(unit: &UnitStats) -> Vec<Option<f64>> {
    let demand: Vec<f64> = unit
        .llms
        .iter()
        .map(|l| l.rate * l.blocks_per_token * l.mean_tokens)
        .collect();
    let total: f64 = demand.iter().sum();
    unit.llms
        .iter()
        .zip(&demand)
        .map(|(l, d)| {
            if *d <= 0.0 || unit.total_blocks == 0 {
                None
            } else {
                Some(l.mean_used_blocks / unit.total_blocks as f64 * total / d)
            }
        })
        .collect()
}

/// Largest pairwise gap of normalized usage inside a unit, if it has at
/// least two LLMs with traffic.
pub fn fairness_gap(unit: &UnitStats) -> Option<f64> {
    let r: Vec<f64> = resource_usage(unit).into_iter().flatten().collect();
    if r.len() < 2 {
        return None;
    }
    let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = r.iter().copied().fold(f64::INFINITY, f64::min);
    Some(max - min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SloPoint {
    pub scale: f64,
    pub attainment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmMetrics {
    pub llm: String,
    pub rate: f64,
    pub requests: usize,
    pub completed: usize,
    pub throughput: f64,
    /// Normalized token-block usage; absent for idle LLMs.
    pub usage_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub horizon_s: f64,
    pub requests: usize,
    pub completed: usize,
    pub aggregated_throughput: f64,
    pub total_throughput: f64,
    pub slo: Vec<SloPoint>,
    pub p99_avg_latency_s: f64,
    pub p99_ttft_s: f64,
    pub p99_tpot_s: f64,
    pub max_fairness_gap: Option<f64>,
    pub per_llm: Vec<LlmMetrics>,
}

/// Full report. Percentiles are over completed requests and are zero when
/// nothing completed.
pub fn report(out: &SimOutput, rates: &BTreeMap<String, f64>, slo_scales: &[f64]) -> MetricsReport {
    let h = out.horizon_s;
    let done: Vec<&RequestRecord> = out.records.iter().filter(|r| completed_by(r, h)).collect();
    let tail = |f: &dyn Fn(&RequestRecord) -> Option<f64>| {
        let v: Vec<f64> = done.iter().filter_map(|r| f(r)).collect();
        p99(&v).unwrap_or(0.0)
    };
    let mut usage: BTreeMap<String, Option<f64>> = BTreeMap::new();
    let mut gap: Option<f64> = None;
    for u in &out.units {
        for (l, r) in u.llms.iter().zip(resource_usage(u)) {
            usage.insert(l.llm.clone(), r);
        }
        if let Some(g) = fairness_gap(u) {
            gap = Some(gap.map_or(g, |x: f64| x.max(g)));
        }
    }
    let tpt = per_llm_throughput(&out.records, h);
    let mut names: Vec<&String> = rates.keys().collect();
    for k in tpt.keys() {
        if !rates.contains_key(k) {
            names.push(k);
        }
    }
    names.sort();
    let per_llm = names
        .into_iter()
        .map(|n| LlmMetrics {
            llm: n.clone(),
            rate: rates.get(n).copied().unwrap_or(0.0),
            requests: out.records.iter().filter(|r| &r.llm == n).count(),
            completed: done.iter().filter(|r| &r.llm == n).count(),
            throughput: tpt.get(n).copied().unwrap_or(0.0),
            usage_ratio: usage.get(n).copied().flatten(),
        })
        .collect();
    MetricsReport {
        horizon_s: h,
        requests: out.records.len(),
        completed: done.len(),
        aggregated_throughput: aggregated_throughput(&out.records, rates, h),
        total_throughput: if h > 0.0 { done.len() as f64 / h } else { 0.0 },
        slo: slo_scales
            .iter()
            .map(|&s| SloPoint {
                scale: s,
                attainment: slo_attainment(&out.records, s),
            })
            .collect(),
        p99_avg_latency_s: tail(&|r| r.latency_s().map(|l| l / r.output_len as f64)),
        p99_ttft_s: tail(&|r| r.ttft_s()),
        p99_tpot_s: tail(&|r| r.tpot_s()),
        max_fairness_gap: gap,
        per_llm,
    }
}

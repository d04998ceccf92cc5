//! Per-request metrics, per-policy reports and cross-policy comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{seconds, Nanos};
use crate::config::SchedulerPolicy;

pub const SIM_SCHEMA_VERSION: u32 = 1;

/// Points in a throughput CDF: percentiles 0, 1, ..., 100.
pub const CDF_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefetchCounts {
    /// Prefetched experts that the gate selected.
    pub hits: usize,
    /// Prefetched experts that the gate did not select.
    pub misses: usize,
    /// True experts fetched after sync point 1 because they were not prefetched.
    pub refetches: usize,
    /// Layers whose prediction finished after the gate and was discarded.
    pub late_predictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub request_id: u64,
    pub prefill_tokens: usize,
    pub decode_tokens: usize,
    pub ttft_ns: Nanos,
    pub e2e_ns: Nanos,
    pub ttft_s: f64,
    pub e2e_s: f64,
    /// Decode tokens over decode time.
    pub throughput_tokens_per_s: f64,
    pub peak_mem_bytes: u64,
    pub peak_resident_experts: usize,
    pub prefetch_hits: usize,
    pub prefetch_misses: usize,
    pub refetch_count: usize,
    pub late_predictions: usize,
    pub decode_step_ns: Vec<Nanos>,
}

impl RequestMetrics {
    pub(crate) fn new(
        request_id: u64,
        prefill_tokens: usize,
        ttft_ns: Nanos,
        decode_step_ns: Vec<Nanos>,
        peak_mem_bytes: u64,
        peak_resident_experts: usize,
        counts: PrefetchCounts,
    ) -> Self {
        let decode_ns: Nanos = decode_step_ns.iter().sum();
        let e2e_ns = ttft_ns + decode_ns;
        let decode_tokens = decode_step_ns.len();
        let throughput = if decode_ns > 0 {
            decode_tokens as f64 / seconds(decode_ns)
        } else {
            0.0
        };
        RequestMetrics {
            request_id,
            prefill_tokens,
            decode_tokens,
            ttft_ns,
            e2e_ns,
            ttft_s: seconds(ttft_ns),
            e2e_s: seconds(e2e_ns),
            throughput_tokens_per_s: throughput,
            peak_mem_bytes,
            peak_resident_experts,
            prefetch_hits: counts.hits,
            prefetch_misses: counts.misses,
            refetch_count: counts.refetches,
            late_predictions: counts.late_predictions,
            decode_step_ns,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub requests: usize,
    pub mean_ttft_s: f64,
    pub mean_e2e_s: f64,
    pub mean_throughput_tokens_per_s: f64,
    pub total_decode_tokens: usize,
    pub prefetch_hits: usize,
    pub prefetch_misses: usize,
    pub refetch_count: usize,
    pub late_predictions: usize,
    pub max_peak_mem_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub percentile: u32,
    pub tokens_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schema_version: u32,
    pub policy: SchedulerPolicy,
    pub model: String,
    pub seed: u64,
    pub config_digest: String,
    /// Peak device memory with every slot occupied.
    pub provisioned_peak_mem_bytes: u64,
    pub gpu_only_mem_bytes: u64,
    pub aggregate: Aggregate,
    pub throughput_cdf: Vec<CdfPoint>,
    pub requests: Vec<RequestMetrics>,
    /// Digests of the artifacts the report was computed from.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Linear-interpolation percentile of `sorted` at `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}

pub fn throughput_cdf(requests: &[RequestMetrics]) -> Vec<CdfPoint> {
    let mut v: Vec<f64> = requests.iter().map(|r| r.throughput_tokens_per_s).collect();
    v.sort_by(f64::total_cmp);
    (0..CDF_POINTS as u32)
        .map(|p| CdfPoint {
            percentile: p,
            tokens_per_s: percentile(&v, p as f64 / 100.0),
        })
        .collect()
}

impl SimReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        policy: SchedulerPolicy,
        model: String,
        seed: u64,
        config_digest: String,
        provisioned_peak_mem_bytes: u64,
        gpu_only_mem_bytes: u64,
        requests: Vec<RequestMetrics>,
    ) -> Self {
        let aggregate = Aggregate {
            requests: requests.len(),
            mean_ttft_s: mean(requests.iter().map(|r| r.ttft_s)),
            mean_e2e_s: mean(requests.iter().map(|r| r.e2e_s)),
            mean_throughput_tokens_per_s: mean(requests.iter().map(|r| r.throughput_tokens_per_s)),
            total_decode_tokens: requests.iter().map(|r| r.decode_tokens).sum(),
            prefetch_hits: requests.iter().map(|r| r.prefetch_hits).sum(),
            prefetch_misses: requests.iter().map(|r| r.prefetch_misses).sum(),
            refetch_count: requests.iter().map(|r| r.refetch_count).sum(),
            late_predictions: requests.iter().map(|r| r.late_predictions).sum(),
            max_peak_mem_bytes: requests.iter().map(|r| r.peak_mem_bytes).max().unwrap_or(0),
        };
        SimReport {
            schema_version: SIM_SCHEMA_VERSION,
            policy,
            model,
            seed,
            config_digest,
            provisioned_peak_mem_bytes,
            gpu_only_mem_bytes,
            aggregate,
            throughput_cdf: throughput_cdf(&requests),
            requests,
            inputs: BTreeMap::new(),
        }
    }

    /// Throughput at percentile `p` (0..=100) of the CDF.
    pub fn throughput_at(&self, p: u32) -> f64 {
        self.throughput_cdf[p.min(100) as usize].tokens_per_s
    }

    pub fn throughput_iqr(&self) -> f64 {
        self.throughput_at(75) - self.throughput_at(25)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub policy: SchedulerPolicy,
    pub baseline: SchedulerPolicy,
    /// Mean over requests of `baseline e2e / policy e2e`.
    pub mean_e2e_speedup: f64,
    /// Mean over requests of `baseline TTFT / policy TTFT`.
    pub mean_ttft_speedup: f64,
    pub per_request_e2e: Vec<f64>,
}

/// Per-request mean of `baseline / target` on e2e and TTFT. Requests are
/// matched by id; both reports must cover the same requests.
pub fn speedup(target: &SimReport, baseline: &SimReport) -> Option<Speedup> {
    if target.requests.len() != baseline.requests.len()
        || target
            .requests
            .iter()
            .zip(&baseline.requests)
            .any(|(a, b)| a.request_id != b.request_id)
    {
        return None;
    }
    let ratio = |b: Nanos, t: Nanos| if t == 0 { 1.0 } else { b as f64 / t as f64 };
    let per_request_e2e: Vec<f64> = target
        .requests
        .iter()
        .zip(&baseline.requests)
        .map(|(t, b)| ratio(b.e2e_ns, t.e2e_ns))
        .collect();
    Some(Speedup {
        policy: target.policy,
        baseline: baseline.policy,
        mean_e2e_speedup: mean(per_request_e2e.iter().copied()),
        mean_ttft_speedup: mean(
            target
                .requests
                .iter()
                .zip(&baseline.requests)
                .map(|(t, b)| ratio(b.ttft_ns, t.ttft_ns)),
        ),
        per_request_e2e,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub policy: SchedulerPolicy,
    pub mean_ttft_s: f64,
    pub mean_e2e_s: f64,
    pub throughput_p10: f64,
    pub throughput_p50: f64,
    pub throughput_p90: f64,
    pub provisioned_peak_mem_bytes: u64,
    pub observed_peak_mem_bytes: u64,
    pub prefetch_hits: usize,
    pub prefetch_misses: usize,
    pub refetch_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub schema_version: u32,
    pub model: String,
    pub gpu_only_mem_bytes: u64,
    pub rows: Vec<PolicyRow>,
    /// Each predictor-driven policy against each baseline policy.
    pub speedups: Vec<Speedup>,
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
}

impl Comparison {
    pub fn new(reports: &[SimReport]) -> Self {
        let rows = reports
            .iter()
            .map(|r| PolicyRow {
                policy: r.policy,
                mean_ttft_s: r.aggregate.mean_ttft_s,
                mean_e2e_s: r.aggregate.mean_e2e_s,
                throughput_p10: r.throughput_at(10),
                throughput_p50: r.throughput_at(50),
                throughput_p90: r.throughput_at(90),
                provisioned_peak_mem_bytes: r.provisioned_peak_mem_bytes,
                observed_peak_mem_bytes: r.aggregate.max_peak_mem_bytes,
                prefetch_hits: r.aggregate.prefetch_hits,
                prefetch_misses: r.aggregate.prefetch_misses,
                refetch_count: r.aggregate.refetch_count,
            })
            .collect();
        let mut speedups = Vec::new();
        for t in reports.iter().filter(|r| r.policy.uses_predictor()) {
            for b in reports.iter().filter(|r| !r.policy.uses_predictor()) {
                speedups.extend(speedup(t, b));
            }
        }
        Comparison {
            schema_version: SIM_SCHEMA_VERSION,
            model: reports.first().map(|r| r.model.clone()).unwrap_or_default(),
            gpu_only_mem_bytes: reports.first().map_or(0, |r| r.gpu_only_mem_bytes),
            rows,
            speedups,
            inputs: reports.first().map(|r| r.inputs.clone()).unwrap_or_default(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes") + "\n"
    }

    /// Fixed-width text table.
    pub fn to_table(&self) -> String {
        let gb = |b: u64| b as f64 / 1e9;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>10} {:>10} {:>9} {:>9} {:>9} {:>9} {:>7} {:>7} {:>8}",
            "policy", "ttft_ms", "e2e_ms", "tps_p10", "tps_p50", "tps_p90", "mem_gb", "hits", "misses", "refetch"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>10.3} {:>10.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>7} {:>7} {:>8}",
                r.policy.as_str(),
                r.mean_ttft_s * 1e3,
                r.mean_e2e_s * 1e3,
                r.throughput_p10,
                r.throughput_p50,
                r.throughput_p90,
                gb(r.provisioned_peak_mem_bytes),
                r.prefetch_hits,
                r.prefetch_misses,
                r.refetch_count
            );
        }
        let _ = writeln!(out, "{:<12} {:>70.3}", "gpu-only", gb(self.gpu_only_mem_bytes));
        for s in &self.speedups {
            let _ = writeln!(
                out,
                "{} vs {}: e2e x{:.3}, ttft x{:.3}",
                s.policy, s.baseline, s.mean_e2e_speedup, s.mean_ttft_speedup
            );
        }
        out
    }
}

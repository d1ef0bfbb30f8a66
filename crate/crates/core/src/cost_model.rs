//! Analytical latency and throughput model.
//!
//! Stands in for offline GPU profiling. Prefill is compute bound and scales
//! inversely with the SM fraction a job receives; decode saturates once it
//! holds `decode_sm_saturation` of the GPU. Every other module asks this one
//! how long a job takes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tensor parallel degrees a mesh can run.
pub const TP_DEGREES: [u32; 4] = [1, 2, 4, 8];

/// Default average generation length (ShareGPT).
pub const DEFAULT_GEN_LEN: u32 = 338;

/// Default average prompt length (ShareGPT).
pub const DEFAULT_PROMPT_LEN: u32 = 161;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("sm fraction {0} outside (0, 1]")]
    SmFraction(f64),
    #[error("tensor parallel degree {0} not in {{1, 2, 4, 8}}")]
    TpDegree(u32),
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("context length must be at least 1")]
    ZeroContext,
    #[error("prompt tokens ({tokens}) fewer than batch size ({batch})")]
    TooFewTokens { tokens: u64, batch: u32 },
    #[error("invalid model spec `{name}`: {reason}")]
    Spec { name: String, reason: String },
    #[error("invalid latency profile: {0}")]
    Profile(String),
    #[error("invalid throughput query: {0}")]
    Query(String),
}

/// Architecture and memory footprint of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmSpec {
    pub name: String,
    pub num_layers: u32,
    pub num_heads: u32,
    #[serde(default = "default_head_dim")]
    pub head_dim: u32,
    pub hidden_size: u32,
    pub weight_bytes: u64,
    #[serde(default = "default_bytes_per_element")]
    pub bytes_per_element: u32,
}

fn default_head_dim() -> u32 {
    128
}

fn default_bytes_per_element() -> u32 {
    2
}

impl LlmSpec {
    /// LLaMA-style model with fp16 weights: `params` parameters, heads of 128.
    pub fn llama_like(name: &str, num_layers: u32, num_heads: u32, hidden_size: u32, params: f64) -> Self {
        Self {
            name: name.to_string(),
            num_layers,
            num_heads,
            head_dim: 128,
            hidden_size,
            weight_bytes: (params * 2.0) as u64,
            bytes_per_element: 2,
        }
    }

    pub fn llama_7b(name: &str) -> Self {
        Self::llama_like(name, 32, 32, 4096, 6.7e9)
    }

    pub fn llama_13b(name: &str) -> Self {
        Self::llama_like(name, 40, 40, 5120, 13.0e9)
    }

    pub fn llama_30b(name: &str) -> Self {
        Self::llama_like(name, 60, 52, 6656, 32.5e9)
    }

    pub fn llama_65b(name: &str) -> Self {
        Self::llama_like(name, 80, 64, 8192, 65.2e9)
    }

    /// Bytes of K and V cache one token occupies across all layers.
    pub fn kv_bytes_per_token(&self) -> u64 {
        2 * self.num_layers as u64
            * self.num_heads as u64
            * self.head_dim as u64
            * self.bytes_per_element as u64
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let bad = |reason: &str| {
            Err(CostError::Spec {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        if self.name.is_empty() {
            return bad("empty name");
        }
        if self.num_layers == 0
            || self.num_heads == 0
            || self.head_dim == 0
            || self.hidden_size == 0
            || self.bytes_per_element == 0
        {
            return bad("all counts must be positive");
        }
        if self.weight_bytes == 0 {
            return bad("weight_bytes must be positive");
        }
        Ok(())
    }
}

/// Parallelism width and SM share granted to one job.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecConfig {
    pub tp_degree: u32,
    pub sm_fraction: f64,
}

impl ExecConfig {
    pub fn new(tp_degree: u32, sm_fraction: f64) -> Result<Self, CostError> {
        if !TP_DEGREES.contains(&tp_degree) {
            return Err(CostError::TpDegree(tp_degree));
        }
        check_sm(sm_fraction)?;
        Ok(Self {
            tp_degree,
            sm_fraction,
        })
    }

    /// One GPU, every SM.
    pub fn full() -> Self {
        Self {
            tp_degree: 1,
            sm_fraction: 1.0,
        }
    }
}

fn check_sm(f: f64) -> Result<(), CostError> {
    if f.is_nan() || f <= 0.0 || f > 1.0 {
        Err(CostError::SmFraction(f))
    } else {
        Ok(())
    }
}

/// Coefficients of the parametric latency model.
///
/// Per-model costs are the `*_ms*` coefficients multiplied by
/// `num_layers * hidden_size / reference_scale`, so a model the size of the
/// reference (LLaMA-7B by default) pays exactly the listed cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyProfile {
    /// Prefill cost per prompt token at full SMs, tp=1 (ms).
    pub prefill_ms_per_token: f64,
    /// Fixed cost of one decode step at full SMs, tp=1 (ms).
    pub decode_base_ms: f64,
    /// Additional decode step cost per context token (ms).
    pub decode_ms_per_context_token: f64,
    /// Efficiency of tensor parallelism, applied when tp > 1.
    pub tp_efficiency: f64,
    /// SM fraction above which decode latency no longer improves.
    pub decode_sm_saturation: f64,
    /// Decode batches up to this size cost the same as batch 1.
    pub decode_batch_knee: f64,
    /// `num_layers * hidden_size` of the reference model.
    pub reference_scale: f64,
}

impl Default for LatencyProfile {
    fn default() -> Self {
        Self {
            prefill_ms_per_token: 0.12,
            decode_base_ms: 8.0,
            decode_ms_per_context_token: 0.004,
            tp_efficiency: 0.9,
            decode_sm_saturation: 0.5,
            decode_batch_knee: 16.0,
            reference_scale: 32.0 * 4096.0,
        }
    }
}

impl LatencyProfile {
    pub fn validate(&self) -> Result<(), CostError> {
        let positive = [
            ("prefill_ms_per_token", self.prefill_ms_per_token),
            ("decode_base_ms", self.decode_base_ms),
            ("decode_ms_per_context_token", self.decode_ms_per_context_token),
            ("tp_efficiency", self.tp_efficiency),
            ("decode_sm_saturation", self.decode_sm_saturation),
            ("decode_batch_knee", self.decode_batch_knee),
            ("reference_scale", self.reference_scale),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(CostError::Profile(format!("{name} must be positive, got {v}")));
            }
        }
        if self.tp_efficiency > 1.0 {
            return Err(CostError::Profile("tp_efficiency must be <= 1".into()));
        }
        if self.decode_sm_saturation > 1.0 {
            return Err(CostError::Profile("decode_sm_saturation must be <= 1".into()));
        }
        Ok(())
    }

    fn model_scale(&self, spec: &LlmSpec) -> f64 {
        spec.num_layers as f64 * spec.hidden_size as f64 / self.reference_scale
    }

    /// Prefill cost per token for `spec` at full SMs and tp=1.
    pub fn prefill_coeff(&self, spec: &LlmSpec) -> f64 {
        self.prefill_ms_per_token * self.model_scale(spec)
    }

    pub fn decode_base_coeff(&self, spec: &LlmSpec) -> f64 {
        self.decode_base_ms * self.model_scale(spec)
    }

    pub fn decode_context_coeff(&self, spec: &LlmSpec) -> f64 {
        self.decode_ms_per_context_token * self.model_scale(spec)
    }

    /// Effective speedup of a tp-wide mesh over one GPU.
    pub fn parallel_speedup(&self, tp_degree: u32) -> f64 {
        if tp_degree <= 1 {
            1.0
        } else {
            self.tp_efficiency * tp_degree as f64
        }
    }

    pub fn sm_scaling_decode(&self, f: f64) -> Result<f64, CostError> {
        sm_scaling_decode(f, self.decode_sm_saturation)
    }

    /// Sublinear batch cost of a decode step.
    pub fn decode_batch_factor(&self, batch: u32) -> f64 {
        (batch as f64 / self.decode_batch_knee).max(1.0)
    }

    /// Latency of one prefill job over `total_prompt_tokens` tokens.
    pub fn prefill_latency(
        &self,
        spec: &LlmSpec,
        cfg: ExecConfig,
        batch: u32,
        total_prompt_tokens: u64,
    ) -> Result<f64, CostError> {
        if batch == 0 {
            return Err(CostError::ZeroBatch);
        }
        if total_prompt_tokens < batch as u64 {
            return Err(CostError::TooFewTokens {
                tokens: total_prompt_tokens,
                batch,
            });
        }
        let scale = sm_scaling_prefill(cfg.sm_fraction)?;
        Ok(self.prefill_coeff(spec) * total_prompt_tokens as f64 * scale
            / self.parallel_speedup(cfg.tp_degree))
    }

    /// Latency of one decode iteration producing a token for each of `batch` requests.
    pub fn decode_step_latency(
        &self,
        spec: &LlmSpec,
        cfg: ExecConfig,
        batch: u32,
        avg_context: u64,
    ) -> Result<f64, CostError> {
        if batch == 0 {
            return Err(CostError::ZeroBatch);
        }
        if avg_context == 0 {
            return Err(CostError::ZeroContext);
        }
        let per_step =
            self.decode_base_coeff(spec) + self.decode_context_coeff(spec) * avg_context as f64;
        Ok(per_step
            * self.decode_batch_factor(batch)
            * self.sm_scaling_decode(cfg.sm_fraction)?
            / self.parallel_speedup(cfg.tp_degree))
    }

    /// Unqueued latency of one request served alone at full SMs.
    pub fn isolated_request_latency(
        &self,
        spec: &LlmSpec,
        tp_degree: u32,
        prompt_len: u32,
        output_len: u32,
    ) -> Result<f64, CostError> {
        let cfg = ExecConfig::new(tp_degree, 1.0)?;
        let mut total = self.prefill_latency(spec, cfg, 1, prompt_len.max(1) as u64)?;
        for generated in 1..output_len.max(1) {
            total += self.decode_step_latency(spec, cfg, 1, prompt_len as u64 + generated as u64)?;
        }
        Ok(total)
    }

    /// Throughput of `query.spec` under the stable-batch model, searching the
    /// smallest batch that keeps up with `query.rate`.
    pub fn estimate_throughput(&self, query: &ThroughputQuery<'_>) -> Result<ThroughputEstimate, CostError> {
        if !(query.rate.is_finite() && query.rate >= 0.0) {
            return Err(CostError::Query(format!("rate {} must be >= 0", query.rate)));
        }
        if query.gen_len < 1.0 || query.prompt_len < 1.0 {
            return Err(CostError::Query("mean lengths must be >= 1".into()));
        }
        if query.max_batch == 0 {
            return Err(CostError::Query("no KV capacity for a single request".into()));
        }
        let mut peers_ms = 0.0;
        for peer in query.peers {
            peers_ms += peer.prefill_ms(self)?;
        }
        let raw = |b: u32| self.raw_throughput(query, peers_ms, b);

        let top = raw(query.max_batch)?;
        if top < query.rate {
            return Ok(ThroughputEstimate {
                throughput: top,
                batch: query.max_batch,
                saturated: true,
            });
        }
        // raw throughput is increasing in b, so the predicate is monotone.
        let (mut lo, mut hi) = (1u32, query.max_batch);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if raw(mid)? >= query.rate {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        Ok(ThroughputEstimate {
            throughput: raw(lo)?.min(query.rate),
            batch: lo,
            saturated: false,
        })
    }

    /// Unclamped stable-batch throughput at batch `b`.
    pub fn raw_throughput(&self, query: &ThroughputQuery<'_>, peers_prefill_ms: f64, b: u32) -> Result<f64, CostError> {
        let prompt_tokens = ((b as f64 * query.prompt_len).round() as u64).max(b as u64);
        let own_prefill = self.prefill_latency(query.spec, query.exec, b, prompt_tokens)?;
        let avg_context = (query.prompt_len + query.gen_len / 2.0).round().max(1.0) as u64;
        let decode = self.decode_step_latency(query.spec, query.exec, b, avg_context)?;
        Ok(stable_batch_throughput(
            b,
            peers_prefill_ms + own_prefill,
            decode,
            query.gen_len,
        ))
    }
}

/// Latency multiplier of a compute-bound prefill holding fraction `f` of the SMs.
pub fn sm_scaling_prefill(f: f64) -> Result<f64, CostError> {
    check_sm(f)?;
    Ok(1.0 / f)
}

/// Latency multiplier of a decode step holding fraction `f` of the SMs.
///
/// Flat (1.0) at or above `f_sat`; below it the step becomes compute bound
/// and slows as `1/f`.
pub fn sm_scaling_decode(f: f64, f_sat: f64) -> Result<f64, CostError> {
    check_sm(f)?;
    if f >= f_sat {
        Ok(1.0)
    } else {
        Ok(1.0 / f)
    }
}

/// Requests per second completed by a stable batch of `batch` requests whose
/// cycle is every colocated prefill plus `gen_len` decode steps.
pub fn stable_batch_throughput(batch: u32, prefill_sum_ms: f64, decode_step_ms: f64, gen_len: f64) -> f64 {
    let cycle_s = (prefill_sum_ms + decode_step_ms * gen_len) / 1000.0;
    batch as f64 / cycle_s
}

/// Prefill load a colocated model puts on the unit.
#[derive(Debug, Clone)]
pub struct PeerPrefill<'a> {
    pub spec: &'a LlmSpec,
    pub exec: ExecConfig,
    pub batch: u32,
    pub prompt_len: f64,
}

impl PeerPrefill<'_> {
    pub fn prefill_ms(&self, profile: &LatencyProfile) -> Result<f64, CostError> {
        let b = self.batch.max(1);
        let tokens = ((b as f64 * self.prompt_len).round() as u64).max(b as u64);
        profile.prefill_latency(self.spec, self.exec, b, tokens)
    }
}

#[derive(Debug, Clone)]
pub struct ThroughputQuery<'a> {
    pub spec: &'a LlmSpec,
    pub exec: ExecConfig,
    /// Arrival rate the model must sustain (req/s).
    pub rate: f64,
    pub prompt_len: f64,
    pub gen_len: f64,
    pub peers: &'a [PeerPrefill<'a>],
    /// Largest batch the KV cache can hold.
    pub max_batch: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputEstimate {
    /// `min(raw, rate)` at the chosen batch.
    pub throughput: f64,
    pub batch: u32,
    /// No batch within capacity meets the rate.
    pub saturated: bool,
}

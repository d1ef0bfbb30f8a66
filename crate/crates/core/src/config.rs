//! Experiment configuration: one JSON document drives every command.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::{LatencyProfile, LlmSpec};
use crate::kv_manager::KvConfig;
use crate::placement::{Backend, Cluster, LlmDemand, PlacementInput, PlacementOptions};
use crate::scheduler::{SchedulerConfig, SchedulerKind};
use crate::sim_engine::{SimLlm, SimOptions};
use crate::workload::{gen_rates, LengthDist, LlmWorkload, WorkloadError, WorkloadSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub num_nodes: u32,
    pub gpus_per_node: u32,
    pub gpu_memory_gb: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            num_nodes: 4,
            gpus_per_node: 8,
            gpu_memory_gb: 80.0,
        }
    }
}

impl ClusterConfig {
    pub fn cluster(&self) -> Cluster {
        Cluster {
            num_nodes: self.num_nodes,
            gpus_per_node: self.gpus_per_node,
            gpu_memory_bytes: self.gpu_memory_gb * 1e9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "llama-7b")]
    Llama7b,
    #[serde(rename = "llama-13b")]
    Llama13b,
    #[serde(rename = "llama-30b")]
    Llama30b,
    #[serde(rename = "llama-65b")]
    Llama65b,
}

impl Preset {
    pub fn spec(self, name: &str) -> LlmSpec {
        match self {
            Preset::Llama7b => LlmSpec::llama_7b(name),
            Preset::Llama13b => LlmSpec::llama_13b(name),
            Preset::Llama30b => LlmSpec::llama_30b(name),
            Preset::Llama65b => LlmSpec::llama_65b(name),
        }
    }
}

/// Explicit architecture for models outside the presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub num_layers: u32,
    pub num_heads: u32,
    pub hidden_size: u32,
    #[serde(default = "default_head_dim")]
    pub head_dim: u32,
    /// Parameter count; weights are stored in fp16.
    pub params: f64,
}

fn default_head_dim() -> u32 {
    128
}

/// One served model. Exactly one of `model` and `arch` must be given;
/// `rate` and the length fields override the workload defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<Arch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_len: Option<LengthDist>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_len: Option<LengthDist>,
}

impl LlmEntry {
    pub fn preset(name: &str, model: Preset) -> Self {
        LlmEntry {
            name: name.to_string(),
            model: Some(model),
            arch: None,
            rate: None,
            prompt_len: None,
            output_len: None,
        }
    }

    pub fn spec(&self) -> Result<LlmSpec, ConfigError> {
        match (&self.model, &self.arch) {
            (Some(p), None) => Ok(p.spec(&self.name)),
            (None, Some(a)) => {
                let mut s = LlmSpec::llama_like(&self.name, a.num_layers, a.num_heads, a.hidden_size, a.params);
                s.head_dim = a.head_dim;
                s.validate().map_err(|e| invalid(format!("{}: {e}", self.name)))?;
                Ok(s)
            }
            _ => Err(invalid(format!("{}: give exactly one of `model` and `arch`", self.name))),
        }
    }
}

/// Default catalog: 12 small, 4 medium, 2 large and 1 extra-large model.
pub fn default_catalog() -> Vec<LlmEntry> {
    let groups = [
        (Preset::Llama7b, "7b", 12),
        (Preset::Llama13b, "13b", 4),
        (Preset::Llama30b, "30b", 2),
        (Preset::Llama65b, "65b", 1),
    ];
    groups
        .iter()
        .flat_map(|&(p, tag, n)| (0..n).map(move |i| LlmEntry::preset(&format!("llama-{tag}-{i}"), p)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    /// Power-law exponent of the rate distribution over models.
    pub alpha: f64,
    /// Rate of the most popular model (req/s).
    pub max_rate: f64,
    /// Multiplies every rate, explicit or generated.
    pub rate_scale: f64,
    pub horizon_s: f64,
    pub prompt_len: LengthDist,
    pub output_len: LengthDist,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            alpha: 0.9,
            max_rate: 20.0,
            rate_scale: 1.0,
            horizon_s: 600.0,
            prompt_len: LengthDist::sharegpt_prompt(),
            output_len: LengthDist::sharegpt_output(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub rate_scales: Vec<f64>,
    pub schedulers: Vec<SchedulerKind>,
    pub backends: Vec<Backend>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            rate_scales: vec![0.5, 1.0, 2.0],
            schedulers: SchedulerKind::ALL.to_vec(),
            backends: vec![Backend::Greedy],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub cluster: ClusterConfig,
    pub llms: Vec<LlmEntry>,
    pub workload: WorkloadConfig,
    pub profile: LatencyProfile,
    pub kv: KvConfig,
    pub scheduler: SchedulerConfig,
    pub placement: PlacementOptions,
    pub slo_scales: Vec<f64>,
    /// Measure SLO reference latency on a single GPU rather than on the
    /// LLM's deployed mesh.
    pub slo_reference_single_gpu: bool,
    pub ablate: AblateConfig,
    /// Run simulations until every request finishes instead of stopping
    /// at the horizon.
    pub drain: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            cluster: ClusterConfig::default(),
            llms: default_catalog(),
            workload: WorkloadConfig::default(),
            profile: LatencyProfile::default(),
            kv: KvConfig::default(),
            scheduler: SchedulerConfig::default(),
            placement: PlacementOptions::default(),
            slo_scales: vec![1.0, 2.0, 4.0, 8.0, 16.0],
            slo_reference_single_gpu: false,
            ablate: AblateConfig::default(),
            drain: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.llms.is_empty() {
            return Err(invalid("llms must not be empty"));
        }
        for (i, l) in self.llms.iter().enumerate() {
            if l.name.is_empty() || l.name.contains(',') {
                return Err(invalid(format!("bad LLM name {:?}", l.name)));
            }
            if self.llms[..i].iter().any(|o| o.name == l.name) {
                return Err(invalid(format!("duplicate LLM name {}", l.name)));
            }
            l.spec()?;
            if let Some(r) = l.rate {
                if !(r.is_finite() && r >= 0.0) {
                    return Err(invalid(format!("{}: rate must be >= 0", l.name)));
                }
            }
        }
        let w = &self.workload;
        if !(w.rate_scale.is_finite() && w.rate_scale >= 0.0) {
            return Err(invalid("workload.rate_scale must be >= 0"));
        }
        if self.slo_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(invalid("slo_scales must be positive"));
        }
        if self.ablate.rate_scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(invalid("ablate.rate_scales must be >= 0"));
        }
        self.scheduler.validate().map_err(invalid)?;
        self.kv.validate().map_err(|e| invalid(e.to_string()))?;
        self.profile.validate().map_err(|e| invalid(e.to_string()))?;
        self.placement.validate().map_err(|e| invalid(e.to_string()))?;
        self.cluster.cluster().validate().map_err(|e| invalid(e.to_string()))?;
        self.workload_spec(1.0)?.validate()?;
        Ok(())
    }

    /// Per-model rates with `rate_scale * extra_scale` applied. Models
    /// without an explicit rate take power-law rates by catalog position.
    pub fn rates(&self, extra_scale: f64) -> Result<Vec<f64>, ConfigError> {
        let w = &self.workload;
        let generated = gen_rates(self.llms.len(), w.alpha, w.max_rate)?;
        Ok(self
            .llms
            .iter()
            .zip(generated)
            .map(|(l, g)| l.rate.unwrap_or(g) * w.rate_scale * extra_scale)
            .collect())
    }

    pub fn rate_map(&self, extra_scale: f64) -> Result<BTreeMap<String, f64>, ConfigError> {
        Ok(self
            .llms
            .iter()
            .map(|l| l.name.clone())
            .zip(self.rates(extra_scale)?)
            .collect())
    }

    fn lengths(&self, l: &LlmEntry) -> (LengthDist, LengthDist) {
        (
            l.prompt_len.clone().unwrap_or_else(|| self.workload.prompt_len.clone()),
            l.output_len.clone().unwrap_or_else(|| self.workload.output_len.clone()),
        )
    }

    pub fn workload_spec(&self, extra_scale: f64) -> Result<WorkloadSpec, ConfigError> {
        let rates = self.rates(extra_scale)?;
        Ok(WorkloadSpec {
            llms: self
                .llms
                .iter()
                .zip(rates)
                .map(|(l, rate)| {
                    let (prompt_len, output_len) = self.lengths(l);
                    LlmWorkload {
                        llm: l.name.clone(),
                        rate,
                        prompt_len,
                        output_len,
                    }
                })
                .collect(),
            horizon_s: self.workload.horizon_s,
            seed: self.seed,
        })
    }

    pub fn placement_input(&self, extra_scale: f64) -> Result<PlacementInput, ConfigError> {
        let rates = self.rates(extra_scale)?;
        let mut llms = Vec::with_capacity(self.llms.len());
        for (l, rate) in self.llms.iter().zip(rates) {
            let (p, o) = self.lengths(l);
            llms.push(LlmDemand {
                name: l.name.clone(),
                spec: l.spec()?,
                rate,
                mean_prompt: p.mean().max(1.0),
                mean_output: o.mean().max(1.0),
            });
        }
        Ok(PlacementInput {
            cluster: self.cluster.cluster(),
            llms,
            profile: self.profile.clone(),
            kv: self.kv.clone(),
            options: self.placement.clone(),
        })
    }

    pub fn sim_llms(&self, extra_scale: f64) -> Result<Vec<SimLlm>, ConfigError> {
        let rates = self.rates(extra_scale)?;
        let mut out = Vec::with_capacity(self.llms.len());
        for (l, rate) in self.llms.iter().zip(rates) {
            let (p, o) = self.lengths(l);
            out.push(SimLlm {
                name: l.name.clone(),
                spec: l.spec()?,
                rate,
                mean_tokens: p.mean() + o.mean(),
            });
        }
        Ok(out)
    }

    pub fn sim_options(&self, scheduler: SchedulerKind) -> SimOptions {
        SimOptions {
            scheduler: SchedulerConfig {
                kind: scheduler,
                ..self.scheduler.clone()
            },
            profile: self.profile.clone(),
            kv: self.kv.clone(),
            gpu_memory_bytes: self.cluster.gpu_memory_gb * 1e9,
            horizon_s: self.workload.horizon_s,
            drain: self.drain,
            log_decisions: false,
            check_invariants: false,
            reference_single_gpu: self.slo_reference_single_gpu,
        }
    }
}

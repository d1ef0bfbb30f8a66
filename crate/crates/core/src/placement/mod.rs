//! Placement of LLMs onto device meshes: parallel candidates, mesh-group
//! enumeration, greedy placement and an exact branch-and-bound backend.

mod candidates;
mod greedy;
mod ilp;
mod mesh;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::{CostError, LatencyProfile, LlmSpec, TP_DEGREES};
use crate::kv_manager::{blocks_per_token, KvConfig, KvError, QuotaDemand};

pub use candidates::{estimate_alone, llm_parallel_candidates, max_batch_alone, CandidateSet};
pub use greedy::{greedy_place, unit_throughput};
pub use ilp::{ilp_assignments_brute_force, ilp_objective, ilp_place, IlpInstance};
pub use mesh::enumerate_mesh_groups;

#[derive(Debug, Error)]
pub enum PlacementError {
    #[error("LLM {llm} does not fit on any mesh of the cluster")]
    ModelTooLarge { llm: String },
    #[error("no mesh group can host all LLMs: {0}")]
    Infeasible(String),
    #[error("ILP has {dims} binary variables, above the limit of {max}")]
    IlpTooLarge { dims: usize, max: usize },
    #[error("invalid placement input: {0}")]
    Input(String),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Kv(#[from] KvError),
}

impl PlacementError {
    /// Whether the error means "no valid placement exists" rather than bad input.
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            PlacementError::ModelTooLarge { .. } | PlacementError::Infeasible(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub num_nodes: u32,
    pub gpus_per_node: u32,
    pub gpu_memory_bytes: f64,
}

impl Cluster {
    pub fn validate(&self) -> Result<(), PlacementError> {
        if self.num_nodes == 0 || self.gpus_per_node == 0 || self.gpu_memory_bytes.is_nan() || self.gpu_memory_bytes <= 0.0 {
            return Err(PlacementError::Input(
                "cluster needs >= 1 node, >= 1 GPU per node and positive memory".into(),
            ));
        }
        Ok(())
    }

    pub fn num_gpus(&self) -> u32 {
        self.num_nodes * self.gpus_per_node
    }
}

/// GPUs of one node serving a unit together.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mesh {
    pub node: u32,
    pub gpu_ids: Vec<u32>,
}

impl Mesh {
    pub fn size(&self) -> u32 {
        self.gpu_ids.len() as u32
    }

    pub fn memory_bytes(&self, cluster: &Cluster) -> f64 {
        self.size() as f64 * cluster.gpu_memory_bytes
    }
}

/// One LLM together with the workload it must serve.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmDemand {
    pub name: String,
    pub spec: LlmSpec,
    pub rate: f64,
    pub mean_prompt: f64,
    pub mean_output: f64,
}

impl LlmDemand {
    pub fn mean_tokens(&self) -> f64 {
        self.mean_prompt + self.mean_output
    }

    pub fn quota_demand(&self, kv: &KvConfig) -> QuotaDemand {
        QuotaDemand {
            rate: self.rate,
            blocks_per_token: blocks_per_token(&self.spec, kv.block_tokens),
            mean_tokens: self.mean_tokens(),
        }
    }

    /// Sort key for greedy placement: rate times a per-request FLOP proxy.
    pub fn computation(&self) -> f64 {
        self.rate * self.mean_tokens() * self.spec.num_layers as f64 * self.spec.hidden_size as f64
    }

    /// KV bytes of an average request at completion.
    pub fn request_kv_bytes(&self, kv: &KvConfig) -> f64 {
        crate::kv_manager::blocks_for_tokens(&self.spec, kv.block_tokens, self.mean_tokens().ceil() as u64) as f64
            * self.spec.head_dim as f64
            * self.spec.bytes_per_element as f64
            * kv.block_tokens as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementOptions {
    /// SM fractions tried per candidate, ascending.
    pub sm_list: Vec<f64>,
    /// Allowed tensor-parallel degrees, which are also the allowed mesh sizes.
    pub tp_list: Vec<u32>,
    pub ilp_max_dims: usize,
}

impl Default for PlacementOptions {
    fn default() -> Self {
        PlacementOptions {
            sm_list: (1..=10).map(|i| i as f64 / 10.0).collect(),
            tp_list: TP_DEGREES.to_vec(),
            ilp_max_dims: 20,
        }
    }
}

impl PlacementOptions {
    pub fn validate(&self) -> Result<(), PlacementError> {
        if self.sm_list.is_empty() || self.sm_list.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(PlacementError::Input("sm_list entries must lie in (0, 1]".into()));
        }
        if self.sm_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PlacementError::Input("sm_list must be strictly ascending".into()));
        }
        if self.tp_list.is_empty() || self.tp_list.iter().any(|t| !TP_DEGREES.contains(t)) {
            return Err(PlacementError::Input("tp_list entries must be 1, 2, 4 or 8".into()));
        }
        Ok(())
    }
}

/// Everything the planner needs.
#[derive(Debug, Clone)]
pub struct PlacementInput {
    pub cluster: Cluster,
    pub llms: Vec<LlmDemand>,
    pub profile: LatencyProfile,
    pub kv: KvConfig,
    pub options: PlacementOptions,
}

impl PlacementInput {
    pub fn validate(&self) -> Result<(), PlacementError> {
        self.cluster.validate()?;
        self.options.validate()?;
        self.profile.validate()?;
        self.kv.validate()?;
        if self.llms.is_empty() {
            return Err(PlacementError::Input("no LLMs to place".into()));
        }
        for (i, l) in self.llms.iter().enumerate() {
            l.spec.validate()?;
            if self.llms[..i].iter().any(|o| o.name == l.name) {
                return Err(PlacementError::Input(format!("duplicate LLM name {}", l.name)));
            }
            if !(l.rate.is_finite() && l.rate >= 0.0) || l.mean_prompt < 1.0 || l.mean_output < 1.0 {
                return Err(PlacementError::Input(format!("bad workload for {}", l.name)));
            }
        }
        Ok(())
    }

    /// Memory usable by weights and KV on a mesh.
    pub fn usable_bytes(&self, mesh_size: u32) -> f64 {
        mesh_size as f64 * self.cluster.gpu_memory_bytes * (1.0 - self.kv.activation_reserve)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParallelCandidate {
    pub tp_degree: u32,
    pub num_sm: f64,
    pub batch: u32,
    pub est_tpt: f64,
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitLlm {
    pub llm: String,
    pub candidate: ParallelCandidate,
    /// Estimated throughput of this LLM inside its unit.
    pub est_tpt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmUnit {
    pub mesh: Mesh,
    pub llms: Vec<UnitLlm>,
    pub est_tpt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Greedy,
    Ilp,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Greedy => "greedy",
            Backend::Ilp => "ilp",
        })
    }
}

impl FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "greedy" => Ok(Backend::Greedy),
            "ilp" => Ok(Backend::Ilp),
            other => Err(format!("unknown backend {other:?} (expected greedy or ilp)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementResult {
    pub backend: Backend,
    pub units: Vec<LlmUnit>,
    /// Sum of the estimated unit throughputs.
    pub est_total_tpt: f64,
    /// Rate-weighted candidate throughput, the exact backend's objective.
    pub objective: f64,
}

impl PlacementResult {
    pub fn unit_of(&self, llm: &str) -> Option<usize> {
        self.units.iter().position(|u| u.llms.iter().any(|l| l.llm == llm))
    }

    /// Re-check disjointness, coverage and memory independently of the solver.
    pub fn validate(&self, input: &PlacementInput) -> Result<(), PlacementError> {
        let mut seen_gpus = std::collections::HashSet::new();
        for u in &self.units {
            if u.mesh.gpu_ids.is_empty() {
                return Err(PlacementError::Infeasible("empty mesh".into()));
            }
            for g in &u.mesh.gpu_ids {
                if *g >= input.cluster.num_gpus() || g / input.cluster.gpus_per_node != u.mesh.node {
                    return Err(PlacementError::Infeasible(format!("gpu {g} not on node {}", u.mesh.node)));
                }
                if !seen_gpus.insert(*g) {
                    return Err(PlacementError::Infeasible(format!("gpu {g} used twice")));
                }
            }
            let mut weights = 0.0;
            for l in &u.llms {
                let d = input
                    .llms
                    .iter()
                    .find(|d| d.name == l.llm)
                    .ok_or_else(|| PlacementError::Infeasible(format!("unknown LLM {}", l.llm)))?;
                weights += d.spec.weight_bytes as f64;
                if l.candidate.tp_degree > u.mesh.size() {
                    return Err(PlacementError::Infeasible(format!("{} tp exceeds its mesh", l.llm)));
                }
            }
            if weights > input.usable_bytes(u.mesh.size()) {
                return Err(PlacementError::Infeasible("unit weights exceed mesh memory".into()));
            }
        }
        for d in &input.llms {
            let n = self
                .units
                .iter()
                .flat_map(|u| u.llms.iter())
                .filter(|l| l.llm == d.name)
                .count();
            if n != 1 {
                return Err(PlacementError::Infeasible(format!("{} placed {n} times", d.name)));
            }
        }
        Ok(())
    }
}

/// A solved assignment of LLM indices to the meshes of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub meshes: Vec<Mesh>,
    /// `mesh_of[i]` is the mesh index hosting LLM `i`.
    pub mesh_of: Vec<usize>,
}

impl Assignment {
    pub fn members(&self, mesh: usize) -> Vec<usize> {
        (0..self.mesh_of.len()).filter(|&i| self.mesh_of[i] == mesh).collect()
    }
}

/// Turn an assignment into units, computing estimates for reporting.
pub fn build_result(
    input: &PlacementInput,
    cands: &CandidateSet,
    asg: &Assignment,
    backend: Backend,
) -> Result<PlacementResult, PlacementError> {
    let mut units = Vec::new();
    let mut total = 0.0;
    for (j, mesh) in asg.meshes.iter().enumerate() {
        let members = asg.members(j);
        if members.is_empty() {
            continue;
        }
        let per_llm = unit_throughput(input, cands, mesh.size(), &members)?;
        let unit_tpt: f64 = per_llm.iter().sum();
        total += unit_tpt;
        units.push(LlmUnit {
            mesh: mesh.clone(),
            llms: members
                .iter()
                .zip(&per_llm)
                .map(|(&i, &t)| UnitLlm {
                    llm: input.llms[i].name.clone(),
                    candidate: *cands.get(i, mesh.size()).expect("assigned mesh has a candidate"),
                    est_tpt: t,
                })
                .collect(),
            est_tpt: unit_tpt,
        });
    }
    Ok(PlacementResult {
        backend,
        objective: ilp_objective(input, cands, asg),
        units,
        est_total_tpt: total,
    })
}

/// Search all mesh groups with `backend` and keep the best-scoring group.
/// Groups are scored by total estimated throughput under the greedy backend
/// and by the exact objective under the ILP backend.
pub fn place(input: &PlacementInput, backend: Backend) -> Result<PlacementResult, PlacementError> {
    input.validate()?;
    let cands = llm_parallel_candidates(input)?;
    let groups = enumerate_mesh_groups(input, &cands);
    if groups.is_empty() {
        return Err(PlacementError::Infeasible("every mesh group fails the memory pruning".into()));
    }
    let solved: Vec<Result<(f64, PlacementResult), PlacementError>> = groups
        .par_iter()
        .map(|meshes| {
            let asg = match backend {
                Backend::Greedy => greedy_place(input, &cands, meshes)?,
                Backend::Ilp => ilp_place(input, &cands, meshes)?,
            };
            let res = build_result(input, &cands, &asg, backend)?;
            let score = match backend {
                Backend::Greedy => res.est_total_tpt,
                Backend::Ilp => res.objective,
            };
            Ok((score, res))
        })
        .collect();
    let mut best: Option<(f64, PlacementResult)> = None;
    let mut last_err = None;
    for r in solved {
        match r {
            Ok((score, res)) => {
                if best.as_ref().is_none_or(|(s, _)| score > *s) {
                    best = Some((score, res));
                }
            }
            Err(e @ (PlacementError::Infeasible(_) | PlacementError::IlpTooLarge { .. })) => {
                log::debug!("skipping mesh group: {e}");
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    match best {
        Some((_, res)) => {
            res.validate(input)?;
            Ok(res)
        }
        None => Err(last_err.unwrap_or_else(|| PlacementError::Infeasible("no group solved".into()))),
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn single_llm_single_gpu() {
        let inp = input(1, 80.0, vec![demand("a", LlmSpec::llama_7b("a"), 1.0)]);
        let res = place(&inp, Backend::Greedy).unwrap();
        assert_eq!(res.units.len(), 1);
        assert_eq!(res.units[0].mesh.gpu_ids, vec![0]);
        let ilp = place(&inp, Backend::Ilp).unwrap();
        assert_eq!(ilp.units, res.units);
    }

    #[test]
    fn too_large_model_is_infeasible() {
        let inp = input(1, 16.0, vec![demand("big", LlmSpec::llama_13b("big"), 1.0)]);
        let err = place(&inp, Backend::Greedy).unwrap_err();
        assert!(err.is_infeasible(), "{err}");
        assert!(err.to_string().contains("big"));
    }

    #[test]
    fn placement_is_deterministic() {
        let llms = vec![
            demand("a", LlmSpec::llama_7b("a"), 3.0),
            demand("b", LlmSpec::llama_7b("b"), 1.0),
            demand("c", LlmSpec::llama_13b("c"), 0.5),
        ];
        let inp = input(4, 40.0, llms);
        let a = place(&inp, Backend::Greedy).unwrap();
        let b = place(&inp, Backend::Greedy).unwrap();
        assert_eq!(a, b);
        a.validate(&inp).unwrap();
        let c = place(&inp, Backend::Ilp).unwrap();
        c.validate(&inp).unwrap();
    }

    #[test]
    fn validate_rejects_double_placement() {
        let inp = input(2, 80.0, vec![demand("a", LlmSpec::llama_7b("a"), 1.0)]);
        let mut res = place(&inp, Backend::Greedy).unwrap();
        let mut dup = res.units[0].clone();
        dup.mesh = Mesh { node: 0, gpu_ids: vec![1] };
        res.units.push(dup);
        assert!(res.validate(&inp).is_err());
    }

    #[test]
    fn backend_parse() {
        assert_eq!("ilp".parse::<Backend>().unwrap(), Backend::Ilp);
        assert!("magic".parse::<Backend>().is_err());
    }
}

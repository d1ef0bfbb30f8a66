use crate::cost_model::{ExecConfig, ThroughputEstimate, ThroughputQuery};

use super::{LlmDemand, ParallelCandidate, PlacementError, PlacementInput};

/// Per-LLM parallel candidates, at most one per tensor-parallel degree.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    tp_list: Vec<u32>,
    by_llm: Vec<Vec<Option<ParallelCandidate>>>,
}

impl CandidateSet {
    pub fn get(&self, llm: usize, tp: u32) -> Option<&ParallelCandidate> {
        let k = self.tp_list.iter().position(|t| *t == tp)?;
        self.by_llm.get(llm)?.get(k)?.as_ref()
    }

    pub fn of(&self, llm: usize) -> impl Iterator<Item = &ParallelCandidate> {
        self.by_llm[llm].iter().flatten()
    }

    pub fn num_llms(&self) -> usize {
        self.by_llm.len()
    }
}

/// Requests of average length that fit in the KV space left on a mesh of
/// size `tp` holding only this LLM; `None` if not even one does.
pub fn max_batch_alone(input: &PlacementInput, d: &LlmDemand, tp: u32) -> Option<u32> {
    let kv = input.usable_bytes(tp) - d.spec.weight_bytes as f64;
    let per_req = d.request_kv_bytes(&input.kv);
    if kv < per_req || per_req <= 0.0 {
        return None;
    }
    Some((kv / per_req).floor().min(u32::MAX as f64) as u32)
}

/// Stable-batch estimate of `d` alone at `(tp, sm)`.
pub fn estimate_alone(
    input: &PlacementInput,
    d: &LlmDemand,
    tp: u32,
    sm: f64,
    max_batch: u32,
) -> Result<ThroughputEstimate, PlacementError> {
    let q = ThroughputQuery {
        spec: &d.spec,
        exec: ExecConfig::new(tp, sm)?,
        rate: d.rate,
        prompt_len: d.mean_prompt,
        gen_len: d.mean_output,
        peers: &[],
        max_batch,
    };
    Ok(input.profile.estimate_throughput(&q)?)
}

/// For every LLM and tp degree, the smallest SM fraction in the search list
/// whose estimate keeps up with the LLM's rate, or the largest fraction
/// flagged saturated when none does.
pub fn llm_parallel_candidates(input: &PlacementInput) -> Result<CandidateSet, PlacementError> {
    let tp_list: Vec<u32> = input
        .options
        .tp_list
        .iter()
        .copied()
        .filter(|tp| *tp <= input.cluster.gpus_per_node)
        .collect();
    let mut by_llm = Vec::with_capacity(input.llms.len());
    for d in &input.llms {
        let mut row = Vec::with_capacity(tp_list.len());
        for &tp in &tp_list {
            let Some(max_batch) = max_batch_alone(input, d, tp) else {
                row.push(None);
                continue;
            };
            let mut chosen = None;
            let mut last = None;
            for &sm in &input.options.sm_list {
                let est = estimate_alone(input, d, tp, sm, max_batch)?;
                if !est.saturated {
                    chosen = Some((sm, est));
                    break;
                }
                last = Some((sm, est));
            }
            let (sm, est) = chosen.or(last).expect("sm_list is non-empty");
            row.push(Some(ParallelCandidate {
                tp_degree: tp,
                num_sm: sm,
                batch: est.batch,
                est_tpt: est.throughput,
                saturated: est.saturated,
            }));
        }
        if row.iter().all(Option::is_none) {
            return Err(PlacementError::ModelTooLarge { llm: d.name.clone() });
        }
        by_llm.push(row);
    }
    Ok(CandidateSet { tp_list, by_llm })
}

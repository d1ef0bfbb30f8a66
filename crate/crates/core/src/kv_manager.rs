//! Unified KV memory of an LLM unit: memory partitions, a head-wise block
//! pool shared by all colocated models, and per-model token-block quotas.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::LlmSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exhausted {
    Pool,
    Quota,
}

#[derive(Debug, Error, PartialEq)]
pub enum KvError {
    #[error("insufficient KV blocks ({0:?})")]
    Insufficient(Exhausted),
    #[error("unknown request {0}")]
    UnknownRequest(u64),
    #[error("request {req} already belongs to llm {owner}")]
    WrongOwner { req: u64, owner: usize },
    #[error("unknown llm index {0}")]
    UnknownLlm(usize),
    #[error("mesh memory {mesh:.3e} B cannot hold weights {weights:.3e} B plus activations {activations:.3e} B")]
    Layout { mesh: f64, weights: f64, activations: f64 },
    #[error("invalid kv config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KvConfig {
    /// Tokens held by one head-block.
    pub block_tokens: u32,
    /// Fraction of mesh memory reserved for activations.
    pub activation_reserve: f64,
    /// Minimum quota per LLM as a fraction of the pool.
    pub quota_floor: f64,
    /// Share of an LLM's admission budget kept free when it admits more
    /// requests, so admitted requests can grow before eviction.
    pub admit_headroom: f64,
    pub low_mark: f64,
    pub high_mark: f64,
    /// Fraction of a donor's quota given up per adaptation.
    pub step: f64,
    pub period_s: f64,
}

impl Default for KvConfig {
    fn default() -> Self {
        KvConfig {
            block_tokens: 16,
            activation_reserve: 0.1,
            quota_floor: 0.02,
            admit_headroom: 0.1,
            low_mark: 0.5,
            high_mark: 0.9,
            step: 0.1,
            period_s: 10.0,
        }
    }
}

impl KvConfig {
    pub fn validate(&self) -> Result<(), KvError> {
        let frac = |x: f64| x.is_finite() && (0.0..1.0).contains(&x);
        if self.block_tokens == 0 {
            return Err(KvError::Config("block_tokens must be >= 1".into()));
        }
        if !frac(self.activation_reserve) || !frac(self.quota_floor) || !frac(self.step) || !frac(self.admit_headroom) {
            return Err(KvError::Config(
                "activation_reserve, quota_floor, admit_headroom and step must lie in [0, 1)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.low_mark) || !(0.0..=1.0).contains(&self.high_mark) || self.low_mark > self.high_mark {
            return Err(KvError::Config(format!(
                "need 0 <= low_mark <= high_mark <= 1, got {} and {}",
                self.low_mark, self.high_mark
            )));
        }
        if !(self.period_s.is_finite() && self.period_s > 0.0) {
            return Err(KvError::Config("period_s must be > 0".into()));
        }
        Ok(())
    }
}

/// Weights, activation reserve and KV cache carved out of one mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryLayout {
    pub mesh_bytes: f64,
    pub weights_bytes: f64,
    pub activation_reserve_bytes: f64,
    pub kv_bytes: f64,
}

impl MemoryLayout {
    pub fn new(mesh_bytes: f64, specs: &[&LlmSpec], activation_reserve: f64) -> Result<Self, KvError> {
        let weights: f64 = specs.iter().map(|s| s.weight_bytes as f64).sum();
        let activations = mesh_bytes * activation_reserve;
        let kv = mesh_bytes - weights - activations;
        if kv < 0.0 {
            return Err(KvError::Layout {
                mesh: mesh_bytes,
                weights,
                activations,
            });
        }
        Ok(MemoryLayout {
            mesh_bytes,
            weights_bytes: weights,
            activation_reserve_bytes: activations,
            kv_bytes: kv,
        })
    }
}

/// Head-blocks a model needs per token, amortised over the block size.
pub fn blocks_per_token(spec: &LlmSpec, block_tokens: u32) -> f64 {
    head_blocks_per_slot(spec) as f64 / block_tokens as f64
}

/// K and V for every (layer, head): the number of head-blocks that one
/// block-sized slice of tokens occupies.
pub fn head_blocks_per_slot(spec: &LlmSpec) -> u64 {
    2 * spec.num_layers as u64 * spec.num_heads as u64
}

/// Whole blocks needed to hold `tokens` tokens of `spec`.
pub fn blocks_for_tokens(spec: &LlmSpec, block_tokens: u32, tokens: u64) -> u64 {
    head_blocks_per_slot(spec) * tokens.div_ceil(block_tokens as u64)
}

/// Size of one head-block; sized for the widest head on the unit.
pub fn block_bytes(specs: &[&LlmSpec], block_tokens: u32) -> u64 {
    specs
        .iter()
        .map(|s| s.head_dim as u64 * s.bytes_per_element as u64)
        .max()
        .unwrap_or(0)
        * block_tokens as u64
}

#[derive(Debug, Clone)]
struct LlmSlot {
    name: String,
    slot_blocks: u64,
    quota: u64,
    used: u64,
    // Time integrals in block·ms: since the last drain, and since time zero.
    used_area: f64,
    used_area_total: f64,
}

#[derive(Debug, Clone)]
struct Allocation {
    llm: usize,
    tokens: u64,
    extents: Vec<Range<u64>>,
}

impl Allocation {
    fn blocks(&self) -> u64 {
        self.extents.iter().map(|r| r.end - r.start).sum()
    }
}

/// Shared pool of head-blocks with per-model quotas.
#[derive(Debug, Clone)]
pub struct BlockPool {
    block_tokens: u32,
    block_bytes: u64,
    total: u64,
    free_count: u64,
    // start -> end of free extents; adjacent extents are merged.
    free: BTreeMap<u64, u64>,
    llms: Vec<LlmSlot>,
    requests: HashMap<u64, Allocation>,
    clock_ms: f64,
    window_start_ms: f64,
}

impl BlockPool {
    /// `llms` are `(name, spec)` pairs; quotas start at the whole pool.
    pub fn new(total_blocks: u64, block_bytes: u64, block_tokens: u32, llms: &[(&str, &LlmSpec)]) -> Self {
        let mut free = BTreeMap::new();
        if total_blocks > 0 {
            free.insert(0, total_blocks);
        }
        BlockPool {
            block_tokens,
            block_bytes,
            total: total_blocks,
            free_count: total_blocks,
            free,
            llms: llms
                .iter()
                .map(|(name, spec)| LlmSlot {
                    name: name.to_string(),
                    slot_blocks: head_blocks_per_slot(spec),
                    quota: total_blocks,
                    used: 0,
                    used_area: 0.0,
                    used_area_total: 0.0,
                })
                .collect(),
            requests: HashMap::new(),
            clock_ms: 0.0,
            window_start_ms: 0.0,
        }
    }

    /// Pool sized from a memory layout.
    pub fn for_layout(layout: &MemoryLayout, block_tokens: u32, llms: &[(&str, &LlmSpec)]) -> Self {
        let specs: Vec<&LlmSpec> = llms.iter().map(|(_, s)| *s).collect();
        let bb = block_bytes(&specs, block_tokens);
        let total = if bb == 0 { 0 } else { (layout.kv_bytes / bb as f64).floor() as u64 };
        Self::new(total, bb, block_tokens, llms)
    }

    pub fn total_blocks(&self) -> u64 {
        self.total
    }
    pub fn free_blocks(&self) -> u64 {
        self.free_count
    }
    pub fn block_bytes(&self) -> u64 {
        self.block_bytes
    }
    pub fn block_tokens(&self) -> u32 {
        self.block_tokens
    }
    pub fn num_llms(&self) -> usize {
        self.llms.len()
    }
    pub fn name(&self, llm: usize) -> &str {
        &self.llms[llm].name
    }
    pub fn quota(&self, llm: usize) -> u64 {
        self.llms[llm].quota
    }
    pub fn quotas(&self) -> Vec<u64> {
        self.llms.iter().map(|l| l.quota).collect()
    }
    pub fn used(&self, llm: usize) -> u64 {
        self.llms[llm].used
    }
    pub fn holds(&self, req: u64) -> bool {
        self.requests.contains_key(&req)
    }
    pub fn request_blocks(&self, req: u64) -> Option<u64> {
        self.requests.get(&req).map(Allocation::blocks)
    }

    /// Blocks `llm` needs to hold `tokens` tokens.
    pub fn blocks_for(&self, llm: usize, tokens: u64) -> u64 {
        self.llms[llm].slot_blocks * tokens.div_ceil(self.block_tokens as u64)
    }

    pub fn set_quotas(&mut self, quotas: &[u64]) -> Result<(), KvError> {
        if quotas.len() != self.llms.len() {
            return Err(KvError::Config(format!(
                "{} quotas for {} llms",
                quotas.len(),
                self.llms.len()
            )));
        }
        for (l, q) in self.llms.iter_mut().zip(quotas) {
            l.quota = *q;
        }
        Ok(())
    }

    /// Whether `blocks` more blocks may be handed to `llm`. With
    /// `enforce_quota`, an LLM holding nothing may still exceed its quota so
    /// that it cannot starve.
    pub fn check_admit(&self, llm: usize, blocks: u64, enforce_quota: bool) -> Result<(), KvError> {
        let slot = self.llms.get(llm).ok_or(KvError::UnknownLlm(llm))?;
        if blocks > self.free_count {
            return Err(KvError::Insufficient(Exhausted::Pool));
        }
        if enforce_quota && slot.used > 0 && slot.used + blocks > slot.quota {
            return Err(KvError::Insufficient(Exhausted::Quota));
        }
        Ok(())
    }

    /// Blocks `req` of `llm` needs to grow by `n_tokens`.
    pub fn growth_blocks(&self, llm: usize, req: u64, n_tokens: u64) -> u64 {
        let before = self.requests.get(&req).map_or(0, |a| a.tokens);
        self.blocks_for(llm, before + n_tokens) - self.blocks_for(llm, before)
    }

    /// Grow `req` by `n_tokens`, failing atomically if the pool or the LLM's
    /// quota cannot cover the new blocks.
    pub fn alloc(&mut self, llm: usize, req: u64, n_tokens: u64) -> Result<u64, KvError> {
        self.grow(llm, req, n_tokens, true)
    }

    /// Like [`alloc`](Self::alloc) but checks the pool only.
    pub fn extend(&mut self, llm: usize, req: u64, n_tokens: u64) -> Result<u64, KvError> {
        self.grow(llm, req, n_tokens, false)
    }

    fn grow(&mut self, llm: usize, req: u64, n_tokens: u64, check_quota: bool) -> Result<u64, KvError> {
        if llm >= self.llms.len() {
            return Err(KvError::UnknownLlm(llm));
        }
        let tokens_before = match self.requests.get(&req) {
            Some(a) if a.llm != llm => return Err(KvError::WrongOwner { req, owner: a.llm }),
            Some(a) => a.tokens,
            None => 0,
        };
        let need = self.blocks_for(llm, tokens_before + n_tokens) - self.blocks_for(llm, tokens_before);
        if need > self.free_count {
            return Err(KvError::Insufficient(Exhausted::Pool));
        }
        if check_quota && self.llms[llm].used + need > self.llms[llm].quota {
            return Err(KvError::Insufficient(Exhausted::Quota));
        }
        let got = self.take(need);
        let alloc = self.requests.entry(req).or_insert(Allocation {
            llm,
            tokens: 0,
            extents: Vec::new(),
        });
        alloc.tokens += n_tokens;
        alloc.extents.extend(got);
        self.llms[llm].used += need;
        Ok(need)
    }

    // Lowest-address first fit; caller has checked `n <= free_count`.
    fn take(&mut self, mut n: u64) -> Vec<Range<u64>> {
        let mut out = Vec::new();
        while n > 0 {
            let (&start, &end) = self.free.iter().next().expect("free count out of sync");
            let len = end - start;
            self.free.remove(&start);
            if len > n {
                self.free.insert(start + n, end);
                out.push(start..start + n);
                n = 0;
            } else {
                out.push(start..end);
                n -= len;
            }
        }
        let taken: u64 = out.iter().map(|r| r.end - r.start).sum();
        self.free_count -= taken;
        out
    }

    fn give_back(&mut self, r: Range<u64>) {
        let (mut start, mut end) = (r.start, r.end);
        if let Some((&ps, &pe)) = self.free.range(..start).next_back() {
            if pe == start {
                self.free.remove(&ps);
                start = ps;
            }
        }
        if let Some(&ne) = self.free.get(&end) {
            self.free.remove(&end);
            end = ne;
        }
        self.free.insert(start, end);
        self.free_count += r.end - r.start;
    }

    /// Release every block of `req`.
    pub fn free(&mut self, req: u64) -> Result<u64, KvError> {
        let alloc = self.requests.remove(&req).ok_or(KvError::UnknownRequest(req))?;
        let blocks = alloc.blocks();
        let slot = &mut self.llms[alloc.llm];
        slot.used -= blocks;
        for r in alloc.extents {
            self.give_back(r);
        }
        Ok(blocks)
    }

    /// Advance the utilisation clock; call before mutating at time `now_ms`.
    pub fn advance_clock(&mut self, now_ms: f64) {
        let dt = now_ms - self.clock_ms;
        if dt > 0.0 {
            for l in &mut self.llms {
                l.used_area += l.used as f64 * dt;
                l.used_area_total += l.used as f64 * dt;
            }
            self.clock_ms = now_ms;
        }
    }

    /// Time-averaged blocks held over quota since the previous call, per LLM.
    pub fn drain_utilization(&mut self, now_ms: f64) -> Vec<f64> {
        self.advance_clock(now_ms);
        let span = self.clock_ms - self.window_start_ms;
        let out = self
            .llms
            .iter_mut()
            .map(|l| {
                let u = if span > 0.0 && l.quota > 0 {
                    (l.used_area / span / l.quota as f64).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                l.used_area = 0.0;
                u
            })
            .collect();
        self.window_start_ms = self.clock_ms;
        out
    }

    /// Time-averaged blocks held per LLM since time zero.
    pub fn mean_used(&self) -> Vec<f64> {
        self.llms
            .iter()
            .map(|l| if self.clock_ms > 0.0 { l.used_area_total / self.clock_ms } else { 0.0 })
            .collect()
    }

    /// Verify conservation and exclusive ownership. Linear in pool extents.
    pub fn check_invariants(&self) -> Result<(), String> {
        let used: u64 = self.llms.iter().map(|l| l.used).sum();
        if used + self.free_count != self.total {
            return Err(format!("used {used} + free {} != total {}", self.free_count, self.total));
        }
        let free_sum: u64 = self.free.iter().map(|(s, e)| e - s).sum();
        if free_sum != self.free_count {
            return Err(format!("free list holds {free_sum}, counter says {}", self.free_count));
        }
        let mut spans: Vec<(u64, u64)> = self.free.iter().map(|(s, e)| (*s, *e)).collect();
        let mut per_llm = vec![0u64; self.llms.len()];
        for a in self.requests.values() {
            per_llm[a.llm] += a.blocks();
            spans.extend(a.extents.iter().map(|r| (r.start, r.end)));
        }
        if per_llm.iter().zip(&self.llms).any(|(b, l)| *b != l.used) {
            return Err("per-llm used counters disagree with block tables".into());
        }
        spans.sort_unstable();
        let mut cursor = 0;
        for (s, e) in spans {
            if s != cursor {
                return Err(format!("block range gap or overlap at {s} (expected {cursor})"));
            }
            cursor = e;
        }
        if cursor != self.total {
            return Err(format!("ranges end at {cursor}, pool has {}", self.total));
        }
        Ok(())
    }
}

/// Demand inputs for one LLM's initial quota.
#[derive(Debug, Clone, Copy)]
pub struct QuotaDemand {
    pub rate: f64,
    pub blocks_per_token: f64,
    /// Mean prompt plus output length.
    pub mean_tokens: f64,
}

impl QuotaDemand {
    pub fn weight(&self) -> f64 {
        (self.rate * self.blocks_per_token * self.mean_tokens).max(0.0)
    }
}

fn floor_blocks(n: usize, kv_blocks: u64, floor_frac: f64) -> u64 {
    if n == 0 {
        return 0;
    }
    (floor_frac.min(1.0 / n as f64) * kv_blocks as f64).floor() as u64
}

/// Split `total` in proportion to `weights` with largest-remainder rounding.
/// Falls back to an even split when all weights are zero.
pub fn apportion(weights: &[f64], total: u64) -> Vec<u64> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let sum: f64 = weights.iter().sum();
    let shares: Vec<f64> = if sum > 0.0 {
        weights.iter().map(|w| w / sum * total as f64).collect()
    } else {
        vec![total as f64 / n as f64; n]
    };
    let mut out: Vec<u64> = shares.iter().map(|s| s.floor() as u64).collect();
    let assigned: u64 = out.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ra = shares[a] - shares[a].floor();
        let rb = shares[b] - shares[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned) as usize) {
        out[i] += 1;
    }
    out
}

/// Initial quotas proportional to expected KV demand, each at least the
/// floor, summing exactly to `kv_blocks`.
pub fn init_token_block_quota(demands: &[QuotaDemand], kv_blocks: u64, floor_frac: f64) -> Vec<u64> {
    let n = demands.len();
    if n == 0 {
        return Vec::new();
    }
    let floor = floor_blocks(n, kv_blocks, floor_frac);
    let weights: Vec<f64> = demands.iter().map(QuotaDemand::weight).collect();
    let mut pinned = vec![false; n];
    // Water-fill: pin LLMs whose proportional share falls below the floor.
    loop {
        let free_blocks = kv_blocks - floor * pinned.iter().filter(|p| **p).count() as u64;
        let w_sum: f64 = (0..n).filter(|&i| !pinned[i]).map(|i| weights[i]).sum();
        let mut changed = false;
        for i in 0..n {
            if pinned[i] {
                continue;
            }
            let share = if w_sum > 0.0 {
                weights[i] / w_sum * free_blocks as f64
            } else {
                free_blocks as f64 / (0..n).filter(|&j| !pinned[j]).count() as f64
            };
            if share < floor as f64 {
                pinned[i] = true;
                changed = true;
            }
        }
        if !changed || pinned.iter().all(|p| *p) {
            break;
        }
    }
    let free_idx: Vec<usize> = (0..n).filter(|&i| !pinned[i]).collect();
    let mut quotas = vec![floor; n];
    let rest = kv_blocks - floor * (n - free_idx.len()) as u64;
    if free_idx.is_empty() {
        // Everyone pinned: hand the remainder out evenly.
        let extra = apportion(&vec![1.0; n], kv_blocks - floor * n as u64);
        for (q, e) in quotas.iter_mut().zip(extra) {
            *q += e;
        }
    } else {
        let w: Vec<f64> = free_idx.iter().map(|&i| weights[i]).collect();
        for (k, q) in apportion(&w, rest).into_iter().enumerate() {
            quotas[free_idx[k]] = q;
        }
    }
    quotas
}

/// One adaptation step: LLMs below `low_mark` utilisation donate a `step`
/// fraction of their quota (never dropping below the floor) to LLMs above
/// `high_mark`, split in proportion to how far each is above the mark.
pub fn adapt_quota(utilizations: &[f64], quotas: &[u64], cfg: &KvConfig) -> Vec<u64> {
    let n = quotas.len();
    let total: u64 = quotas.iter().sum();
    let floor = floor_blocks(n, total, cfg.quota_floor);
    let receivers: Vec<usize> = (0..n).filter(|&i| utilizations[i] > cfg.high_mark).collect();
    let mut out = quotas.to_vec();
    if receivers.is_empty() {
        return out;
    }
    let mut pot = 0u64;
    for i in 0..n {
        if utilizations[i] < cfg.low_mark {
            let give = ((quotas[i] as f64 * cfg.step).floor() as u64).min(quotas[i].saturating_sub(floor));
            out[i] -= give;
            pot += give;
        }
    }
    if pot == 0 {
        return out;
    }
    let weights: Vec<f64> = receivers
        .iter()
        .map(|&i| (utilizations[i] - cfg.high_mark) * quotas[i].max(1) as f64)
        .collect();
    for (k, add) in apportion(&weights, pot).into_iter().enumerate() {
        out[receivers[k]] += add;
    }
    out
}

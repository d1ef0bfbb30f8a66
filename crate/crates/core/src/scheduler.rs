//! Job scheduling inside one LLM unit: adaptive batch scheduling (ADBS)
//! plus first-come-first-serve and round-robin baselines.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::kv_manager::BlockPool;

const SM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Adbs,
    Fcfs,
    RoundRobin,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 3] = [SchedulerKind::Adbs, SchedulerKind::RoundRobin, SchedulerKind::Fcfs];

    /// Whether per-LLM token-block quotas apply.
    pub fn uses_quotas(self) -> bool {
        self == SchedulerKind::Adbs
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchedulerKind::Adbs => "adbs",
            SchedulerKind::Fcfs => "fcfs",
            SchedulerKind::RoundRobin => "round_robin",
        })
    }
}

impl FromStr for SchedulerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adbs" => Ok(SchedulerKind::Adbs),
            "fcfs" => Ok(SchedulerKind::Fcfs),
            "round_robin" | "rr" => Ok(SchedulerKind::RoundRobin),
            other => Err(format!("unknown scheduler {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub kind: SchedulerKind,
    /// Upper bound on prompt tokens in one prefill job.
    pub prefill_token_budget: u64,
    /// Smallest SM share a prefill job may start with.
    pub prefill_min_sm: f64,
    /// Colocation interference coefficient.
    pub kappa: f64,
    /// Fairness tolerance on normalized block usage.
    pub epsilon: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            kind: SchedulerKind::Adbs,
            prefill_token_budget: 4096,
            prefill_min_sm: 0.3,
            kappa: 0.1,
            epsilon: 0.15,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.prefill_token_budget == 0 {
            return Err("prefill_token_budget must be >= 1".into());
        }
        if !(self.prefill_min_sm > 0.0 && self.prefill_min_sm <= 1.0) {
            return Err("prefill_min_sm must lie in (0, 1]".into());
        }
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return Err("kappa must be >= 0".into());
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err("epsilon must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Prefill,
    Decode,
}

/// A job chosen for launch. `requests` index into [`UnitState::reqs`].
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub llm: usize,
    pub kind: JobKind,
    pub requests: Vec<usize>,
    pub sm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Waiting,
    Prefilling,
    Decoding,
    Done,
}

#[derive(Debug, Clone)]
pub struct ReqState {
    pub id: u64,
    pub llm: usize,
    pub arrival_ms: f64,
    pub prompt_len: u32,
    pub output_len: u32,
    pub generated: u32,
    /// KV blocks the request holds once all its tokens exist.
    pub footprint: u64,
    /// Times the request was evicted and sent back to the queue.
    pub preemptions: u32,
    pub first_token_ms: Option<f64>,
    pub done_ms: Option<f64>,
    pub phase: Phase,
}

impl ReqState {
    /// Tokens a prefill of this request processes: the prompt plus anything
    /// generated before an eviction.
    pub fn context_tokens(&self) -> u64 {
        self.prompt_len as u64 + self.generated as u64
    }
}

#[derive(Debug, Clone, Default)]
pub struct LlmQueues {
    /// Arrived, not yet prefilled, FIFO.
    pub waiting: VecDeque<usize>,
    /// Prefilled and idle between decode steps, in admission order.
    pub ready: Vec<usize>,
    /// A job of this LLM is executing.
    pub busy: bool,
}

/// What the scheduler sees of a unit.
#[derive(Debug, Clone, Default)]
pub struct UnitState {
    pub llms: Vec<LlmQueues>,
    pub reqs: Vec<ReqState>,
    pub running_sm: f64,
    pub running_jobs: usize,
    pub prefill_running: bool,
}

impl UnitState {
    pub fn free_sm(&self) -> f64 {
        (1.0 - self.running_sm).max(0.0)
    }

    fn oldest_unfinished(&self, llm: usize) -> Option<(f64, u64)> {
        let q = &self.llms[llm];
        q.waiting
            .iter()
            .chain(q.ready.iter())
            .map(|&r| (self.reqs[r].arrival_ms, self.reqs[r].id))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
    }
}

/// Why a prefill could not start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Blocked {
    Sm,
    Kv,
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    pub cfg: SchedulerConfig,
    /// SM share of one decode job.
    pub decode_sm: f64,
    /// Fraction of the admission budget kept free for decode growth.
    pub admit_headroom: f64,
    pub prefill_waiting: bool,
    prefill_cursor: usize,
    decode_cursor: usize,
    rr_cursor: usize,
    /// Set when the last ADBS round ended with a blocked prefill.
    pub last_block: Option<(usize, Blocked)>,
}

impl Scheduler {
    pub fn new(cfg: SchedulerConfig, decode_sm: f64, admit_headroom: f64) -> Self {
        Scheduler {
            cfg,
            decode_sm,
            admit_headroom,
            prefill_waiting: false,
            prefill_cursor: 0,
            decode_cursor: 0,
            rr_cursor: 0,
            last_block: None,
        }
    }

    pub fn schedule(&mut self, st: &UnitState, pool: &BlockPool) -> Vec<Job> {
        match self.cfg.kind {
            SchedulerKind::Adbs => self.adbs(st, pool),
            SchedulerKind::Fcfs => self.fcfs(st, pool),
            SchedulerKind::RoundRobin => self.round_robin(st, pool),
        }
    }

    /// FIFO prefix of the waiting queue that fits the token budget and whose
    /// first-token KV blocks are admissible while leaving `admit_headroom`
    /// of the quota (or of the pool, without quotas) free for growth. Empty
    /// if the head itself is not admissible.
    pub fn prefill_batch(&self, st: &UnitState, pool: &BlockPool, llm: usize, enforce_quota: bool) -> Vec<usize> {
        let budget = if enforce_quota { pool.quota(llm) } else { pool.total_blocks() };
        let headroom = (self.admit_headroom * budget as f64).floor() as u64;
        let mut batch = Vec::new();
        let mut tokens = 0u64;
        let mut blocks = 0u64;
        for &r in &st.llms[llm].waiting {
            let req = &st.reqs[r];
            let ctx = req.context_tokens();
            if !batch.is_empty() && tokens + ctx > self.cfg.prefill_token_budget {
                break;
            }
            let need = pool.blocks_for(llm, ctx + 1);
            // An idle LLM may always take its head request.
            let head = if pool.used(llm) == 0 && batch.is_empty() { 0 } else { headroom };
            let ok = if batch.is_empty() {
                pool.check_admit(llm, need + head, enforce_quota).is_ok()
            } else {
                let pool_ok = pool.check_admit(llm, blocks + need + head, false).is_ok();
                let quota_ok = !enforce_quota || pool.used(llm) + blocks + need + head <= pool.quota(llm);
                pool_ok && quota_ok
            };
            if !ok {
                break;
            }
            tokens += ctx;
            blocks += need;
            batch.push(r);
        }
        batch
    }

    fn next_job_of(&self, st: &UnitState, pool: &BlockPool, llm: usize, sm: f64, enforce_quota: bool) -> Option<Job> {
        let q = &st.llms[llm];
        if q.busy {
            return None;
        }
        if !q.waiting.is_empty() {
            let batch = self.prefill_batch(st, pool, llm, enforce_quota);
            if !batch.is_empty() {
                return Some(Job {
                    llm,
                    kind: JobKind::Prefill,
                    requests: batch,
                    sm,
                });
            }
        }
        if !q.ready.is_empty() {
            return Some(Job {
                llm,
                kind: JobKind::Decode,
                requests: q.ready.clone(),
                sm,
            });
        }
        None
    }

    /// The mesh goes to the LLM owning the oldest unfinished request, one
    /// job at a time; within the LLM new prefills take precedence over
    /// decode steps (continuous batching).
    fn fcfs(&mut self, st: &UnitState, pool: &BlockPool) -> Vec<Job> {
        if st.running_jobs > 0 {
            return Vec::new();
        }
        let mut order: Vec<(f64, u64, usize)> = (0..st.llms.len())
            .filter_map(|m| st.oldest_unfinished(m).map(|(t, id)| (t, id, m)))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order
            .into_iter()
            .find_map(|(_, _, m)| self.next_job_of(st, pool, m, 1.0, false))
            .into_iter()
            .collect()
    }

    /// LLMs take turns holding the whole mesh for one job each.
    fn round_robin(&mut self, st: &UnitState, pool: &BlockPool) -> Vec<Job> {
        if st.running_jobs > 0 {
            return Vec::new();
        }
        let n = st.llms.len();
        for k in 0..n {
            let m = (self.rr_cursor + k) % n;
            if let Some(job) = self.next_job_of(st, pool, m, 1.0, false) {
                self.rr_cursor = (m + 1) % n;
                return vec![job];
            }
        }
        Vec::new()
    }

    /// One ADBS round: a prefill first if none is executing, then decode
    /// steps round-robin while SMs remain, unless a prefill is waiting.
    fn adbs(&mut self, st: &UnitState, pool: &BlockPool) -> Vec<Job> {
        let n = st.llms.len();
        let mut jobs = Vec::new();
        let mut free = st.free_sm();
        let mut busy: Vec<bool> = st.llms.iter().map(|q| q.busy).collect();
        self.last_block = None;

        if !st.prefill_running {
            self.prefill_waiting = true;
            let pick = (0..n)
                .map(|k| (self.prefill_cursor + k) % n)
                .find(|&m| !busy[m] && !st.llms[m].waiting.is_empty());
            match pick {
                None => self.prefill_waiting = false,
                Some(m) => {
                    // A blocked LLM forfeits its turn so others are not held up.
                    self.prefill_cursor = (m + 1) % n;
                    if free + SM_EPS < self.cfg.prefill_min_sm {
                        self.last_block = Some((m, Blocked::Sm));
                    } else {
                        let batch = self.prefill_batch(st, pool, m, true);
                        if batch.is_empty() {
                            self.last_block = Some((m, Blocked::Kv));
                        } else {
                            jobs.push(Job {
                                llm: m,
                                kind: JobKind::Prefill,
                                requests: batch,
                                sm: free,
                            });
                            busy[m] = true;
                            free = 0.0;
                            self.prefill_waiting = false;
                        }
                    }
                }
            }
            // Nothing executing means nothing can free resources for the
            // waiting prefill; let decodes run instead of stalling.
            if self.prefill_waiting && st.running_jobs == 0 {
                self.prefill_waiting = false;
            }
        }

        if !self.prefill_waiting {
            let start = self.decode_cursor;
            for k in 0..n {
                if free + SM_EPS < self.decode_sm {
                    break;
                }
                let m = (start + k) % n;
                if busy[m] || st.llms[m].ready.is_empty() {
                    continue;
                }
                jobs.push(Job {
                    llm: m,
                    kind: JobKind::Decode,
                    requests: st.llms[m].ready.clone(),
                    sm: self.decode_sm,
                });
                busy[m] = true;
                free -= self.decode_sm;
                self.decode_cursor = (m + 1) % n;
            }
        }
        jobs
    }
}

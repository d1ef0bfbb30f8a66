//! Discrete-event simulation of placed LLM units serving a request trace.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::{CostError, ExecConfig, LatencyProfile, LlmSpec};
use crate::kv_manager::{adapt_quota, init_token_block_quota, BlockPool, KvConfig, KvError, MemoryLayout, QuotaDemand};
use crate::placement::PlacementResult;
use crate::scheduler::{Job, JobKind, LlmQueues, Phase, ReqState, Scheduler, SchedulerConfig, UnitState};
use crate::workload::Request;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("trace LLM {0} is not in the placement")]
    UnplacedLlm(String),
    #[error("placement LLM {0} has no model or workload entry")]
    UnknownLlm(String),
    #[error("unit {unit}: {reason}")]
    Invariant { unit: usize, reason: String },
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Kv(#[from] KvError),
}

/// Static facts about one LLM needed at simulation time.
#[derive(Debug, Clone)]
pub struct SimLlm {
    pub name: String,
    pub spec: LlmSpec,
    pub rate: f64,
    /// Mean prompt plus output length.
    pub mean_tokens: f64,
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub scheduler: SchedulerConfig,
    pub profile: LatencyProfile,
    pub kv: KvConfig,
    pub gpu_memory_bytes: f64,
    pub horizon_s: f64,
    /// Keep running past the horizon until every request finishes.
    pub drain: bool,
    pub log_decisions: bool,
    /// Verify pool invariants after every event (slow).
    pub check_invariants: bool,
    /// SLO reference latency on one GPU instead of the deployed tp degree.
    pub reference_single_gpu: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub llm: String,
    pub arrival_s: f64,
    pub prompt_len: u32,
    pub output_len: u32,
    pub first_token_s: Option<f64>,
    pub done_s: Option<f64>,
    /// Unqueued latency on the request's mesh at full SMs.
    pub reference_s: f64,
}

impl RequestRecord {
    pub fn ttft_s(&self) -> Option<f64> {
        self.first_token_s.map(|f| f - self.arrival_s)
    }

    /// Time per output token after the first; zero for one-token outputs.
    pub fn tpot_s(&self) -> Option<f64> {
        let (f, d) = (self.first_token_s?, self.done_s?);
        Some(if self.output_len > 1 {
            (d - f) / (self.output_len - 1) as f64
        } else {
            0.0
        })
    }

    pub fn latency_s(&self) -> Option<f64> {
        self.done_s.map(|d| d - self.arrival_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuotaSample {
    pub time_s: f64,
    pub quota: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmPoolStats {
    pub llm: String,
    pub rate: f64,
    pub blocks_per_token: f64,
    pub mean_tokens: f64,
    pub mean_used_blocks: f64,
    pub quota_series: Vec<QuotaSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitStats {
    pub unit: usize,
    pub mesh_size: u32,
    pub total_blocks: u64,
    pub block_bytes: u64,
    pub rejected: u64,
    pub llms: Vec<LlmPoolStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub time_s: f64,
    pub unit: usize,
    pub action: String,
    pub llm: String,
    pub kind: JobKind,
    pub sm: f64,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub horizon_s: f64,
    pub records: Vec<RequestRecord>,
    pub units: Vec<UnitStats>,
    pub decisions: Vec<Decision>,
}

/// Duration multiplier of each colocated job: `1 + kappa * (others' SMs)`.
pub fn interference_multipliers(sms: &[f64], kappa: f64) -> Vec<f64> {
    let total: f64 = sms.iter().sum();
    sms.iter().map(|s| 1.0 + kappa * (total - s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    JobDone(u64),
    Arrival(usize),
    QuotaTick,
}

impl EventKind {
    fn rank(self) -> u8 {
        match self {
            EventKind::JobDone(_) => 0,
            EventKind::Arrival(_) => 1,
            EventKind::QuotaTick => 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time_ms: f64,
    seq: u64,
    kind: EventKind,
}

impl Event {
    fn key(&self) -> (f64, u8, u64) {
        (self.time_ms, self.kind.rank(), self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // Reversed: BinaryHeap is a max-heap and we want the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (self.key(), other.key());
        b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(b.2.cmp(&a.2))
    }
}

struct RunningJob {
    job: Job,
}

struct UnitSim<'a> {
    unit: usize,
    mesh_size: u32,
    llms: Vec<&'a SimLlm>,
    opts: &'a SimOptions,
    st: UnitState,
    pool: BlockPool,
    sched: Scheduler,
    heap: BinaryHeap<Event>,
    seq: u64,
    next_job: u64,
    running: BTreeMap<u64, RunningJob>,
    quota_series: Vec<Vec<QuotaSample>>,
    decisions: Vec<Decision>,
    rejected: u64,
}

struct UnitResult {
    records: Vec<RequestRecord>,
    stats: UnitStats,
    decisions: Vec<Decision>,
}

impl<'a> UnitSim<'a> {
    fn push(&mut self, time_ms: f64, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event {
            time_ms,
            seq: self.seq,
            kind,
        });
    }

    fn fail(&self, reason: impl Into<String>) -> SimError {
        SimError::Invariant {
            unit: self.unit,
            reason: reason.into(),
        }
    }

    fn on_arrival(&mut self, r: usize) {
        let req = &self.st.reqs[r];
        let llm = req.llm;
        if req.footprint > self.pool.total_blocks() {
            log::warn!(
                "unit {}: request {} needs {} KV blocks, pool has {}; dropped",
                self.unit,
                req.id,
                req.footprint,
                self.pool.total_blocks()
            );
            self.rejected += 1;
            return;
        }
        self.st.llms[llm].waiting.push_back(r);
    }

    fn finish(&mut self, r: usize, now_ms: f64) -> Result<(), SimError> {
        let req = &mut self.st.reqs[r];
        req.phase = Phase::Done;
        req.done_ms = Some(now_ms);
        let id = req.id;
        self.pool.free(id)?;
        Ok(())
    }

    fn on_job_done(&mut self, id: u64, now_ms: f64) -> Result<(), SimError> {
        let RunningJob { job } = self
            .running
            .remove(&id)
            .ok_or_else(|| self.fail(format!("completion of unknown job {id}")))?;
        self.st.running_jobs -= 1;
        self.st.running_sm = self.running.values().map(|j| j.job.sm).sum();
        self.st.prefill_running = self.running.values().any(|j| j.job.kind == JobKind::Prefill);
        self.st.llms[job.llm].busy = false;
        for &r in &job.requests {
            let req = &mut self.st.reqs[r];
            match job.kind {
                JobKind::Prefill => {
                    req.generated += 1;
                    req.first_token_ms.get_or_insert(now_ms);
                }
                JobKind::Decode => req.generated += 1,
            }
            if req.generated >= req.output_len {
                self.finish(r, now_ms)?;
            } else {
                req.phase = Phase::Decoding;
                self.st.llms[job.llm].ready.push(r);
            }
        }
        Ok(())
    }

    fn on_quota_tick(&mut self, now_ms: f64) -> Result<(), SimError> {
        let util = self.pool.drain_utilization(now_ms);
        let next = adapt_quota(&util, &self.pool.quotas(), &self.opts.kv);
        self.pool.set_quotas(&next)?;
        for (series, q) in self.quota_series.iter_mut().zip(&next) {
            series.push(QuotaSample {
                time_s: now_ms / 1000.0,
                quota: *q,
            });
        }
        let t = now_ms + self.opts.kv.period_s * 1000.0;
        if t <= self.opts.horizon_s * 1000.0 {
            self.push(t, EventKind::QuotaTick);
        }
        Ok(())
    }

    fn log(&mut self, now_ms: f64, action: &str, llm: usize, kind: JobKind, sm: f64, batch: usize) {
        if self.opts.log_decisions {
            self.decisions.push(Decision {
                time_s: now_ms / 1000.0,
                unit: self.unit,
                action: action.into(),
                llm: self.llms[llm].name.clone(),
                kind,
                sm,
                batch,
            });
        }
    }

    /// Evict the newest members of a decode batch until the step's new KV
    /// blocks fit the pool and, under quotas, the LLM's quota. The oldest
    /// member is exempt from the quota. Evicted requests go back to the
    /// head of the waiting queue and are recomputed by a later prefill.
    fn trim_decode(&mut self, llm: usize, batch: &mut Vec<usize>, now_ms: f64) -> Result<(), SimError> {
        let enforce = self.sched.cfg.kind.uses_quotas();
        let mut need: u64 = batch
            .iter()
            .map(|&r| self.pool.growth_blocks(llm, self.st.reqs[r].id, 1))
            .sum();
        let mut evicted = 0;
        while let Some(&last) = batch.last() {
            let over_pool = need > self.pool.free_blocks();
            let over_quota =
                enforce && batch.len() > 1 && self.pool.used(llm) + need > self.pool.quota(llm);
            if !over_pool && !over_quota {
                break;
            }
            let req = &mut self.st.reqs[last];
            need -= self.pool.growth_blocks(llm, req.id, 1);
            self.pool.free(req.id)?;
            req.phase = Phase::Waiting;
            req.preemptions += 1;
            self.st.llms[llm].waiting.push_front(last);
            batch.pop();
            evicted += 1;
        }
        if evicted > 0 {
            self.log(now_ms, "preempt", llm, JobKind::Decode, 0.0, evicted);
        }
        Ok(())
    }

    /// Start `jobs`. Returns false if a decode job lost every member to
    /// eviction, so the caller should schedule again.
    fn launch(&mut self, jobs: Vec<Job>, now_ms: f64) -> Result<bool, SimError> {
        if jobs.is_empty() {
            return Ok(true);
        }
        let new_sm: f64 = jobs.iter().map(|j| j.sm).sum();
        let before = self.st.running_sm;
        if before + new_sm > 1.0 + 1e-9 {
            return Err(self.fail(format!("SM budget exceeded: {before} + {new_sm}")));
        }
        if jobs.iter().filter(|j| j.kind == JobKind::Prefill).count() + usize::from(self.st.prefill_running) > 1 {
            return Err(self.fail("two prefill jobs at once"));
        }

        let mut complete = true;
        let mut started: Vec<(Job, f64)> = Vec::with_capacity(jobs.len());
        for mut job in jobs {
            let llm = job.llm;
            if self.st.llms[llm].busy {
                return Err(self.fail(format!("llm {llm} already has a running job")));
            }
            let spec = &self.llms[llm].spec;
            let exec = ExecConfig::new(self.mesh_size, job.sm)?;
            let base_ms = match job.kind {
                JobKind::Prefill => {
                    let q = &mut self.st.llms[llm].waiting;
                    for &r in &job.requests {
                        if q.pop_front() != Some(r) {
                            return Err(self.fail("prefill batch is not a queue prefix"));
                        }
                    }
                    let mut tokens = 0u64;
                    for &r in &job.requests {
                        let req = &mut self.st.reqs[r];
                        let ctx = req.context_tokens();
                        self.pool.extend(llm, req.id, ctx)?;
                        req.phase = Phase::Prefilling;
                        tokens += ctx;
                    }
                    self.st.prefill_running = true;
                    self.opts
                        .profile
                        .prefill_latency(spec, exec, job.requests.len() as u32, tokens)?
                }
                JobKind::Decode => {
                    if job.requests != self.st.llms[llm].ready {
                        return Err(self.fail("decode batch differs from the ready set"));
                    }
                    self.st.llms[llm].ready.clear();
                    if let Some(r) = job.requests.iter().find(|&&r| self.st.reqs[r].phase != Phase::Decoding) {
                        return Err(self.fail(format!("request {} decoded before prefill", self.st.reqs[*r].id)));
                    }
                    self.trim_decode(llm, &mut job.requests, now_ms)?;
                    if job.requests.is_empty() {
                        complete = false;
                        continue;
                    }
                    let mut ctx = 0u64;
                    for &r in &job.requests {
                        let req = &self.st.reqs[r];
                        ctx += req.context_tokens();
                        self.pool.extend(llm, req.id, 1)?;
                    }
                    let n = job.requests.len() as u64;
                    let avg = ((ctx as f64 / n as f64).round() as u64).max(1);
                    let spec = &self.llms[llm].spec;
                    self.opts.profile.decode_step_latency(spec, exec, n as u32, avg)?
                }
            };
            self.st.llms[llm].busy = true;
            started.push((job, base_ms));
        }

        let mut sms: Vec<f64> = started.iter().map(|(j, _)| j.sm).collect();
        sms.push(before);
        let mult = interference_multipliers(&sms, self.opts.scheduler.kappa);
        for (k, (job, base_ms)) in started.into_iter().enumerate() {
            self.log(now_ms, "launch", job.llm, job.kind, job.sm, job.requests.len());
            self.st.running_jobs += 1;
            self.next_job += 1;
            let id = self.next_job;
            self.push(now_ms + base_ms * mult[k], EventKind::JobDone(id));
            self.running.insert(id, RunningJob { job });
        }
        self.st.running_sm = self.running.values().map(|j| j.job.sm).sum();
        Ok(complete)
    }

    fn run(mut self) -> Result<UnitResult, SimError> {
        let horizon_ms = self.opts.horizon_s * 1000.0;
        if self.sched.cfg.kind.uses_quotas() {
            let t = self.opts.kv.period_s * 1000.0;
            if t <= horizon_ms {
                self.push(t, EventKind::QuotaTick);
            }
        }
        while let Some(first) = self.heap.peek().copied() {
            let now = first.time_ms;
            if now > horizon_ms && !self.opts.drain {
                break;
            }
            self.pool.advance_clock(now);
            while let Some(ev) = self.heap.peek().copied() {
                if ev.time_ms != now {
                    break;
                }
                self.heap.pop();
                match ev.kind {
                    EventKind::JobDone(id) => self.on_job_done(id, now)?,
                    EventKind::Arrival(r) => self.on_arrival(r),
                    EventKind::QuotaTick => self.on_quota_tick(now)?,
                }
            }
            loop {
                let jobs = self.sched.schedule(&self.st, &self.pool);
                if self.launch(jobs, now)? {
                    break;
                }
            }
            if self.opts.check_invariants {
                self.pool.check_invariants().map_err(|e| self.fail(e))?;
            }
        }
        if !self.opts.drain {
            self.pool.advance_clock(horizon_ms);
        }

        let mean_used = self.pool.mean_used();
        let stats = UnitStats {
            unit: self.unit,
            mesh_size: self.mesh_size,
            total_blocks: self.pool.total_blocks(),
            block_bytes: self.pool.block_bytes(),
            rejected: self.rejected,
            llms: self
                .llms
                .iter()
                .enumerate()
                .map(|(i, l)| LlmPoolStats {
                    llm: l.name.clone(),
                    rate: l.rate,
                    blocks_per_token: crate::kv_manager::blocks_per_token(&l.spec, self.opts.kv.block_tokens),
                    mean_tokens: l.mean_tokens,
                    mean_used_blocks: mean_used[i],
                    quota_series: std::mem::take(&mut self.quota_series[i]),
                })
                .collect(),
        };
        let profile = &self.opts.profile;
        let mut records = Vec::with_capacity(self.st.reqs.len());
        let ref_tp = if self.opts.reference_single_gpu { 1 } else { self.mesh_size };
        for r in &self.st.reqs {
            let spec = &self.llms[r.llm].spec;
            records.push(RequestRecord {
                id: r.id,
                llm: self.llms[r.llm].name.clone(),
                arrival_s: r.arrival_ms / 1000.0,
                prompt_len: r.prompt_len,
                output_len: r.output_len,
                first_token_s: r.first_token_ms.map(|t| t / 1000.0),
                done_s: r.done_ms.map(|t| t / 1000.0),
                reference_s: profile.isolated_request_latency(spec, ref_tp, r.prompt_len, r.output_len)?
                    / 1000.0,
            });
        }
        Ok(UnitResult {
            records,
            stats,
            decisions: self.decisions,
        })
    }
}

fn simulate_unit(
    unit: usize,
    mesh_size: u32,
    llms: Vec<&SimLlm>,
    trace: Vec<&Request>,
    opts: &SimOptions,
) -> Result<UnitResult, SimError> {
    let specs: Vec<&LlmSpec> = llms.iter().map(|l| &l.spec).collect();
    let layout = MemoryLayout::new(
        mesh_size as f64 * opts.gpu_memory_bytes,
        &specs,
        opts.kv.activation_reserve,
    )?;
    let pairs: Vec<(&str, &LlmSpec)> = llms.iter().map(|l| (l.name.as_str(), &l.spec)).collect();
    let mut pool = BlockPool::for_layout(&layout, opts.kv.block_tokens, &pairs);
    if opts.scheduler.kind.uses_quotas() {
        let demands: Vec<QuotaDemand> = llms
            .iter()
            .map(|l| QuotaDemand {
                rate: l.rate,
                blocks_per_token: crate::kv_manager::blocks_per_token(&l.spec, opts.kv.block_tokens),
                mean_tokens: l.mean_tokens,
            })
            .collect();
        let quotas = init_token_block_quota(&demands, pool.total_blocks(), opts.kv.quota_floor);
        pool.set_quotas(&quotas)?;
    }
    let index: HashMap<&str, usize> = llms.iter().enumerate().map(|(i, l)| (l.name.as_str(), i)).collect();
    let mut reqs = Vec::with_capacity(trace.len());
    for r in &trace {
        let llm = index[r.llm.as_str()];
        reqs.push(ReqState {
            id: r.id,
            llm,
            arrival_ms: r.arrival_s * 1000.0,
            prompt_len: r.prompt_len,
            output_len: r.output_len,
            generated: 0,
            footprint: pool.blocks_for(llm, r.prompt_len as u64 + r.output_len as u64),
            preemptions: 0,
            first_token_ms: None,
            done_ms: None,
            phase: Phase::Waiting,
        });
    }
    let quota_series = pool
        .quotas()
        .into_iter()
        .map(|q| vec![QuotaSample { time_s: 0.0, quota: q }])
        .collect();
    let n_llms = llms.len();
    let mut sim = UnitSim {
        unit,
        mesh_size,
        llms,
        opts,
        st: UnitState {
            llms: vec![LlmQueues::default(); n_llms],
            reqs,
            ..Default::default()
        },
        pool,
        sched: Scheduler::new(
            opts.scheduler.clone(),
            opts.profile.decode_sm_saturation,
            opts.kv.admit_headroom,
        ),
        heap: BinaryHeap::new(),
        seq: 0,
        next_job: 0,
        running: BTreeMap::new(),
        quota_series,
        decisions: Vec::new(),
        rejected: 0,
    };
    for r in 0..sim.st.reqs.len() {
        let t = sim.st.reqs[r].arrival_ms;
        sim.push(t, EventKind::Arrival(r));
    }
    sim.run()
}

/// Simulate every unit of `plan` on its share of `trace`. Units run in
/// parallel; output is ordered by request id and unit index.
pub fn run(
    plan: &PlacementResult,
    trace: &[Request],
    llms: &[SimLlm],
    opts: &SimOptions,
) -> Result<SimOutput, SimError> {
    let by_name: HashMap<&str, &SimLlm> = llms.iter().map(|l| (l.name.as_str(), l)).collect();
    let mut unit_of: HashMap<&str, usize> = HashMap::new();
    let mut unit_llms: Vec<Vec<&SimLlm>> = Vec::new();
    for (u, unit) in plan.units.iter().enumerate() {
        let mut members = Vec::new();
        for l in &unit.llms {
            let sl = by_name
                .get(l.llm.as_str())
                .ok_or_else(|| SimError::UnknownLlm(l.llm.clone()))?;
            unit_of.insert(l.llm.as_str(), u);
            members.push(*sl);
        }
        unit_llms.push(members);
    }
    let mut traces: Vec<Vec<&Request>> = vec![Vec::new(); plan.units.len()];
    let horizon = opts.horizon_s;
    let mut skipped = 0usize;
    for r in trace {
        let u = *unit_of
            .get(r.llm.as_str())
            .ok_or_else(|| SimError::UnplacedLlm(r.llm.clone()))?;
        if r.arrival_s > horizon && !opts.drain {
            skipped += 1;
            continue;
        }
        traces[u].push(r);
    }
    if skipped > 0 {
        log::warn!("{skipped} requests arrive after the horizon and are ignored");
    }
    for t in &mut traces {
        t.sort_by(|a, b| a.arrival_s.total_cmp(&b.arrival_s).then(a.id.cmp(&b.id)));
    }

    let jobs: Vec<(usize, u32, Vec<&SimLlm>, Vec<&Request>)> = plan
        .units
        .iter()
        .enumerate()
        .zip(unit_llms)
        .zip(traces)
        .map(|(((u, unit), l), t)| (u, unit.mesh.size(), l, t))
        .collect();
    let results: Vec<Result<UnitResult, SimError>> = jobs
        .into_par_iter()
        .map(|(u, size, l, t)| simulate_unit(u, size, l, t, opts))
        .collect();

    let mut records = Vec::new();
    let mut units = Vec::new();
    let mut decisions = Vec::new();
    for r in results {
        let r = r?;
        records.extend(r.records);
        units.push(r.stats);
        decisions.extend(r.decisions);
    }
    records.sort_by_key(|r| r.id);
    Ok(SimOutput {
        horizon_s: opts.horizon_s,
        records,
        units,
        decisions,
    })
}

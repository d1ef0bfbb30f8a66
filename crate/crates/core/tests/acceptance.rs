//! Acceptance suite. Every criterion prints one PASS/FAIL line (straight to
//! stderr so it shows without `--nocapture`); the test fails if any does.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use muxsim::cli::sweep;
use muxsim::config::ExperimentConfig;
use muxsim::cost_model::{ExecConfig, LatencyProfile, LlmSpec, ThroughputQuery};
use muxsim::kv_manager::{adapt_quota, BlockPool, KvConfig, KvError};
use muxsim::metrics::{report, MetricsReport};
use muxsim::placement::{
    enumerate_mesh_groups, estimate_alone, ilp_assignments_brute_force, llm_parallel_candidates, max_batch_alone,
    place, Backend, Cluster, IlpInstance, LlmDemand, LlmUnit, Mesh, ParallelCandidate, PlacementInput,
    PlacementOptions, PlacementResult, UnitLlm,
};
use muxsim::scheduler::{SchedulerConfig, SchedulerKind};
use muxsim::sim_engine::{run, SimLlm, SimOptions};
use muxsim::workload::{gen_arrivals, gen_rates, top_share, LengthDist, LlmWorkload, WorkloadSpec};

type Outcome = Result<String, String>;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1 and 2

struct OrderingRun {
    by_kind: BTreeMap<String, MetricsReport>,
    elapsed_s: f64,
}

fn ordering_run() -> OrderingRun {
    let root = repo_root();
    let cfg = ExperimentConfig::load(&root.join("configs/fig5b.json")).unwrap();
    let plan: PlacementResult =
        serde_json::from_str(&std::fs::read_to_string(root.join("configs/fig5b.plan.json")).unwrap()).unwrap();
    let t0 = Instant::now();
    let trace = cfg.workload_spec(1.0).unwrap().generate().unwrap();
    let llms = cfg.sim_llms(1.0).unwrap();
    let rates = cfg.rate_map(1.0).unwrap();
    let mut by_kind = BTreeMap::new();
    for kind in SchedulerKind::ALL {
        let out = run(&plan, &trace, &llms, &cfg.sim_options(kind)).unwrap();
        by_kind.insert(kind.to_string(), report(&out, &rates, &cfg.slo_scales));
    }
    OrderingRun {
        by_kind,
        elapsed_s: t0.elapsed().as_secs_f64(),
    }
}

fn criterion_1(r: &OrderingRun) -> Outcome {
    let t = |k: &str| r.by_kind[k].total_throughput;
    let (a, rr, f) = (t("adbs"), t("round_robin"), t("fcfs"));
    check(
        a >= 1.10 * rr && rr >= 1.10 * f && r.elapsed_s < 60.0,
        format!(
            "throughput adbs {a:.3} / rr {rr:.3} / fcfs {f:.3} req/s (gaps {:.1}%, {:.1}%), runtime {:.1}s",
            100.0 * (a / rr - 1.0),
            100.0 * (rr / f - 1.0),
            r.elapsed_s
        ),
    )
}

fn criterion_2(r: &OrderingRun) -> Outcome {
    let g = |k: &str| r.by_kind[k].max_fairness_gap.unwrap_or(f64::NAN);
    let (a, f) = (g("adbs"), g("fcfs"));
    check(
        a <= 0.15 && f > 0.15,
        format!("max usage gap adbs {a:.3} (<= 0.15), fcfs {f:.3} (> 0.15), rr {:.3}", g("round_robin")),
    )
}

// ---------------------------------------------------------------- 3 and 4

fn random_instance(rng: &mut ChaCha8Rng) -> PlacementInput {
    let gpus = [1u32, 2, 4][rng.random_range(0..3)];
    let mem_gb = [24.0, 40.0, 80.0][rng.random_range(0..3)];
    let n = rng.random_range(1..=4);
    let llms = (0..n)
        .map(|i| {
            let name = format!("m{i}");
            let spec = match rng.random_range(0..4) {
                0 => LlmSpec::llama_like(&name, 16, 16, 2048, 1.3e9),
                1 => LlmSpec::llama_like(&name, 26, 24, 3072, 3.0e9),
                2 => LlmSpec::llama_7b(&name),
                _ => LlmSpec::llama_13b(&name),
            };
            LlmDemand {
                name,
                spec,
                rate: rng.random_range(0.2..12.0),
                mean_prompt: rng.random_range(64.0..512.0),
                mean_output: rng.random_range(64.0..512.0),
            }
        })
        .collect();
    PlacementInput {
        cluster: Cluster {
            num_nodes: 1,
            gpus_per_node: gpus,
            gpu_memory_bytes: mem_gb * 1e9,
        },
        llms,
        profile: LatencyProfile::default(),
        kv: KvConfig::default(),
        options: PlacementOptions::default(),
    }
}

fn instance_suite() -> Vec<PlacementInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    while out.len() < 60 {
        let inp = random_instance(&mut rng);
        if place(&inp, Backend::Ilp).is_ok() {
            out.push(inp);
        }
    }
    out
}

fn criterion_3(suite: &[PlacementInput]) -> Outcome {
    let mut problems = Vec::new();
    let mut close = 0usize;
    let mut gaps = Vec::new();
    let mut verified_groups = 0usize;
    for (k, inp) in suite.iter().enumerate() {
        let cands = llm_parallel_candidates(inp).unwrap();
        for meshes in enumerate_mesh_groups(inp, &cands) {
            let ilp = IlpInstance::from_group(inp, &cands, &meshes);
            if ilp.dims() > 12 {
                continue;
            }
            verified_groups += 1;
            let bb = ilp.solve().map(|(v, _)| v);
            let bf = ilp_assignments_brute_force(&ilp).map(|(v, _)| v);
            let same = match (bb, bf) {
                (Some(a), Some(b)) => (a - b).abs() <= 1e-9 * b.abs().max(1.0),
                (None, None) => true,
                _ => false,
            };
            if !same {
                problems.push(format!("instance {k}: branch-and-bound {bb:?} vs enumeration {bf:?}"));
            }
        }
        let exact = place(inp, Backend::Ilp).unwrap().objective;
        let greedy = place(inp, Backend::Greedy).map(|p| p.objective).unwrap_or(0.0);
        if greedy > exact + 1e-9 * exact.max(1.0) {
            problems.push(format!("instance {k}: greedy {greedy} above exact {exact}"));
        }
        let ratio = if exact > 0.0 { greedy / exact } else { 1.0 };
        if ratio >= 0.9 {
            close += 1;
        }
        gaps.push(1.0 - ratio);
    }
    let share = close as f64 / suite.len() as f64;
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let detail = format!(
        "{} instances, {verified_groups} groups checked against enumeration, greedy >= 90% of exact on {:.0}%, mean gap {:.2}%{}",
        suite.len(),
        100.0 * share,
        100.0 * mean_gap,
        if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
    );
    check(suite.len() >= 50 && problems.is_empty() && share >= 0.8, detail)
}

// Capacity at the largest batch the KV space allows, computed from the raw
// stable-batch formula rather than the estimator's batch search.
fn meets_rate(inp: &PlacementInput, d: &LlmDemand, tp: u32, sm: f64) -> bool {
    let Some(mb) = max_batch_alone(inp, d, tp) else {
        return false;
    };
    let q = ThroughputQuery {
        spec: &d.spec,
        exec: ExecConfig::new(tp, sm).unwrap(),
        rate: d.rate,
        prompt_len: d.mean_prompt,
        gen_len: d.mean_output,
        peers: &[],
        max_batch: mb,
    };
    inp.profile.raw_throughput(&q, 0.0, mb).unwrap() >= d.rate
}

fn criterion_4(suite: &[PlacementInput]) -> Outcome {
    let mut checked = 0usize;
    let mut violations = Vec::new();
    for (k, inp) in suite.iter().enumerate() {
        let cands = llm_parallel_candidates(inp).unwrap();
        for (i, d) in inp.llms.iter().enumerate() {
            for c in cands.of(i) {
                checked += 1;
                let smaller_ok = inp
                    .options
                    .sm_list
                    .iter()
                    .filter(|&&sm| sm < c.num_sm)
                    .find(|&&sm| meets_rate(inp, d, c.tp_degree, sm));
                if let Some(sm) = smaller_ok {
                    violations.push(format!("instance {k} {} tp {}: sm {sm} < {} meets the rate", d.name, c.tp_degree, c.num_sm));
                }
                if c.saturated == meets_rate(inp, d, c.tp_degree, c.num_sm) {
                    violations.push(format!("instance {k} {} tp {}: saturated flag wrong", d.name, c.tp_degree));
                }
            }
        }
    }
    check(
        checked > 0 && violations.is_empty(),
        format!("{checked} candidates scanned, {} violations {}", violations.len(), violations.join("; ")),
    )
}

// ---------------------------------------------------------------- 5

fn single_plan(llm: &str, tp: u32) -> PlacementResult {
    let cand = ParallelCandidate {
        tp_degree: tp,
        num_sm: 1.0,
        batch: 1,
        est_tpt: 0.0,
        saturated: false,
    };
    PlacementResult {
        backend: Backend::Greedy,
        units: vec![LlmUnit {
            mesh: Mesh {
                node: 0,
                gpu_ids: (0..tp).collect(),
            },
            llms: vec![UnitLlm {
                llm: llm.to_string(),
                candidate: cand,
                est_tpt: 0.0,
            }],
            est_tpt: 0.0,
        }],
        est_total_tpt: 0.0,
        objective: 0.0,
    }
}

fn sim_options(kind: SchedulerKind, horizon_s: f64) -> SimOptions {
    SimOptions {
        scheduler: SchedulerConfig {
            kind,
            ..Default::default()
        },
        profile: LatencyProfile::default(),
        kv: KvConfig::default(),
        gpu_memory_bytes: 80e9,
        horizon_s,
        drain: false,
        log_decisions: false,
        check_invariants: false,
        reference_single_gpu: false,
    }
}

fn criterion_5() -> Outcome {
    let horizon = 600.0;
    let spec = LlmSpec::llama_7b("m");
    let (pd, od) = (LengthDist::sharegpt_prompt(), LengthDist::sharegpt_output());
    let demand = |rate: f64| LlmDemand {
        name: "m".into(),
        spec: spec.clone(),
        rate,
        mean_prompt: pd.mean(),
        mean_output: od.mean(),
    };
    let inp = PlacementInput {
        cluster: Cluster {
            num_nodes: 1,
            gpus_per_node: 1,
            gpu_memory_bytes: 80e9,
        },
        llms: vec![demand(1e9)],
        profile: LatencyProfile::default(),
        kv: KvConfig::default(),
        options: PlacementOptions::default(),
    };
    let mb = max_batch_alone(&inp, &inp.llms[0], 1).unwrap();
    let capacity = estimate_alone(&inp, &inp.llms[0], 1, 1.0, mb).unwrap().throughput;
    let mut worst: f64 = 0.0;
    for k in 0..10 {
        let rate = (0.5 + 0.3 * k as f64 / 9.0) * capacity;
        let est = estimate_alone(&inp, &demand(rate), 1, 1.0, mb).unwrap().throughput;
        let w = WorkloadSpec {
            llms: vec![LlmWorkload {
                llm: "m".into(),
                rate,
                prompt_len: pd.clone(),
                output_len: od.clone(),
            }],
            horizon_s: horizon,
            seed: 100 + k,
        };
        let trace = w.generate().unwrap();
        let llms = [SimLlm {
            name: "m".into(),
            spec: spec.clone(),
            rate,
            mean_tokens: pd.mean() + od.mean(),
        }];
        let out = run(&single_plan("m", 1), &trace, &llms, &sim_options(SchedulerKind::Adbs, horizon)).unwrap();
        let rates = BTreeMap::from([("m".to_string(), rate)]);
        let sim = report(&out, &rates, &[1.0]).total_throughput;
        worst = worst.max((est - sim).abs() / sim);
    }
    check(
        worst <= 0.25,
        format!("7B alone, capacity {capacity:.2} req/s, 10 loads at 50-80%: worst relative error {:.1}%", 100.0 * worst),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let s09 = top_share(&gen_rates(19, 0.9, 20.0).unwrap(), 0.2);
    let s21 = top_share(&gen_rates(19, 2.1, 20.0).unwrap(), 0.2);
    let mut worst_z: f64 = 0.0;
    for (k, rate) in [0.3, 2.0, 20.0].into_iter().enumerate() {
        for seed in 0..4u64 {
            let n = gen_arrivals(rate, 1e4, seed, &format!("poisson-{k}")).unwrap().len() as f64;
            let mean = rate * 1e4;
            worst_z = worst_z.max((n - mean).abs() / mean.sqrt());
        }
    }
    check(
        (s09 - 0.50).abs() <= 0.05 && (s21 - 0.90).abs() <= 0.05 && worst_z <= 3.0,
        format!(
            "top-20% share {:.1}% at alpha 0.9, {:.1}% at alpha 2.1; worst Poisson count deviation {worst_z:.2} sigma",
            100.0 * s09,
            100.0 * s21
        ),
    )
}

// ---------------------------------------------------------------- 7

#[derive(Clone, PartialEq, Debug)]
struct Snapshot {
    free: u64,
    used: Vec<u64>,
    quotas: Vec<u64>,
    held: BTreeMap<u64, u64>,
}

fn snapshot(pool: &BlockPool, reqs: &BTreeMap<u64, (usize, u64)>) -> Snapshot {
    Snapshot {
        free: pool.free_blocks(),
        used: (0..pool.num_llms()).map(|l| pool.used(l)).collect(),
        quotas: pool.quotas(),
        held: reqs.keys().filter_map(|r| pool.request_blocks(*r).map(|b| (*r, b))).collect(),
    }
}

fn criterion_7() -> Outcome {
    const OPS: usize = 10_000;
    let specs = [LlmSpec::llama_7b("a"), LlmSpec::llama_13b("b"), LlmSpec::llama_like("c", 16, 16, 2048, 1.3e9)];
    let named: Vec<(&str, &LlmSpec)> = specs.iter().map(|s| (s.name.as_str(), s)).collect();
    let block_tokens = 16u32;
    let total = 40_000u64;
    let mut pool = BlockPool::new(total, 256 * 16, block_tokens, &named);
    let cfg = KvConfig::default();
    let q0 = total / 3;
    pool.set_quotas(&[q0, q0, total - 2 * q0]).unwrap();
    // model: request -> (llm, tokens)
    let mut reqs: BTreeMap<u64, (usize, u64)> = BTreeMap::new();
    let slot = |l: usize| 2 * specs[l].num_layers as u64 * specs[l].num_heads as u64;
    let blocks = |l: usize, t: u64| slot(l) * t.div_ceil(block_tokens as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut next_id = 0u64;
    let mut errors = Vec::new();
    let mut refused = 0usize;
    for op in 0..OPS {
        let before = snapshot(&pool, &reqs);
        let choice = rng.random_range(0..10);
        let result: Result<(), KvError> = match choice {
            0..=3 => {
                let l = rng.random_range(0..3);
                let t = rng.random_range(1..600);
                let quota = rng.random_bool(0.5);
                let id = next_id;
                next_id += 1;
                let r = if quota { pool.alloc(l, id, t) } else { pool.extend(l, id, t) };
                let want = blocks(l, t);
                let fits = want <= before.free && (!quota || before.used[l] + want <= before.quotas[l]);
                match &r {
                    Ok(got) if fits && *got == want => {
                        reqs.insert(id, (l, t));
                    }
                    Err(_) if !fits => {}
                    _ => errors.push(format!("op {op}: alloc {want} blocks gave {r:?}")),
                }
                r.map(|_| ())
            }
            4..=6 if !reqs.is_empty() => {
                let id = *reqs.keys().nth(rng.random_range(0..reqs.len())).unwrap();
                let (l, t) = reqs[&id];
                let n = rng.random_range(1..40);
                let want = blocks(l, t + n) - blocks(l, t);
                let r = pool.extend(l, id, n);
                match &r {
                    Ok(got) if want <= before.free && *got == want => {
                        reqs.insert(id, (l, t + n));
                    }
                    Err(_) if want > before.free => {}
                    _ => errors.push(format!("op {op}: extend by {want} gave {r:?}")),
                }
                r.map(|_| ())
            }
            7..=8 if !reqs.is_empty() => {
                let id = *reqs.keys().nth(rng.random_range(0..reqs.len())).unwrap();
                let (l, t) = reqs.remove(&id).unwrap();
                let r = pool.free(id);
                if r.as_ref().ok() != Some(&blocks(l, t)) {
                    errors.push(format!("op {op}: free gave {r:?}"));
                }
                r.map(|_| ())
            }
            _ => {
                let util: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
                let q = adapt_quota(&util, &pool.quotas(), &cfg);
                if q.iter().sum::<u64>() != before.quotas.iter().sum::<u64>() {
                    errors.push(format!("op {op}: adapt changed the quota sum to {q:?}"));
                }
                pool.set_quotas(&q)
            }
        };
        let after = snapshot(&pool, &reqs);
        if result.is_err() {
            refused += 1;
            if after != before {
                errors.push(format!("op {op}: failed operation changed the pool"));
            }
        }
        let model_used: Vec<u64> = (0..3)
            .map(|l| reqs.values().filter(|(o, _)| *o == l).map(|&(o, t)| blocks(o, t)).sum())
            .collect();
        if after.used != model_used || after.free + model_used.iter().sum::<u64>() != total {
            errors.push(format!("op {op}: conservation broken (pool {:?} model {model_used:?})", after.used));
        }
        if let Err(e) = pool.check_invariants() {
            errors.push(format!("op {op}: {e}"));
        }
        if errors.len() > 5 {
            break;
        }
    }
    check(
        errors.is_empty(),
        format!("{OPS} ops ({refused} refused) against the model oracle: {} violations {}", errors.len(), errors.join("; ")),
    )
}

// ---------------------------------------------------------------- 8

fn muxsim(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_muxsim")).args(args).output().unwrap()
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_string_lossy().into_owned();
    let cfg = repo_root().join("configs/small.json").to_string_lossy().into_owned();
    let steps: [Vec<String>; 2] = [
        vec!["gen-workload".into(), "-c".into(), cfg.clone(), "-o".into(), d("trace.csv")],
        vec!["plan".into(), "-c".into(), cfg.clone(), "-o".into(), d("plan.json")],
    ];
    for s in &steps {
        let o = muxsim(&s.iter().map(String::as_str).collect::<Vec<_>>());
        if !o.status.success() {
            return Err(format!("{} failed: {}", s[0], String::from_utf8_lossy(&o.stderr)));
        }
    }
    for out in ["out1", "out2"] {
        let o = muxsim(&["simulate", "-c", &cfg, "-p", &d("plan.json"), "-t", &d("trace.csv"), "-o", &d(out)]);
        if !o.status.success() {
            return Err(format!("simulate failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
    }
    let same = |f: &str| {
        let a = std::fs::read(dir.path().join("out1").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("out2").join(f)).unwrap();
        (a == b, a.len())
    };
    let (r, rn) = same("records.csv");
    let (m, mn) = same("metrics.json");
    check(
        r && m && rn > 100,
        format!("records.csv ({rn} bytes) identical: {r}; metrics.json ({mn} bytes) identical: {m}"),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let horizon = 300.0;
    let mut mismatches = 0usize;
    let mut total = 0usize;
    let mut completed = 0usize;
    for (rate, seed) in [(1.0, 1u64), (3.0, 2), (6.0, 3)] {
        let spec = LlmSpec::llama_7b("solo");
        let w = WorkloadSpec {
            llms: vec![LlmWorkload {
                llm: "solo".into(),
                rate,
                prompt_len: LengthDist::sharegpt_prompt(),
                output_len: LengthDist::sharegpt_output(),
            }],
            horizon_s: horizon,
            seed,
        };
        let trace = w.generate().unwrap();
        let llms = [SimLlm {
            name: "solo".into(),
            spec,
            rate,
            mean_tokens: 500.0,
        }];
        let plan = single_plan("solo", 1);
        let a = run(&plan, &trace, &llms, &sim_options(SchedulerKind::Adbs, horizon)).unwrap();
        let f = run(&plan, &trace, &llms, &sim_options(SchedulerKind::Fcfs, horizon)).unwrap();
        total += a.records.len();
        completed += a.records.iter().filter(|r| r.done_s.is_some()).count();
        let by_id: HashMap<u64, Option<f64>> = f.records.iter().map(|r| (r.id, r.done_s)).collect();
        mismatches += a
            .records
            .iter()
            .filter(|r| by_id.get(&r.id) != Some(&r.done_s))
            .count()
            + a.records.len().abs_diff(f.records.len());
    }
    check(
        mismatches == 0 && completed > 0,
        format!("{total} requests over 3 loads ({completed} completed): {mismatches} completion times differ"),
    )
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let cfg = ExperimentConfig::load(&repo_root().join("configs/small.json")).unwrap();
    let rows = sweep(&cfg).unwrap();
    let expected = cfg.ablate.backends.len() * cfg.ablate.schedulers.len() * cfg.ablate.rate_scales.len();
    let bad: Vec<String> = rows
        .iter()
        .filter(|r| r.metrics.slo.windows(2).any(|w| w[1].attainment < w[0].attainment))
        .map(|r| format!("{} {} x{}", r.backend, r.scheduler, r.rate_scale))
        .collect();
    let scales: Vec<f64> = rows[0].metrics.slo.iter().map(|p| p.scale).collect();
    check(
        bad.is_empty() && rows.len() == expected && scales == [1.0, 2.0, 4.0, 8.0, 16.0],
        format!("{} sweep rows over scales {scales:?}: {} non-monotone {}", rows.len(), bad.len(), bad.join(", ")),
    )
}

#[test]
fn acceptance() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let ordering = ordering_run();
    results.push((1, "scheduler ordering", criterion_1(&ordering)));
    results.push((2, "fairness", criterion_2(&ordering)));
    let suite = instance_suite();
    results.push((3, "placement oracle", criterion_3(&suite)));
    results.push((4, "candidate minimality", criterion_4(&suite)));
    results.push((5, "estimator fidelity", criterion_5()));
    results.push((6, "workload statistics", criterion_6()));
    results.push((7, "kv conservation", criterion_7()));
    results.push((8, "determinism", criterion_8()));
    results.push((9, "single-llm degeneracy", criterion_9()));
    results.push((10, "slo monotonicity", criterion_10()));

    let mut err = std::io::stderr().lock();
    let mut failed = Vec::new();
    writeln!(err).unwrap();
    for (n, name, r) in &results {
        let (tag, detail) = match r {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed.push(*n);
                ("FAIL", d)
            }
        };
        writeln!(err, "{tag} criterion {n} ({name}): {detail}").unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

//! Request workloads: power-law rates, Poisson arrivals, length sampling and
//! the CSV trace format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::{DEFAULT_GEN_LEN, DEFAULT_PROMPT_LEN};
use crate::rng::substream;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload parameter: {0}")]
    Param(String),
    #[error("invalid length distribution: {0}")]
    Dist(String),
    #[error("trace line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Length distribution descriptor. Sampled lengths are always >= 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LengthDist {
    Constant {
        value: u32,
    },
    LogNormal {
        mu: f64,
        sigma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<u32>,
    },
    /// Log-normal parameterised by its mean instead of `mu`.
    LogNormalMean {
        mean: f64,
        sigma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<u32>,
    },
    /// `(length, weight)` pairs; weights need not sum to one.
    Empirical {
        bins: Vec<(u32, f64)>,
    },
}

const DEFAULT_SIGMA: f64 = 1.0;
const DEFAULT_MAX_LEN: u32 = 4096;

impl LengthDist {
    /// ShareGPT-like prompt lengths (mean 161).
    pub fn sharegpt_prompt() -> Self {
        LengthDist::LogNormalMean {
            mean: DEFAULT_PROMPT_LEN as f64,
            sigma: DEFAULT_SIGMA,
            max: Some(DEFAULT_MAX_LEN),
        }
    }

    /// ShareGPT-like output lengths (mean 338).
    pub fn sharegpt_output() -> Self {
        LengthDist::LogNormalMean {
            mean: DEFAULT_GEN_LEN as f64,
            sigma: DEFAULT_SIGMA,
            max: Some(DEFAULT_MAX_LEN),
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        match self {
            LengthDist::Constant { value } if *value == 0 => {
                Err(WorkloadError::Dist("constant length must be >= 1".into()))
            }
            LengthDist::LogNormal { sigma, mu, max } => {
                if !(sigma.is_finite() && *sigma >= 0.0 && mu.is_finite()) {
                    return Err(WorkloadError::Dist(format!("bad lognormal mu={mu} sigma={sigma}")));
                }
                check_max(*max)
            }
            LengthDist::LogNormalMean { mean, sigma, max } => {
                if !(sigma.is_finite() && *sigma >= 0.0 && mean.is_finite() && *mean >= 1.0) {
                    return Err(WorkloadError::Dist(format!("bad lognormal mean={mean} sigma={sigma}")));
                }
                check_max(*max)
            }
            LengthDist::Empirical { bins } => {
                if bins.is_empty() {
                    return Err(WorkloadError::Dist("empty histogram".into()));
                }
                if bins.iter().any(|(len, w)| *len == 0 || !(w.is_finite() && *w >= 0.0)) {
                    return Err(WorkloadError::Dist("histogram lengths must be >= 1 and weights >= 0".into()));
                }
                if bins.iter().map(|(_, w)| w).sum::<f64>() <= 0.0 {
                    return Err(WorkloadError::Dist("histogram weights sum to zero".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Nominal mean, ignoring rounding and truncation.
    pub fn mean(&self) -> f64 {
        match self {
            LengthDist::Constant { value } => *value as f64,
            LengthDist::LogNormal { mu, sigma, .. } => (mu + sigma * sigma / 2.0).exp(),
            LengthDist::LogNormalMean { mean, .. } => *mean,
            LengthDist::Empirical { bins } => {
                let total: f64 = bins.iter().map(|(_, w)| w).sum();
                bins.iter().map(|(l, w)| *l as f64 * w).sum::<f64>() / total
            }
        }
    }

    pub fn sampler(&self) -> Result<LengthSampler, WorkloadError> {
        self.validate()?;
        Ok(match self {
            LengthDist::Constant { value } => LengthSampler::Constant(*value),
            LengthDist::LogNormal { mu, sigma, max } => LengthSampler::LogNormal {
                dist: LogNormal::new(*mu, *sigma).map_err(|e| WorkloadError::Dist(e.to_string()))?,
                max: max.unwrap_or(u32::MAX),
            },
            LengthDist::LogNormalMean { mean, sigma, max } => LengthSampler::LogNormal {
                dist: LogNormal::new(mean.ln() - sigma * sigma / 2.0, *sigma)
                    .map_err(|e| WorkloadError::Dist(e.to_string()))?,
                max: max.unwrap_or(u32::MAX),
            },
            LengthDist::Empirical { bins } => {
                let total: f64 = bins.iter().map(|(_, w)| w).sum();
                let mut acc = 0.0;
                let cdf = bins
                    .iter()
                    .map(|(len, w)| {
                        acc += w / total;
                        (*len, acc)
                    })
                    .collect();
                LengthSampler::Empirical(cdf)
            }
        })
    }
}

fn check_max(max: Option<u32>) -> Result<(), WorkloadError> {
    match max {
        Some(0) => Err(WorkloadError::Dist("max length must be >= 1".into())),
        _ => Ok(()),
    }
}

pub enum LengthSampler {
    Constant(u32),
    LogNormal { dist: LogNormal<f64>, max: u32 },
    Empirical(Vec<(u32, f64)>),
}

impl LengthSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match self {
            LengthSampler::Constant(v) => *v,
            LengthSampler::LogNormal { dist, max } => {
                let x = dist.sample(rng).round();
                (x.clamp(1.0, *max as f64)) as u32
            }
            LengthSampler::Empirical(cdf) => {
                let u: f64 = rng.random();
                cdf.iter()
                    .find(|(_, c)| u < *c)
                    .or(cdf.last())
                    .map(|(len, _)| *len)
                    .unwrap_or(1)
            }
        }
    }
}

/// Draws `n` lengths from `dist` using the named stream of `seed`.
pub fn sample_lengths(dist: &LengthDist, n: usize, seed: u64, stream: &str) -> Result<Vec<u32>, WorkloadError> {
    let sampler = dist.sampler()?;
    let mut rng = substream(seed, stream);
    Ok((0..n).map(|_| sampler.sample(&mut rng)).collect())
}

/// Rank-ordered power-law rates: `max_rate * i^-alpha` for `i = 1..=n`.
pub fn gen_rates(n_llms: usize, alpha: f64, max_rate: f64) -> Result<Vec<f64>, WorkloadError> {
    if n_llms == 0 {
        return Err(WorkloadError::Param("need at least one LLM".into()));
    }
    if !(max_rate.is_finite() && max_rate > 0.0) {
        return Err(WorkloadError::Param(format!("max_rate must be > 0, got {max_rate}")));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(WorkloadError::Param(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok((1..=n_llms)
        .map(|i| if i == 1 { max_rate } else { max_rate * (i as f64).powf(-alpha) })
        .collect())
}

/// Share of the total rate carried by the top `frac` of models
/// (`ceil(frac * n)` of them, at least one).
pub fn top_share(rates: &[f64], frac: f64) -> f64 {
    if rates.is_empty() {
        return 0.0;
    }
    let mut sorted = rates.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = ((frac * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let total: f64 = sorted.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    sorted[..k].iter().sum::<f64>() / total
}

/// Poisson arrival times in `[0, horizon_s]`, sorted.
pub fn gen_arrivals(rate: f64, horizon_s: f64, seed: u64, stream: &str) -> Result<Vec<f64>, WorkloadError> {
    if !(rate.is_finite() && rate >= 0.0) {
        return Err(WorkloadError::Param(format!("rate must be >= 0, got {rate}")));
    }
    if !(horizon_s.is_finite() && horizon_s > 0.0) {
        return Err(WorkloadError::Param(format!("horizon must be > 0, got {horizon_s}")));
    }
    if rate == 0.0 {
        return Ok(Vec::new());
    }
    let gaps = Exp::new(rate).map_err(|e| WorkloadError::Param(e.to_string()))?;
    let mut rng = substream(seed, stream);
    let mut out = Vec::with_capacity((rate * horizon_s * 1.1) as usize + 8);
    let mut t = 0.0;
    loop {
        t += gaps.sample(&mut rng);
        if t > horizon_s {
            break;
        }
        out.push(t);
    }
    Ok(out)
}

/// Traffic of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmWorkload {
    pub llm: String,
    pub rate: f64,
    pub prompt_len: LengthDist,
    pub output_len: LengthDist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub llms: Vec<LlmWorkload>,
    pub horizon_s: f64,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.horizon_s.is_finite() && self.horizon_s > 0.0) {
            return Err(WorkloadError::Param(format!("horizon must be > 0, got {}", self.horizon_s)));
        }
        for w in &self.llms {
            if !(w.rate.is_finite() && w.rate >= 0.0) {
                return Err(WorkloadError::Param(format!("rate of {} must be >= 0", w.llm)));
            }
            w.prompt_len.validate()?;
            w.output_len.validate()?;
        }
        Ok(())
    }

    pub fn rate_of(&self, llm: &str) -> Option<f64> {
        self.llms.iter().find(|w| w.llm == llm).map(|w| w.rate)
    }

    pub fn get(&self, llm: &str) -> Option<&LlmWorkload> {
        self.llms.iter().find(|w| w.llm == llm)
    }

    /// Generate the full trace. Ids follow arrival order.
    pub fn generate(&self) -> Result<Vec<Request>, WorkloadError> {
        self.validate()?;
        let mut all: Vec<(f64, usize, u32, u32)> = Vec::new();
        for (idx, w) in self.llms.iter().enumerate() {
            let arrivals = gen_arrivals(w.rate, self.horizon_s, self.seed, &format!("arrivals/{}", w.llm))?;
            let prompts = sample_lengths(&w.prompt_len, arrivals.len(), self.seed, &format!("prompt_len/{}", w.llm))?;
            let outputs = sample_lengths(&w.output_len, arrivals.len(), self.seed, &format!("output_len/{}", w.llm))?;
            for ((t, p), o) in arrivals.into_iter().zip(prompts).zip(outputs) {
                all.push((t, idx, p, o));
            }
        }
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(all
            .into_iter()
            .enumerate()
            .map(|(id, (arrival_s, idx, prompt_len, output_len))| Request {
                id: id as u64,
                llm: self.llms[idx].llm.clone(),
                arrival_s,
                prompt_len,
                output_len,
            })
            .collect())
    }
}

/// One inference request. Output length is fixed at arrival.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub llm: String,
    pub arrival_s: f64,
    pub prompt_len: u32,
    pub output_len: u32,
}

pub fn write_trace<W: Write>(requests: &[Request], writer: W) -> Result<(), WorkloadError> {
    let mut w = csv::Writer::from_writer(writer);
    // Header is written even when there are no rows.
    w.write_record(["id", "llm", "arrival_s", "prompt_len", "output_len"])
        .map_err(csv_io)?;
    for r in requests {
        w.write_record(&[
            r.id.to_string(),
            r.llm.clone(),
            r.arrival_s.to_string(),
            r.prompt_len.to_string(),
            r.output_len.to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> WorkloadError {
    WorkloadError::Io(std::io::Error::other(e.to_string()))
}

pub fn read_trace<R: Read>(reader: R) -> Result<Vec<Request>, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<Request>() {
        let req = row.map_err(|e| WorkloadError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = out.len() as u64 + 2;
        if req.prompt_len == 0 || req.output_len == 0 {
            return Err(WorkloadError::Parse {
                line,
                message: format!("request {} has a zero length", req.id),
            });
        }
        if !(req.arrival_s.is_finite() && req.arrival_s >= 0.0) {
            return Err(WorkloadError::Parse {
                line,
                message: format!("request {} has arrival {}", req.id, req.arrival_s),
            });
        }
        out.push(req);
    }
    Ok(out)
}

pub fn save_trace(requests: &[Request], path: &Path) -> Result<(), WorkloadError> {
    let f = BufWriter::new(File::create(path)?);
    write_trace(requests, f)
}

pub fn load_trace(path: &Path) -> Result<Vec<Request>, WorkloadError> {
    let f = BufReader::new(File::open(path)?);
    read_trace(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_zero_is_uniform() {
        let r = gen_rates(5, 0.0, 20.0).unwrap();
        assert!(r.iter().all(|&x| x == 20.0));
    }

    #[test]
    fn rates_rank_ordered_and_first_is_max() {
        let r = gen_rates(20, 1.3, 7.5).unwrap();
        assert_eq!(r[0], 7.5);
        assert!(r.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn concentration_matches_reported_splits() {
        // Closed-form sums, top ceil(0.2 n) models.
        let r = gen_rates(20, 2.1, 20.0).unwrap();
        assert!(top_share(&r, 0.2) >= 0.85);
        let r = gen_rates(20, 0.9, 20.0).unwrap();
        assert!((top_share(&r, 0.2) - 0.5).abs() <= 0.05);
    }

    #[test]
    fn bad_rate_params() {
        assert!(gen_rates(0, 1.0, 1.0).is_err());
        assert!(gen_rates(3, -1.0, 1.0).is_err());
        assert!(gen_rates(3, 1.0, 0.0).is_err());
    }

    #[test]
    fn zero_rate_is_empty() {
        assert!(gen_arrivals(0.0, 100.0, 1, "a").unwrap().is_empty());
    }

    #[test]
    fn arrivals_deterministic_and_sorted() {
        let a = gen_arrivals(3.0, 100.0, 9, "a").unwrap();
        let b = gen_arrivals(3.0, 100.0, 9, "a").unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
        assert!(a.iter().all(|&t| (0.0..=100.0).contains(&t)));
    }

    #[test]
    fn poisson_count_within_three_sigma() {
        let a = gen_arrivals(2.0, 10_000.0, 3, "count").unwrap();
        let mean = 20_000.0f64;
        assert!((a.len() as f64 - mean).abs() <= 3.0 * mean.sqrt(), "count {}", a.len());
    }

    #[test]
    fn constant_and_histogram_lengths() {
        let v = sample_lengths(&LengthDist::Constant { value: 161 }, 100, 1, "p").unwrap();
        assert!(v.iter().all(|&x| x == 161));
        let h = LengthDist::Empirical { bins: vec![(100, 1.0)] };
        let v = sample_lengths(&h, 100, 1, "p").unwrap();
        assert!(v.iter().all(|&x| x == 100));
    }

    #[test]
    fn default_means_within_five_percent() {
        let n = 100_000;
        let p = sample_lengths(&LengthDist::sharegpt_prompt(), n, 11, "p").unwrap();
        let o = sample_lengths(&LengthDist::sharegpt_output(), n, 11, "o").unwrap();
        let mp = p.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let mo = o.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        assert!((mp / 161.0 - 1.0).abs() <= 0.05, "prompt mean {mp}");
        assert!((mo / 338.0 - 1.0).abs() <= 0.05, "output mean {mo}");
        assert!(p.iter().chain(o.iter()).all(|&x| x >= 1));
    }

    #[test]
    fn malformed_descriptor_rejected() {
        assert!(LengthDist::Constant { value: 0 }.validate().is_err());
        assert!(LengthDist::Empirical { bins: vec![] }.validate().is_err());
        assert!(LengthDist::LogNormal { mu: 1.0, sigma: -1.0, max: None }.validate().is_err());
        let parsed: Result<LengthDist, _> = serde_json::from_str(r#"{"kind":"weird"}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn trace_round_trip() {
        let spec = WorkloadSpec {
            llms: vec![
                LlmWorkload {
                    llm: "a".into(),
                    rate: 2.0,
                    prompt_len: LengthDist::sharegpt_prompt(),
                    output_len: LengthDist::sharegpt_output(),
                },
                LlmWorkload {
                    llm: "b".into(),
                    rate: 0.5,
                    prompt_len: LengthDist::Constant { value: 7 },
                    output_len: LengthDist::Constant { value: 3 },
                },
            ],
            horizon_s: 30.0,
            seed: 4,
        };
        let reqs = spec.generate().unwrap();
        assert!(!reqs.is_empty());
        let mut buf = Vec::new();
        write_trace(&reqs, &mut buf).unwrap();
        assert_eq!(read_trace(buf.as_slice()).unwrap(), reqs);
    }

    #[test]
    fn empty_trace_file() {
        assert!(read_trace("".as_bytes()).unwrap().is_empty());
        let mut buf = Vec::new();
        write_trace(&[], &mut buf).unwrap();
        assert!(read_trace(buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn malformed_row_names_line() {
        let text = "id,llm,arrival_s,prompt_len,output_len\n0,a,0.5,10,3\n1,a,oops,10,3\n";
        match read_trace(text.as_bytes()) {
            Err(WorkloadError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let text = "id,llm,arrival_s,prompt_len,output_len\n0,a,0.5,0,3\n";
        match read_trace(text.as_bytes()) {
            Err(WorkloadError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rates_follow_closed_form(n in 1usize..60, alpha in 0.0f64..3.0, max_rate in 0.01f64..100.0) {
                let r = gen_rates(n, alpha, max_rate).unwrap();
                prop_assert_eq!(r.len(), n);
                prop_assert_eq!(r[0], max_rate);
                for (i, x) in r.iter().enumerate() {
                    let want = max_rate / ((i + 1) as f64).powf(alpha);
                    prop_assert!((x - want).abs() <= 1e-12 * want);
                }
                prop_assert!(r.windows(2).all(|w| w[1] <= w[0]));
            }

            #[test]
            fn arrivals_sorted_inside_horizon(rate in 0.0f64..50.0, horizon in 0.5f64..100.0, seed: u64) {
                let a = gen_arrivals(rate, horizon, seed, "p").unwrap();
                prop_assert!(a.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(a.iter().all(|t| *t >= 0.0 && *t <= horizon));
                prop_assert_eq!(a, gen_arrivals(rate, horizon, seed, "p").unwrap());
            }

            #[test]
            fn sampled_lengths_at_least_one(mean in 0.5f64..2000.0, sigma in 0.0f64..2.5, seed: u64) {
                let d = LengthDist::LogNormalMean { mean, sigma, max: Some(8192) };
                let v = sample_lengths(&d, 200, seed, "len").unwrap();
                prop_assert!(v.iter().all(|x| (1..=8192).contains(x)));
            }
        }
    }
}

use super::{Assignment, CandidateSet, Mesh, PlacementError, PlacementInput};

/// SM fraction and memory bytes LLM `i` needs on a mesh of `mesh_size`
/// GPUs, or `None` if it has no candidate there.
pub(crate) fn requirements(
    input: &PlacementInput,
    cands: &CandidateSet,
    i: usize,
    mesh_size: u32,
) -> Option<(f64, f64)> {
    let c = cands.get(i, mesh_size)?;
    let d = &input.llms[i];
    let mem = d.spec.weight_bytes as f64 + c.batch as f64 * d.request_kv_bytes(&input.kv);
    Some((c.num_sm, mem))
}

/// The 0/1 program: maximise `sum w_i p_ij x_ij` with one mesh per LLM and
/// per-mesh SM and memory budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct IlpInstance {
    pub w: Vec<f64>,
    /// `p[i][j]`; `None` where LLM `i` has no candidate for mesh `j`.
    pub p: Vec<Vec<Option<f64>>>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub sm_cap: Vec<f64>,
    pub mem_cap: Vec<f64>,
}

const SLACK: f64 = 1e-9;

impl IlpInstance {
    pub fn from_group(input: &PlacementInput, cands: &CandidateSet, meshes: &[Mesh]) -> Self {
        let n = input.llms.len();
        let mut p = vec![vec![None; meshes.len()]; n];
        let mut a = vec![vec![0.0; meshes.len()]; n];
        let mut b = vec![vec![0.0; meshes.len()]; n];
        for i in 0..n {
            for (j, m) in meshes.iter().enumerate() {
                if let Some((sm, mem)) = requirements(input, cands, i, m.size()) {
                    p[i][j] = Some(cands.get(i, m.size()).expect("has candidate").est_tpt);
                    a[i][j] = sm;
                    b[i][j] = mem;
                }
            }
        }
        IlpInstance {
            w: input.llms.iter().map(|l| l.rate).collect(),
            p,
            a,
            b,
            sm_cap: vec![1.0; meshes.len()],
            mem_cap: meshes.iter().map(|m| input.usable_bytes(m.size())).collect(),
        }
    }

    pub fn num_llms(&self) -> usize {
        self.w.len()
    }

    pub fn num_meshes(&self) -> usize {
        self.sm_cap.len()
    }

    pub fn dims(&self) -> usize {
        self.num_llms() * self.num_meshes()
    }

    fn gain(&self, i: usize, j: usize) -> Option<f64> {
        self.p[i][j].map(|p| self.w[i] * p)
    }

    /// Objective of a full assignment, or `None` if it breaks a constraint.
    pub fn evaluate(&self, mesh_of: &[usize]) -> Option<f64> {
        let mut sm = vec![0.0; self.num_meshes()];
        let mut mem = vec![0.0; self.num_meshes()];
        let mut obj = 0.0;
        for (i, &j) in mesh_of.iter().enumerate() {
            obj += self.gain(i, j)?;
            sm[j] += self.a[i][j];
            mem[j] += self.b[i][j];
        }
        let fits = (0..self.num_meshes())
            .all(|j| sm[j] <= self.sm_cap[j] + SLACK && mem[j] <= self.mem_cap[j]);
        fits.then_some(obj)
    }

    /// Exact branch-and-bound. Returns the optimum and its assignment.
    pub fn solve(&self) -> Option<(f64, Vec<usize>)> {
        let n = self.num_llms();
        let m = self.num_meshes();
        let best_gain: Vec<f64> = (0..n)
            .map(|i| (0..m).filter_map(|j| self.gain(i, j)).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        if best_gain.contains(&f64::NEG_INFINITY) {
            return None;
        }
        // Branch on the most valuable LLMs first for tighter bounds.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| best_gain[y].total_cmp(&best_gain[x]).then(x.cmp(&y)));
        let mut suffix = vec![0.0; n + 1];
        for k in (0..n).rev() {
            suffix[k] = suffix[k + 1] + best_gain[order[k]];
        }

        struct Search<'a> {
            inst: &'a IlpInstance,
            order: Vec<usize>,
            suffix: Vec<f64>,
            sm: Vec<f64>,
            mem: Vec<f64>,
            cur: Vec<usize>,
            best: Option<(f64, Vec<usize>)>,
        }

        fn go(s: &mut Search<'_>, k: usize, value: f64) {
            if let Some((b, _)) = &s.best {
                if value + s.suffix[k] <= *b {
                    return;
                }
            }
            if k == s.order.len() {
                s.best = Some((value, s.cur.clone()));
                return;
            }
            let i = s.order[k];
            for j in 0..s.inst.num_meshes() {
                let Some(g) = s.inst.gain(i, j) else { continue };
                let (a, b) = (s.inst.a[i][j], s.inst.b[i][j]);
                if s.sm[j] + a > s.inst.sm_cap[j] + SLACK || s.mem[j] + b > s.inst.mem_cap[j] {
                    continue;
                }
                s.sm[j] += a;
                s.mem[j] += b;
                s.cur[i] = j;
                go(s, k + 1, value + g);
                s.sm[j] -= a;
                s.mem[j] -= b;
            }
        }

        let mut s = Search {
            inst: self,
            order,
            suffix,
            sm: vec![0.0; m],
            mem: vec![0.0; m],
            cur: vec![usize::MAX; n],
            best: None,
        };
        go(&mut s, 0, 0.0);
        s.best
    }
}

/// Full enumeration of the `m^n` assignments; the reference for `solve`.
pub fn ilp_assignments_brute_force(inst: &IlpInstance) -> Option<(f64, Vec<usize>)> {
    let n = inst.num_llms();
    let m = inst.num_meshes();
    if m == 0 {
        return None;
    }
    let mut cur = vec![0usize; n];
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        if let Some(v) = inst.evaluate(&cur) {
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                best = Some((v, cur.clone()));
            }
        }
        let mut k = 0;
        loop {
            if k == n {
                return best;
            }
            cur[k] += 1;
            if cur[k] < m {
                break;
            }
            cur[k] = 0;
            k += 1;
        }
    }
}

/// Exact placement of the LLMs onto one mesh group.
pub fn ilp_place(
    input: &PlacementInput,
    cands: &CandidateSet,
    meshes: &[Mesh],
) -> Result<Assignment, PlacementError> {
    let inst = IlpInstance::from_group(input, cands, meshes);
    if inst.dims() > input.options.ilp_max_dims {
        return Err(PlacementError::IlpTooLarge {
            dims: inst.dims(),
            max: input.options.ilp_max_dims,
        });
    }
    let (_, mesh_of) = inst
        .solve()
        .ok_or_else(|| PlacementError::Infeasible("ILP constraints admit no assignment".into()))?;
    Ok(Assignment {
        meshes: meshes.to_vec(),
        mesh_of,
    })
}

/// Objective of `asg` under the exact backend's formulation (0 if the
/// assignment breaks its constraints).
pub fn ilp_objective(input: &PlacementInput, cands: &CandidateSet, asg: &Assignment) -> f64 {
    IlpInstance::from_group(input, cands, &asg.meshes)
        .evaluate(&asg.mesh_of)
        .unwrap_or(0.0)
}

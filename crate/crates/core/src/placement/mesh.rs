use super::{CandidateSet, Mesh, PlacementInput};

/// Non-increasing sequences of `sizes` summing to `total`, or leaving a
/// remainder smaller than every size. Largest parts first.
fn node_partitions(total: u32, sizes: &[u32]) -> Vec<Vec<u32>> {
    fn rec(left: u32, max_part: u32, sizes: &[u32], cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        let fits: Vec<u32> = sizes.iter().copied().filter(|s| *s <= left && *s <= max_part).collect();
        let min_size = sizes.iter().copied().min().unwrap_or(u32::MAX);
        if fits.is_empty() {
            if left < min_size && !cur.is_empty() {
                out.push(cur.clone());
            }
            return;
        }
        for s in fits {
            cur.push(s);
            rec(left - s, s, sizes, cur, out);
            cur.pop();
        }
    }
    let mut sizes: Vec<u32> = sizes.to_vec();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes.dedup();
    let mut out = Vec::new();
    rec(total, u32::MAX, &sizes, &mut Vec::new(), &mut out);
    out
}

/// Candidate mesh groups for the cluster. Meshes never span nodes; groups
/// that differ only by permuting nodes are listed once; groups that cannot
/// hold the total weights, or in which some LLM has no mesh it fits on, are
/// dropped.
pub fn enumerate_mesh_groups(input: &PlacementInput, cands: &CandidateSet) -> Vec<Vec<Mesh>> {
    let c = &input.cluster;
    let sizes: Vec<u32> = input
        .options
        .tp_list
        .iter()
        .copied()
        .filter(|s| *s <= c.gpus_per_node)
        .collect();
    let parts = node_partitions(c.gpus_per_node, &sizes);
    if parts.is_empty() {
        return Vec::new();
    }
    let total_weights: f64 = input.llms.iter().map(|l| l.spec.weight_bytes as f64).sum();

    let mut groups = Vec::new();
    // Non-decreasing partition index per node = multiset over nodes.
    let mut idx = vec![0usize; c.num_nodes as usize];
    loop {
        let mut meshes = Vec::new();
        for (node, &p) in idx.iter().enumerate() {
            let mut next = node as u32 * c.gpus_per_node;
            for &size in &parts[p] {
                meshes.push(Mesh {
                    node: node as u32,
                    gpu_ids: (next..next + size).collect(),
                });
                next += size;
            }
        }
        let usable: f64 = meshes.iter().map(|m| input.usable_bytes(m.size())).sum();
        let every_llm_fits =
            (0..input.llms.len()).all(|i| meshes.iter().any(|m| cands.get(i, m.size()).is_some()));
        if usable >= total_weights && every_llm_fits {
            groups.push(meshes);
        }
        // advance the multiset counter
        let mut k = idx.len();
        loop {
            if k == 0 {
                return groups;
            }
            k -= 1;
            if idx[k] + 1 < parts.len() {
                let v = idx[k] + 1;
                for slot in idx[k..].iter_mut() {
                    *slot = v;
                }
                break;
            }
        }
    }
}

//! Noise and stability measures: SNR, earth mover's distance between maps,
//! and rotation-error statistics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::analysis::ScalarMap;
use crate::error::{Error, Result};
use crate::geometry::circular_diff;
use crate::lattice::CrystalImage;

/// Default histogram side for [`emd`].
pub const DEFAULT_EMD_GRID: usize = 32;

/// Summary of one noise level of a stability sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub snr_db: f64,
    pub emd: f64,
    pub rot_mean_deg: f64,
    pub rot_std_deg: f64,
    pub n_realizations: usize,
}

/// `10·log₁₀(Var(f)/Var(e))` with population variances.
pub fn snr(signal: &CrystalImage, noise: &CrystalImage) -> Result<f64> {
    if signal.len() != noise.len() {
        return Err(Error::ShapeMismatch("signal and noise differ in size".into()));
    }
    let ve = noise.variance();
    if !(ve > 0.0) {
        return Err(Error::ZeroNoiseVariance);
    }
    Ok(10.0 * (signal.variance() / ve).log10())
}

/// Noise standard deviation giving the requested SNR against `signal`.
pub fn sigma_for_snr(signal: &CrystalImage, snr_db: f64) -> f64 {
    (signal.variance() / 10f64.powf(snr_db / 10.0)).sqrt()
}

/// Mean and population standard deviation of the circular difference
/// `noisy − clean` on the 60° circle, folded to `(−30°, 30°]`, over cells
/// valid in both maps.
pub fn rotation_error(noisy: &ScalarMap, clean: &ScalarMap) -> Result<(f64, f64)> {
    if noisy.values.dim() != clean.values.dim() {
        return Err(Error::ShapeMismatch("angle maps differ in shape".into()));
    }
    let diffs: Vec<f64> = noisy
        .values
        .iter()
        .zip(clean.values.iter())
        .zip(noisy.valid.iter().zip(clean.valid.iter()))
        .filter(|(_, (a, b))| **a && **b)
        .map(|((x, y), _)| circular_diff(*x, *y, 60.0))
        .collect();
    if diffs.is_empty() {
        return Err(Error::Undefined("angle maps share no valid cells".into()));
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Grayscale level `round(255·clamp(v, 0, 1))`; invalid cells count as 0.
fn grayscale(map: &ScalarMap) -> Array2<u64> {
    Array2::from_shape_fn(map.values.dim(), |(i, j)| match map.get(i, j) {
        Some(v) if v.is_finite() => (255.0 * v.clamp(0.0, 1.0)).round() as u64,
        _ => 0,
    })
}

/// Sums `k×k` blocks.
fn block_sum(g: &Array2<u64>, k: usize) -> Array2<u64> {
    let (r, c) = g.dim();
    let mut out = Array2::zeros((r.div_ceil(k), c.div_ceil(k)));
    for ((i, j), v) in g.indexed_iter() {
        out[[i / k, j / k]] += v;
    }
    out
}

/// Earth mover's distance between two non-negative maps.
///
/// Both maps are quantized to 8-bit gray levels, block-summed to at most
/// `grid × grid` bins and normalized to unit mass. The optimal transport
/// work under Euclidean ground distance (in original cells) is scaled by the
/// mean gray-level total per cell, so moving a full-intensity cell by one
/// cell in an `n`-cell map costs `255/n`.
pub fn emd(a: &ScalarMap, b: &ScalarMap, grid: usize) -> Result<f64> {
    if a.values.dim() != b.values.dim() {
        return Err(Error::ShapeMismatch("maps differ in shape".into()));
    }
    if grid == 0 {
        return Err(Error::InvalidParameter("EMD grid must be positive".into()));
    }
    let negative = |m: &ScalarMap| m.values.iter().zip(m.valid.iter()).any(|(v, ok)| *ok && *v < 0.0);
    if negative(a) || negative(b) {
        return Err(Error::InvalidParameter("EMD needs non-negative maps".into()));
    }
    let (ga, gb) = (grayscale(a), grayscale(b));
    let (ta, tb) = (ga.sum(), gb.sum());
    if ta == 0 || tb == 0 {
        return Err(Error::ZeroMass);
    }
    let (rows, cols) = ga.dim();
    let k = rows.max(cols).div_ceil(grid).max(1);
    let (ha, hb) = (block_sum(&ga, k), block_sum(&gb, k));
    let cells = |h: &Array2<u64>| -> Vec<(u64, (f64, f64))> {
        h.indexed_iter()
            .filter(|(_, v)| **v > 0)
            .map(|((i, j), v)| (*v, ((i * k) as f64, (j * k) as f64)))
            .collect()
    };
    let (sa, sb) = (cells(&ha), cells(&hb));
    let work = transport_cost(
        &sa.iter().map(|c| c.0).collect::<Vec<_>>(),
        &sb.iter().map(|c| c.0).collect::<Vec<_>>(),
        |i, j| {
            let (p, q) = (sa[i].1, sb[j].1);
            (p.0 - q.0).hypot(p.1 - q.1)
        },
    );
    let mean_total = (ta + tb) as f64 / 2.0;
    Ok(work * mean_total / (rows * cols) as f64)
}

/// Minimal transport work between the normalized histograms `a/Σa` and
/// `b/Σb` under ground cost `cost(i, j)`.
///
/// Solved exactly with the transportation simplex in integer arithmetic:
/// masses are cross-scaled to a common total and perturbed so every basis
/// is non-degenerate.
pub fn transport_cost(a: &[u64], b: &[u64], cost: impl Fn(usize, usize) -> f64) -> f64 {
    let sources: Vec<usize> = (0..a.len()).filter(|&i| a[i] > 0).collect();
    let sinks: Vec<usize> = (0..b.len()).filter(|&j| b[j] > 0).collect();
    if sources.is_empty() || sinks.is_empty() {
        return 0.0;
    }
    let ta: i128 = sources.iter().map(|&i| a[i] as i128).sum();
    let tb: i128 = sinks.iter().map(|&j| b[j] as i128).sum();
    let m = sources.len();
    // Basic flows deviate from `k·x` by at most `m` in either direction.
    let k = 2 * m as i128 + 1;
    let supply: Vec<i128> = sources.iter().map(|&i| a[i] as i128 * tb * k + 1).collect();
    let mut demand: Vec<i128> = sinks.iter().map(|&j| b[j] as i128 * ta * k).collect();
    *demand.last_mut().expect("nonempty") += m as i128;
    let n = sinks.len();
    let costs: Vec<f64> = sources.iter().flat_map(|&i| sinks.iter().map(move |&j| (i, j))).map(|(i, j)| cost(i, j)).collect();
    let flows = TransportSimplex::new(supply, demand, costs).solve();
    let total: f64 = flows.arcs.iter().map(|&(s, t, x)| ((x + m as i128) / k) as f64 * flows.costs[s * n + t]).sum();
    total / (ta * tb) as f64
}

/// Spanning-tree transportation simplex over `m` sources and `n` sinks.
struct TransportSimplex {
    m: usize,
    n: usize,
    /// Row-major `m×n` ground costs.
    costs: Vec<f64>,
    /// Basic arcs `(source, sink, flow)`; always `m + n − 1` of them.
    arcs: Vec<(usize, usize, i128)>,
    /// Arc indices incident to each node; sinks are numbered from `m`.
    adjacency: Vec<Vec<usize>>,
}

impl TransportSimplex {
    /// Matrix-minimum start: fill cells in order of increasing cost. The
    /// perturbation guarantees each allocation exhausts exactly one row or
    /// column until the last, so the result is a spanning tree.
    fn new(mut supply: Vec<i128>, mut demand: Vec<i128>, costs: Vec<f64>) -> Self {
        let (m, n) = (supply.len(), demand.len());
        let mut order: Vec<usize> = (0..m * n).collect();
        order.sort_unstable_by(|&x, &y| costs[x].total_cmp(&costs[y]).then(x.cmp(&y)));
        let mut arcs = Vec::with_capacity(m + n - 1);
        for idx in order {
            let (i, j) = (idx / n, idx % n);
            if supply[i] == 0 || demand[j] == 0 {
                continue;
            }
            let x = supply[i].min(demand[j]);
            arcs.push((i, j, x));
            supply[i] -= x;
            demand[j] -= x;
            if arcs.len() == m + n - 1 {
                break;
            }
        }
        debug_assert_eq!(arcs.len(), m + n - 1);
        let mut adjacency = vec![Vec::new(); m + n];
        for (idx, &(s, t, _)) in arcs.iter().enumerate() {
            adjacency[s].push(idx);
            adjacency[m + t].push(idx);
        }
        Self { m, n, costs, arcs, adjacency }
    }

    fn cost(&self, s: usize, t: usize) -> f64 {
        self.costs[s * self.n + t]
    }

    /// Potentials and BFS tree (parent arc, depth) rooted at source 0.
    fn potentials(&self) -> (Vec<f64>, Vec<Option<usize>>, Vec<usize>) {
        let nodes = self.m + self.n;
        let mut pot = vec![0.0; nodes];
        let mut parent = vec![None; nodes];
        let mut depth = vec![0; nodes];
        let mut seen = vec![false; nodes];
        let mut queue = std::collections::VecDeque::from([0]);
        seen[0] = true;
        while let Some(x) = queue.pop_front() {
            for &arc in &self.adjacency[x] {
                let (s, t, _) = self.arcs[arc];
                let y = if x == s { self.m + t } else { s };
                if seen[y] {
                    continue;
                }
                seen[y] = true;
                // u_s + v_t = c(s, t)
                pot[y] = self.cost(s, t) - pot[x];
                parent[y] = Some(arc);
                depth[y] = depth[x] + 1;
                queue.push_back(y);
            }
        }
        (pot, parent, depth)
    }

    fn other_end(&self, arc: usize, node: usize) -> usize {
        let (s, t, _) = self.arcs[arc];
        if node == s {
            self.m + t
        } else {
            s
        }
    }

    /// Re-hangs the subtree now attached through `arc` below its other
    /// endpoint `top`, refreshing parents, depths and potentials.
    fn rehang(&self, top: usize, arc: usize, tree: &mut Tree) {
        let parent_node = self.other_end(arc, top);
        let mut stack = vec![(top, arc, parent_node)];
        while let Some((x, via, from)) = stack.pop() {
            let (s, t, _) = self.arcs[via];
            tree.pot[x] = self.cost(s, t) - tree.pot[from];
            tree.parent[x] = Some(via);
            tree.depth[x] = tree.depth[from] + 1;
            for &next in &self.adjacency[x] {
                if next != via {
                    stack.push((self.other_end(next, x), next, x));
                }
            }
        }
    }

    fn solve(mut self) -> Self {
        let (m, n) = (self.m, self.n);
        let cells = m * n;
        let scale = self.costs.iter().fold(0.0f64, |acc, c| acc.max(c.abs()));
        let tol = 1e-11 * scale.max(1.0);
        let block = ((cells as f64).sqrt().ceil() as usize).max(32).min(cells);
        let mut cursor = 0;
        let (pot, parent, depth) = self.potentials();
        let mut tree = Tree { pot, parent, depth };
        let mut from_sink = Vec::new();
        let mut from_source = Vec::new();
        loop {
            // Block search for an improving cell.
            let mut entering = None;
            let mut scanned = 0;
            while scanned < cells {
                let mut best = (-tol, None);
                for step in 0..block.min(cells - scanned) {
                    let idx = (cursor + step) % cells;
                    let (i, j) = (idx / n, idx % n);
                    let reduced = self.costs[idx] - tree.pot[i] - tree.pot[m + j];
                    if reduced < best.0 {
                        best = (reduced, Some((i, j)));
                    }
                }
                scanned += block;
                cursor = (cursor + block) % cells;
                if best.1.is_some() {
                    entering = best.1;
                    break;
                }
            }
            let Some((ei, ej)) = entering else {
                return self;
            };

            // Tree path from sink ej up to the common ancestor and down to source ei.
            from_sink.clear();
            from_source.clear();
            let (mut x, mut y) = (m + ej, ei);
            while tree.depth[x] > tree.depth[y] {
                let arc = tree.parent[x].expect("non-root");
                from_sink.push(arc);
                x = self.other_end(arc, x);
            }
            while tree.depth[y] > tree.depth[x] {
                let arc = tree.parent[y].expect("non-root");
                from_source.push(arc);
                y = self.other_end(arc, y);
            }
            while x != y {
                let a1 = tree.parent[x].expect("non-root");
                from_sink.push(a1);
                x = self.other_end(a1, x);
                let a2 = tree.parent[y].expect("non-root");
                from_source.push(a2);
                y = self.other_end(a2, y);
            }
            let sink_side = from_sink.len();
            let path = || from_sink.iter().chain(from_source.iter().rev());
            // The entering arc gains flow; path arcs alternate starting with a loss.
            let (mut theta, mut leaving) = (i128::MAX, usize::MAX);
            for (pos, &arc) in path().enumerate() {
                if pos % 2 == 0 && self.arcs[arc].2 < theta {
                    theta = self.arcs[arc].2;
                    leaving = pos;
                }
            }
            let mut slot = usize::MAX;
            for (pos, &arc) in path().enumerate() {
                if pos % 2 == 0 {
                    self.arcs[arc].2 -= theta;
                } else {
                    self.arcs[arc].2 += theta;
                }
                if pos == leaving {
                    slot = arc;
                }
            }
            let (ls, lt, _) = self.arcs[slot];
            self.adjacency[ls].retain(|&a| a != slot);
            self.adjacency[m + lt].retain(|&a| a != slot);
            self.arcs[slot] = (ei, ej, theta);
            self.adjacency[ei].push(slot);
            self.adjacency[m + ej].push(slot);
            // The leaving arc cut off the side of the path it sat on.
            let top = if leaving < sink_side { m + ej } else { ei };
            self.rehang(top, slot, &mut tree);
        }
    }
}

/// Rooted view of the current basis.
struct Tree {
    pot: Vec<f64>,
    parent: Vec<Option<usize>>,
    depth: Vec<usize>,
}

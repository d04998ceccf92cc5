//! Deliberately naive reference implementations.

#![allow(clippy::needless_range_loop, clippy::manual_contains)]

use duoserve_core::predictor::ExpertMlp;
use duoserve_core::{GeneratorParams, TraceDataset};

/// Brute-force popularity and affinity: one pass per (layer, expert) cell.
pub struct StatsOracle {
    pub pop_counts: Vec<Vec<u64>>,
    pub pop: Vec<Vec<f64>>,
    pub aff_counts: Vec<Vec<Vec<u64>>>,
    pub aff: Vec<Vec<Vec<f64>>>,
}

pub fn stats_oracle(ds: &TraceDataset) -> Option<StatsOracle> {
    if ds.traces.is_empty() {
        return None;
    }
    let s = ds.shape();
    let (l_n, m_n) = (s.layers, s.experts);
    let mut pop_counts = vec![vec![0u64; m_n]; l_n];
    for l in 0..l_n {
        for i in 0..m_n {
            for t in &ds.traces {
                if t.path[l].iter().any(|&e| e == i) {
                    pop_counts[l][i] += 1;
                }
            }
        }
    }
    let pop = pop_counts
        .iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            row.iter().map(|&c| c as f64 / total as f64).collect()
        })
        .collect();

    let mut aff_counts = vec![vec![vec![0u64; m_n]; m_n]; l_n.saturating_sub(1)];
    for l in 0..l_n.saturating_sub(1) {
        for i in 0..m_n {
            for j in 0..m_n {
                for t in &ds.traces {
                    if t.path[l].contains(&i) && t.path[l + 1].contains(&j) {
                        aff_counts[l][i][j] += 1;
                    }
                }
            }
        }
    }
    let aff = aff_counts
        .iter()
        .map(|pair| {
            pair.iter()
                .map(|row| {
                    let total: u64 = row.iter().sum();
                    if total == 0 {
                        vec![0.0; m_n]
                    } else {
                        row.iter().map(|&c| c as f64 / total as f64).collect()
                    }
                })
                .collect()
        })
        .collect();
    Some(StatsOracle {
        pop_counts,
        pop,
        aff_counts,
        aff,
    })
}

/// Eval-mode forward pass with explicit loops.
pub fn naive_forward(net: &ExpertMlp<f64>, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let last = net.dense.len() - 1;
    for (li, d) in net.dense.iter().enumerate() {
        let (fan_in, fan_out) = d.weight.dim();
        assert_eq!(h.len(), fan_in);
        let mut out = vec![0.0; fan_out];
        for (o, slot) in out.iter_mut().enumerate() {
            let mut acc = d.bias[o];
            for (i, hv) in h.iter().enumerate() {
                acc += hv * d.weight[[i, o]];
            }
            *slot = acc;
        }
        if li < last {
            let bn = &net.norms[li];
            for (o, v) in out.iter_mut().enumerate() {
                let norm = (*v - bn.running_mean[o]) / (bn.running_var[o] + net.arch.bn_eps).sqrt();
                *v = (bn.gamma[o] * norm + bn.beta[o]).max(0.0);
            }
        }
        h = out;
    }
    h.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect()
}

/// Batch-mean of the summed per-expert binary cross-entropy.
pub fn bce_oracle(p: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let eps = 1e-7;
    let mut total = 0.0;
    for (pr, yr) in p.iter().zip(y) {
        for (&pi, &yi) in pr.iter().zip(yr) {
            let c = pi.max(eps).min(1.0 - eps);
            total -= yi * c.ln() + (1.0 - yi) * (1.0 - c).ln();
        }
    }
    total / p.len() as f64
}

/// `1 - C(M-k, k) / C(M, k)`: chance that a uniformly random `k`-set meets a fixed `k`-set.
pub fn random_guess_rate(m: u64, k: u64) -> f64 {
    fn choose(n: u64, r: u64) -> f64 {
        if r > n {
            return 0.0;
        }
        (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }
    1.0 - choose(m - k, k) / choose(m, k)
}

fn subsets(m: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, m: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..m {
            cur.push(i);
            rec(i + 1, m, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, m, k, &mut Vec::new(), &mut out);
    out
}

/// Probability that successive renormalized draws without replacement from
/// `w` produce exactly the set `s`, summed over every draw order.
fn set_probability(w: &[f64], s: &[usize]) -> f64 {
    fn rec(w: &[f64], remaining: &mut Vec<usize>, used_mass: f64) -> f64 {
        if remaining.is_empty() {
            return 1.0;
        }
        let total: f64 = w.iter().sum::<f64>() - used_mass;
        let mut p = 0.0;
        for idx in 0..remaining.len() {
            let e = remaining.remove(idx);
            if w[e] > 0.0 {
                p += w[e] / total * rec(w, remaining, used_mass + w[e]);
            }
            remaining.insert(idx, e);
        }
        p
    }
    rec(w, &mut s.to_vec(), 0.0)
}

/// The generator as a Markov chain over `k`-subsets.
pub struct GeneratorChain {
    pub subsets: Vec<Vec<usize>>,
    /// `marginals[l][s]`: probability that layer `l` selects `subsets[s]`.
    pub marginals: Vec<Vec<f64>>,
    /// `affinity[l][i][j]`: P(j selected at l+1 | i selected at l).
    pub affinity: Vec<Vec<Vec<f64>>>,
    /// `inclusion[l][i]`: P(i selected at l).
    pub inclusion: Vec<Vec<f64>>,
}

pub fn generator_chain(params: &GeneratorParams, m: usize, k: usize) -> GeneratorChain {
    let sets = subsets(m, k);
    let layers = params.base_popularity.len();
    let next_dist = |l: usize, prev: &[usize]| -> Vec<f64> {
        (0..m)
            .map(|j| {
                let mean: f64 = prev.iter().map(|&i| params.base_affinity[l][i][j]).sum::<f64>() / prev.len() as f64;
                params.alpha * mean + (1.0 - params.alpha) / m as f64
            })
            .collect()
    };
    let mut marginals = vec![sets
        .iter()
        .map(|s| set_probability(&params.base_popularity[0], s))
        .collect::<Vec<f64>>()];
    let mut affinity = Vec::new();
    for l in 0..layers - 1 {
        let mut joint = vec![vec![0.0; m]; m];
        let mut next = vec![0.0; sets.len()];
        for (si, s) in sets.iter().enumerate() {
            let ps = marginals[l][si];
            if ps == 0.0 {
                continue;
            }
            let q = next_dist(l, s);
            for (ti, t) in sets.iter().enumerate() {
                let pt = ps * set_probability(&q, t);
                next[ti] += pt;
                for &i in s {
                    for &j in t {
                        joint[i][j] += pt;
                    }
                }
            }
        }
        affinity.push(
            joint
                .into_iter()
                .map(|row| {
                    let total: f64 = row.iter().sum();
                    if total == 0.0 {
                        row
                    } else {
                        row.into_iter().map(|v| v / total).collect()
                    }
                })
                .collect(),
        );
        marginals.push(next);
    }
    let inclusion = marginals
        .iter()
        .map(|mg| {
            (0..m)
                .map(|i| {
                    sets.iter()
                        .zip(mg)
                        .filter(|(s, _)| s.contains(&i))
                        .map(|(_, p)| p)
                        .sum()
                })
                .collect()
        })
        .collect();
    GeneratorChain {
        subsets: sets,
        marginals,
        affinity,
        inclusion,
    }
}

/// The literal per-row reading: `alpha * base_affinity[l][i] + (1 - alpha) / M`.
pub fn alpha_mixed_rows(params: &GeneratorParams, m: usize) -> Vec<Vec<Vec<f64>>> {
    params
        .base_affinity
        .iter()
        .map(|pair| {
            pair.iter()
                .map(|row| {
                    row.iter()
                        .map(|v| params.alpha * v + (1.0 - params.alpha) / m as f64)
                        .collect()
                })
                .collect()
        })
        .collect()
}

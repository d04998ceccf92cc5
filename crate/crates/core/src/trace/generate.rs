//! Seeded synthetic trace generation.
//!
//! Layer 0 is drawn from a popularity vector; every later layer is drawn
//! from `alpha * mean(affinity rows of the previous layer's experts) +
//! (1 - alpha) * uniform`. Each of the `k` experts is a sequential
//! renormalized draw without replacement.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActivationTrace, ModelRef, Phase, Provenance, Result, TraceDataset, TraceError};
use crate::config::{ModelConfig, ModelShape};

const ROW_TOLERANCE: f64 = 1e-9;

/// Ground-truth parameters of the synthetic activation process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    /// `L x M`; only layer 0 drives sampling, later rows are kept for reference.
    pub base_popularity: Vec<Vec<f64>>,
    /// `(L-1) x M x M`, row-stochastic.
    pub base_affinity: Vec<Vec<Vec<f64>>>,
    /// Weight of the affinity-driven component, in `[0, 1]`.
    pub alpha: f64,
    pub seed: u64,
}

impl GeneratorParams {
    /// Random structured parameters derived from `seed`.
    ///
    /// Popularity weights are drawn from `[1, 3)` and normalized, so the
    /// favourite expert of a layer is at most three times as likely as the
    /// least favoured one. Each layer pair routes expert `i` to a single
    /// expert `perm(i)` of the next layer through a random permutation,
    /// which makes `alpha = 1` a noiseless chain.
    pub fn synthetic(cfg: &ModelConfig, alpha: f64, seed: u64) -> Self {
        let (layers, experts) = (cfg.num_layers, cfg.num_experts);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x5eed_ba5e);
        let base_popularity = (0..layers)
            .map(|_| {
                let w: Vec<f64> = (0..experts).map(|_| 1.0 + 2.0 * rng.random::<f64>()).collect();
                let sum: f64 = w.iter().sum();
                w.into_iter().map(|x| x / sum).collect()
            })
            .collect();
        let base_affinity = (1..layers)
            .map(|_| {
                let mut perm: Vec<usize> = (0..experts).collect();
                perm.shuffle(&mut rng);
                perm.iter()
                    .map(|&target| {
                        let mut row = vec![0.0; experts];
                        row[target] = 1.0;
                        row
                    })
                    .collect()
            })
            .collect();
        GeneratorParams {
            base_popularity,
            base_affinity,
            alpha,
            seed,
        }
    }

    pub fn validate(&self, shape: ModelShape) -> Result<()> {
        let fail = |msg: String| Err(TraceError::Generation(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if self.base_popularity.len() != shape.layers {
            return fail(format!(
                "popularity has {} layers, expected {}",
                self.base_popularity.len(),
                shape.layers
            ));
        }
        if self.base_affinity.len() != shape.layers.saturating_sub(1) {
            return fail(format!(
                "affinity has {} layer pairs, expected {}",
                self.base_affinity.len(),
                shape.layers.saturating_sub(1)
            ));
        }
        let check_row = |row: &[f64], what: String| -> Result<()> {
            if row.len() != shape.experts {
                return fail(format!("{what} has {} entries, expected {}", row.len(), shape.experts));
            }
            if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
                return fail(format!("{what} has a negative or non-finite entry"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return fail(format!("{what} sums to {sum}"));
            }
            Ok(())
        };
        for (l, row) in self.base_popularity.iter().enumerate() {
            check_row(row, format!("popularity row {l}"))?;
        }
        for (l, matrix) in self.base_affinity.iter().enumerate() {
            if matrix.len() != shape.experts {
                return fail(format!("affinity pair {l} has {} rows", matrix.len()));
            }
            for (i, row) in matrix.iter().enumerate() {
                check_row(row, format!("affinity pair {l} row {i}"))?;
            }
        }
        Ok(())
    }

    /// Sampling distribution for `layer >= 1` given the previous layer's experts.
    pub fn next_layer_distribution(&self, layer: usize, previous: &[usize]) -> Vec<f64> {
        let rows = &self.base_affinity[layer - 1];
        let m = rows.len();
        let uniform = (1.0 - self.alpha) / m as f64;
        let scale = self.alpha / previous.len() as f64;
        (0..m)
            .map(|j| uniform + scale * previous.iter().map(|&i| rows[i][j]).sum::<f64>())
            .collect()
    }
}

/// Draws `k` distinct indices from `weights` by sequential renormalized
/// inverse-CDF draws scanned in index order. Returns them ascending.
pub fn sample_without_replacement<R: Rng + ?Sized>(weights: &[f64], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let positive = weights.iter().filter(|&&w| w > 0.0).count();
    if positive < k {
        return Err(TraceError::Generation(format!(
            "only {positive} experts have positive mass, need {k}"
        )));
    }
    let mut taken = vec![false; weights.len()];
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = weights.iter().zip(&taken).filter(|(_, &t)| !t).map(|(&w, _)| w).sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut choice = None;
        for (i, &w) in weights.iter().enumerate() {
            if taken[i] || w <= 0.0 {
                continue;
            }
            acc += w;
            choice = Some(i);
            if target < acc {
                break;
            }
        }
        let i = choice.expect("a positive-mass expert remains");
        taken[i] = true;
        picked.push(i);
    }
    picked.sort_unstable();
    Ok(picked)
}

fn request_rng(seed: u64, request_id: u64) -> ChaCha8Rng {
    // splitmix64 finalizer over the pair keeps per-request streams independent
    let mut z = seed ^ request_id.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn sample_path<R: Rng + ?Sized>(params: &GeneratorParams, shape: ModelShape, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    let mut path = Vec::with_capacity(shape.layers);
    path.push(sample_without_replacement(
        &params.base_popularity[0],
        shape.top_k,
        rng,
    )?);
    for l in 1..shape.layers {
        let q = params.next_layer_distribution(l, &path[l - 1]);
        path.push(sample_without_replacement(&q, shape.top_k, rng)?);
    }
    Ok(path)
}

/// Generates `n_requests` requests of `prefill_len` prefill tokens followed
/// by `decode_len` decode tokens. Request `r` uses a sub-seed derived from
/// `(params.seed, r)`.
pub fn generate_traces(
    params: &GeneratorParams,
    cfg: &ModelConfig,
    n_requests: usize,
    decode_len: usize,
    prefill_len: usize,
) -> Result<TraceDataset> {
    if n_requests < 1 || decode_len < 1 || prefill_len < 1 {
        return Err(TraceError::Generation(
            "requests, decode length and prefill length must all be at least 1".into(),
        ));
    }
    let shape = cfg.shape();
    params.validate(shape)?;
    let mut traces = Vec::with_capacity(n_requests * (decode_len + prefill_len));
    for r in 0..n_requests as u64 {
        let mut rng = request_rng(params.seed, r);
        for pos in 0..prefill_len + decode_len {
            let phase = if pos < prefill_len {
                Phase::Prefill
            } else {
                Phase::Decode
            };
            traces.push(ActivationTrace {
                request_id: r,
                phase,
                token_index: pos as u32,
                path: sample_path(params, shape, &mut rng)?,
            });
        }
    }
    TraceDataset::new(
        ModelRef::from(cfg),
        traces,
        Provenance::Synthetic {
            alpha: params.alpha,
            seed: params.seed,
            requests: n_requests,
            decode_len,
            prefill_len,
            config_digest: None,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg8() -> ModelConfig {
        ModelConfig {
            name: "eight".into(),
            num_layers: 3,
            num_experts: 8,
            top_k: 2,
            total_param_bytes: 1000,
            non_moe_bytes: 40,
            predictor_mem_bytes: 1,
            kv_reserve_bytes: 1,
        }
    }

    #[test]
    fn synthetic_params_are_valid() {
        let cfg = cfg8();
        for alpha in [0.0, 0.5, 1.0] {
            GeneratorParams::synthetic(&cfg, alpha, 11)
                .validate(cfg.shape())
                .unwrap();
        }
    }

    #[test]
    fn out_of_range_alpha_is_rejected() {
        let cfg = cfg8();
        let p = GeneratorParams::synthetic(&cfg, 1.5, 1);
        assert!(p.validate(cfg.shape()).is_err());
    }

    #[test]
    fn deterministic_chain_with_alpha_one() {
        let mut cfg = cfg8();
        cfg.num_experts = 4;
        cfg.num_layers = 2;
        let mut rows = vec![vec![0.0; 4]; 4];
        rows[0][2] = 1.0;
        rows[1][3] = 1.0;
        rows[2][0] = 1.0;
        rows[3][1] = 1.0;
        let params = GeneratorParams {
            base_popularity: vec![vec![0.5, 0.5, 0.0, 0.0], vec![0.25; 4]],
            base_affinity: vec![rows],
            alpha: 1.0,
            seed: 3,
        };
        let ds = generate_traces(&params, &cfg, 20, 5, 1).unwrap();
        for t in &ds.traces {
            assert_eq!(t.path[0], vec![0, 1]);
            assert_eq!(t.path[1], vec![2, 3]);
        }
    }

    #[test]
    fn degenerate_distribution_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_without_replacement(&[1.0, 0.0, 0.0], 2, &mut rng).is_err());
        let picked = sample_without_replacement(&[0.5, 0.0, 0.5], 2, &mut rng).unwrap();
        assert_eq!(picked, vec![0, 2]);
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = cfg8();
        let p = GeneratorParams::synthetic(&cfg, 0.8, 42);
        let a = generate_traces(&p, &cfg, 4, 3, 2).unwrap();
        let b = generate_traces(&p, &cfg, 4, 3, 2).unwrap();
        assert_eq!(a, b);
        let c = generate_traces(&GeneratorParams::synthetic(&cfg, 0.8, 43), &cfg, 4, 3, 2).unwrap();
        assert_ne!(a.traces, c.traces);
    }

    #[test]
    fn request_layout_matches_lengths() {
        let cfg = cfg8();
        let ds = generate_traces(&GeneratorParams::synthetic(&cfg, 0.3, 1), &cfg, 3, 4, 2).unwrap();
        assert_eq!(ds.len(), 3 * 6);
        for r in ds.requests() {
            assert_eq!(r.prefill.len(), 2);
            assert_eq!(r.decode.len(), 4);
            assert_eq!(r.decode[0].token_index, 2);
        }
    }

    #[test]
    fn zero_counts_are_rejected() {
        let cfg = cfg8();
        let p = GeneratorParams::synthetic(&cfg, 0.3, 1);
        assert!(generate_traces(&p, &cfg, 0, 1, 1).is_err());
        assert!(generate_traces(&p, &cfg, 1, 0, 1).is_err());
    }

    #[test]
    fn uniform_limit_with_alpha_zero() {
        let cfg = cfg8();
        let p = GeneratorParams::synthetic(&cfg, 0.0, 5);
        let ds = generate_traces(&p, &cfg, 400, 10, 1).unwrap();
        let mut counts = [0usize; 8];
        for t in &ds.traces {
            for &e in &t.path[2] {
                counts[e] += 1;
            }
        }
        let total = (ds.len() * 2) as f64;
        for c in counts {
            assert!((c as f64 / total - 0.125).abs() < 0.015, "{counts:?}");
        }
    }
}

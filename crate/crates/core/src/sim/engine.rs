//! Per-request scheduling on three serial streams.
//!
//! Every stream keeps a "free at" time. Work is placed in program order:
//! an item starts at the latest of its own earliest time and its stream's
//! free time, so the result equals that of an event loop with FIFO streams.

use super::timeline::{Event, EventKind, EventTimeline, OpKind, Stream};
use super::{ns, Nanos, PrefetchCounts, RequestMetrics, SimError};
use crate::config::{CostModel, ModelConfig, SchedulerPolicy};
use crate::predictor::ExpertPredictor;
use crate::trace::{ActivationTrace, Phase, RequestTraces};

#[derive(Debug, Clone, Copy)]
struct Ctx {
    phase: Phase,
    step: usize,
    layer: usize,
}

/// Prediction-driven prefetch issued at sync point 2 of the previous layer.
#[derive(Debug)]
struct Pending {
    predicted: Vec<usize>,
    issue: Nanos,
}

struct Engine<'a> {
    cost: &'a CostModel,
    experts: usize,
    transfer_ns: Nanos,
    non_moe_ns: Nanos,
    gate_ns: Nanos,
    predict_ns: Nanos,
    link_free: Nanos,
    compute_free: Nanos,
    predict_free: Nanos,
    /// `Some(t)`: free from `t`. `None`: held, release time not yet known.
    slots: Vec<Option<Nanos>>,
    events: Vec<Event>,
    seq: u64,
    pending: Option<Pending>,
    /// Next layer's full-layer transfers under prefetch-all: `(slot, ready)` per expert.
    pending_all: Option<Vec<(usize, Nanos)>>,
    counters: PrefetchCounts,
}

impl<'a> Engine<'a> {
    fn new(policy: SchedulerPolicy, cfg: &ModelConfig, cost: &'a CostModel) -> Self {
        Engine {
            cost,
            experts: cfg.num_experts,
            transfer_ns: ns(cost.transfer_time_s(cfg.expert_bytes())),
            non_moe_ns: ns(cost.non_moe_compute_per_layer_s),
            gate_ns: ns(cost.gate_compute_s),
            predict_ns: ns(cost.predictor_latency_s),
            link_free: 0,
            compute_free: 0,
            predict_free: 0,
            slots: vec![Some(0); policy.slot_count(cfg)],
            events: Vec::new(),
            seq: 0,
            pending: None,
            pending_all: None,
            counters: PrefetchCounts::default(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn emit(
        &mut self,
        time_ns: Nanos,
        stream: Stream,
        kind: EventKind,
        ctx: Ctx,
        expert: Option<usize>,
        op: Option<OpKind>,
        tokens: Option<usize>,
        sync: Option<u8>,
    ) {
        self.events.push(Event {
            time_ns,
            stream,
            kind,
            phase: ctx.phase,
            step: ctx.step,
            layer: ctx.layer,
            expert,
            op,
            tokens,
            sync,
            seq: self.seq,
        });
        self.seq += 1;
    }

    fn op(
        &mut self,
        ctx: Ctx,
        earliest: Nanos,
        dur: Nanos,
        op: OpKind,
        expert: Option<usize>,
        tokens: Option<usize>,
    ) -> Nanos {
        let start = earliest.max(self.compute_free);
        let end = start + dur;
        self.emit(
            start,
            Stream::Compute,
            EventKind::OpStart,
            ctx,
            expert,
            Some(op),
            tokens,
            None,
        );
        self.emit(
            end,
            Stream::Compute,
            EventKind::OpEnd,
            ctx,
            expert,
            Some(op),
            tokens,
            None,
        );
        self.compute_free = end;
        end
    }

    /// Non-MoE block then gate. Returns the gate end.
    fn layer_prologue(&mut self, ctx: Ctx) -> Nanos {
        let start = self.compute_free;
        let nm = self.op(ctx, start, self.non_moe_ns, OpKind::NonMoe, None, None);
        let gate_end = self.op(ctx, nm, self.gate_ns, OpKind::Gate, None, None);
        self.emit(gate_end, Stream::Compute, EventKind::Gate, ctx, None, None, None, None);
        gate_end
    }

    fn expert_op(&mut self, ctx: Ctx, expert: usize, tokens: usize, ready: Nanos) -> Nanos {
        let dur = ns(self.cost.expert_compute_s(tokens));
        self.op(ctx, ready, dur, OpKind::Expert, Some(expert), Some(tokens))
    }

    fn alloc(&mut self) -> Result<(usize, Nanos), SimError> {
        let (slot, free) = self
            .slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|t| (i, t)))
            .min_by_key(|&(i, t)| (t, i))
            .ok_or_else(|| SimError::Invariant("expert cache overflow: no slot can be freed".into()))?;
        self.slots[slot] = None;
        Ok((slot, free))
    }

    fn transfer(&mut self, ctx: Ctx, expert: usize, earliest: Nanos) -> Result<(usize, Nanos), SimError> {
        let (slot, free) = self.alloc()?;
        let start = earliest.max(self.link_free).max(free);
        let end = start + self.transfer_ns;
        self.emit(
            start,
            Stream::Comm,
            EventKind::TransferStart,
            ctx,
            Some(expert),
            None,
            None,
            None,
        );
        self.emit(
            end,
            Stream::Comm,
            EventKind::TransferEnd,
            ctx,
            Some(expert),
            None,
            None,
            None,
        );
        self.link_free = end;
        Ok((slot, end))
    }

    fn release(&mut self, ctx: Ctx, slot: usize, expert: usize, at: Nanos) {
        self.slots[slot] = Some(at);
        self.emit(
            at,
            Stream::Compute,
            EventKind::Evict,
            ctx,
            Some(expert),
            None,
            None,
            None,
        );
    }

    fn sync(&mut self, ctx: Ctx, at: Nanos, point: u8, stream: Stream) {
        self.emit(at, stream, EventKind::Sync, ctx, None, None, None, Some(point));
    }

    /// Fetch each expert once, then compute it, one at a time after the gate.
    fn serial_layer(&mut self, ctx: Ctx, groups: &[(usize, usize)]) -> Result<(), SimError> {
        self.layer_prologue(ctx);
        for &(e, n) in groups {
            let (slot, ready) = self.transfer(ctx, e, self.compute_free)?;
            let end = self.expert_op(ctx, e, n, ready);
            self.release(ctx, slot, e, end);
        }
        Ok(())
    }

    /// Two-stage pipeline: the next transfer overlaps the current compute.
    /// With `early_first`, the first transfer also overlaps the non-MoE block.
    /// Returns the gate end and the end of the first expert compute.
    fn pipelined_layer(
        &mut self,
        ctx: Ctx,
        groups: &[(usize, usize)],
        early_first: bool,
    ) -> Result<(Nanos, Nanos), SimError> {
        let layer_start = self.compute_free;
        let gate_end = self.layer_prologue(ctx);
        let mut first_end = None;
        for (i, &(e, n)) in groups.iter().enumerate() {
            let earliest = if i == 0 && early_first { layer_start } else { gate_end };
            let (slot, ready) = self.transfer(ctx, e, earliest)?;
            self.sync(ctx, ready.max(self.compute_free), 1, Stream::Compute);
            let end = self.expert_op(ctx, e, n, ready);
            first_end.get_or_insert(end);
            self.release(ctx, slot, e, end);
        }
        Ok((gate_end, first_end.unwrap_or(gate_end)))
    }

    fn transfer_all(&mut self, ctx: Ctx, earliest: Nanos) -> Result<Vec<(usize, Nanos)>, SimError> {
        (0..self.experts).map(|e| self.transfer(ctx, e, earliest)).collect()
    }

    /// Every expert of the layer streams in; the activated ones compute; the
    /// whole layer is dropped at its end and the next layer's transfers queue.
    fn prefetch_all_layer(&mut self, ctx: Ctx, groups: &[(usize, usize)], next: Option<Ctx>) -> Result<(), SimError> {
        let resident = match self.pending_all.take() {
            Some(r) => r,
            None => self.transfer_all(ctx, self.compute_free)?,
        };
        self.layer_prologue(ctx);
        for &(e, n) in groups {
            self.expert_op(ctx, e, n, resident[e].1);
        }
        let end = self.compute_free;
        for (e, &(slot, _)) in resident.iter().enumerate() {
            self.release(ctx, slot, e, end);
        }
        if let Some(next) = next {
            self.pending_all = Some(self.transfer_all(next, 0)?);
        }
        Ok(())
    }

    fn duoserve_decode_layer(
        &mut self,
        ctx: Ctx,
        trace: &ActivationTrace,
        next_prediction: Option<&[usize]>,
    ) -> Result<(), SimError> {
        let mut truth = trace.path[ctx.layer].clone();
        truth.sort_unstable();
        let pending = self.pending.take();
        let (gate_end, first_end) = match pending {
            Some(p) if ctx.layer > 0 && p.issue <= self.compute_free + self.non_moe_ns + self.gate_ns => {
                let mut issued = Vec::with_capacity(p.predicted.len());
                for &e in &p.predicted {
                    issued.push((e, self.transfer(ctx, e, p.issue)?));
                }
                let gate_end = self.layer_prologue(ctx);
                self.sync(ctx, gate_end, 1, Stream::Compute);
                let mut ready: Vec<(Nanos, usize, usize)> = Vec::with_capacity(truth.len());
                for (e, (slot, r)) in issued {
                    if truth.contains(&e) {
                        self.counters.hits += 1;
                        ready.push((r, e, slot));
                    } else {
                        self.counters.misses += 1;
                        self.release(ctx, slot, e, r.max(gate_end));
                    }
                }
                for &e in truth.iter().filter(|e| !p.predicted.contains(e)) {
                    self.counters.refetches += 1;
                    self.emit(
                        gate_end,
                        Stream::Comm,
                        EventKind::Refetch,
                        ctx,
                        Some(e),
                        None,
                        None,
                        None,
                    );
                    let (slot, r) = self.transfer(ctx, e, gate_end)?;
                    ready.push((r, e, slot));
                }
                ready.sort_unstable();
                let mut first_end = None;
                for (r, e, slot) in ready {
                    let end = self.expert_op(ctx, e, 1, r);
                    first_end.get_or_insert(end);
                    self.release(ctx, slot, e, end);
                }
                (gate_end, first_end.unwrap_or(gate_end))
            }
            other => {
                if other.is_some() {
                    self.counters.late_predictions += 1;
                }
                let groups: Vec<(usize, usize)> = truth.iter().map(|&e| (e, 1)).collect();
                self.pipelined_layer(ctx, &groups, false)?
            }
        };

        if let Some(predicted) = next_prediction {
            let start = gate_end.max(self.predict_free);
            let end = start + self.predict_ns;
            let next = Ctx {
                layer: ctx.layer + 1,
                ..ctx
            };
            self.emit(
                start,
                Stream::Predict,
                EventKind::PredictStart,
                next,
                None,
                None,
                None,
                None,
            );
            self.emit(
                end,
                Stream::Predict,
                EventKind::PredictEnd,
                next,
                None,
                None,
                None,
                None,
            );
            self.predict_free = end;
            let issue = first_end.max(end);
            self.sync(ctx, issue, 2, Stream::Comm);
            self.pending = Some(Pending {
                predicted: predicted.to_vec(),
                issue,
            });
        }
        Ok(())
    }
}

/// Tokens per activated expert over a set of traces at one layer, ascending by expert.
fn token_groups(traces: &[&ActivationTrace], layer: usize, experts: usize) -> Vec<(usize, usize)> {
    let mut counts = vec![0usize; experts];
    for t in traces {
        for &e in &t.path[layer] {
            counts[e] += 1;
        }
    }
    counts.into_iter().enumerate().filter(|&(_, n)| n > 0).collect()
}

/// Simulates one request: a prefill pass over all prompt tokens, then one
/// pass per decode token.
///
/// `predictor` is required for [`SchedulerPolicy::DuoServe`]; the oracle
/// policy uses the true selections.
pub fn simulate_request(
    policy: SchedulerPolicy,
    request: &RequestTraces<'_>,
    cfg: &ModelConfig,
    cost: &CostModel,
    predictor: Option<&dyn ExpertPredictor>,
) -> Result<(RequestMetrics, EventTimeline), SimError> {
    if request.decode.is_empty() {
        return Err(SimError::NoDecodeTokens(request.request_id));
    }
    let shape = cfg.shape();
    for t in request.prefill.iter().chain(&request.decode) {
        t.validate(shape).map_err(|e| SimError::TraceMismatch(e.to_string()))?;
    }
    let layers = cfg.num_layers;

    // [step][layer] predicted sets, layer 0 left empty.
    let predictions: Option<Vec<Vec<Vec<usize>>>> = match policy {
        SchedulerPolicy::DuoServe => {
            let p = predictor.ok_or(SimError::MissingPredictor(policy))?;
            let queries: Vec<(&ActivationTrace, usize)> = request
                .decode
                .iter()
                .flat_map(|&t| (1..layers).map(move |l| (t, l)))
                .collect();
            let flat = p.predict_many(&queries)?;
            for set in &flat {
                if set.len() != cfg.top_k || set.iter().any(|&e| e >= cfg.num_experts) {
                    return Err(SimError::TraceMismatch(format!(
                        "predictor returned {set:?} for a model with k={} and M={}",
                        cfg.top_k, cfg.num_experts
                    )));
                }
            }
            let mut it = flat.into_iter();
            Some(
                request
                    .decode
                    .iter()
                    .map(|_| {
                        std::iter::once(Vec::new())
                            .chain((1..layers).map(|_| it.next().expect("one per query")))
                            .collect()
                    })
                    .collect(),
            )
        }
        SchedulerPolicy::DuoServeOracle => Some(
            request
                .decode
                .iter()
                .map(|t| {
                    t.path
                        .iter()
                        .map(|s| {
                            let mut s = s.clone();
                            s.sort_unstable();
                            s
                        })
                        .collect()
                })
                .collect(),
        ),
        _ => None,
    };

    let mut eng = Engine::new(policy, cfg, cost);
    let n_steps = request.decode.len();
    let has_prefill = !request.prefill.is_empty();

    let next_ctx = |phase: Phase, step: usize, layer: usize| -> Option<Ctx> {
        if layer + 1 < layers {
            Some(Ctx {
                phase,
                step,
                layer: layer + 1,
            })
        } else if phase == Phase::Prefill || step + 1 < n_steps {
            let step = if phase == Phase::Prefill { 0 } else { step + 1 };
            Some(Ctx {
                phase: Phase::Decode,
                step,
                layer: 0,
            })
        } else {
            None
        }
    };

    if has_prefill {
        for layer in 0..layers {
            let ctx = Ctx {
                phase: Phase::Prefill,
                step: 0,
                layer,
            };
            let groups = token_groups(&request.prefill, layer, cfg.num_experts);
            match policy {
                SchedulerPolicy::OnDemand => eng.serial_layer(ctx, &groups)?,
                SchedulerPolicy::PrefetchAll => {
                    eng.prefetch_all_layer(ctx, &groups, next_ctx(Phase::Prefill, 0, layer))?
                }
                SchedulerPolicy::DuoServe | SchedulerPolicy::DuoServeOracle => {
                    eng.pipelined_layer(ctx, &groups, true)?;
                }
            }
        }
    }
    let ttft = eng.compute_free;

    let mut step_ends = Vec::with_capacity(n_steps);
    for (step, trace) in request.decode.iter().enumerate() {
        for layer in 0..layers {
            let ctx = Ctx {
                phase: Phase::Decode,
                step,
                layer,
            };
            let groups: Vec<(usize, usize)> = token_groups(&[*trace], layer, cfg.num_experts);
            match policy {
                SchedulerPolicy::OnDemand => eng.serial_layer(ctx, &groups)?,
                SchedulerPolicy::PrefetchAll => {
                    let next = next_ctx(Phase::Decode, step, layer);
                    eng.prefetch_all_layer(ctx, &groups, next)?
                }
                SchedulerPolicy::DuoServe | SchedulerPolicy::DuoServeOracle => {
                    let next = predictions
                        .as_ref()
                        .and_then(|p| p[step].get(layer + 1))
                        .map(Vec::as_slice);
                    eng.duoserve_decode_layer(ctx, trace, next)?
                }
            }
        }
        step_ends.push(eng.compute_free);
    }

    let timeline = EventTimeline::from_unsorted(eng.events);
    let slot_count = policy.slot_count(cfg);
    timeline.check(slot_count)?;
    let peak_resident = timeline.peak_resident();
    let e2e = eng.compute_free;
    let mut prev = ttft;
    let step_ns: Vec<Nanos> = step_ends
        .iter()
        .map(|&end| {
            let d = end - prev;
            prev = end;
            d
        })
        .collect();
    let predictor_bytes = if policy.uses_predictor() {
        cfg.predictor_mem_bytes
    } else {
        0
    };
    let metrics = RequestMetrics::new(
        request.request_id,
        request.prefill.len(),
        ttft,
        step_ns,
        cfg.non_moe_bytes + peak_resident as u64 * cfg.expert_bytes() + predictor_bytes + cfg.kv_reserve_bytes,
        peak_resident,
        eng.counters,
    );
    debug_assert_eq!(metrics.e2e_ns, e2e);
    Ok((metrics, timeline))
}

//! SLO-aware adaptive batching for one model queue.
//!
//! Each scheduling tick drops requests that would miss their TTFT deadline
//! even if served alone right now, orders the rest earliest-deadline-first,
//! evicts the longest prompt until the whole batch's chunked prefill finishes
//! before the earliest (anchor) deadline, and finally trims the batch to the
//! request and token caps.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

/// Affine latency surrogate for chunked prefill and decode steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Fixed prefill overhead per chunk, seconds.
    pub alpha: f64,
    /// Prefill seconds per prompt token.
    pub beta: f64,
    /// Fixed decode step overhead, seconds.
    pub gamma: f64,
    /// Decode seconds per running sequence.
    pub delta: f64,
    /// Decode seconds per cached token.
    pub epsilon: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.alpha, self.beta, self.gamma, self.delta, self.epsilon];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err("cost coefficients must be finite and >= 0".into());
        }
        if self.beta <= 0.0 {
            return Err("beta must be > 0".into());
        }
        Ok(())
    }

    /// Latency of one decode step.
    pub fn decode_step(&self, batch: usize, cached_tokens: u64) -> f64 {
        self.gamma + self.delta * batch as f64 + self.epsilon * cached_tokens as f64
    }
}

/// Chunked prefill latency of `total_tokens` prompt tokens.
pub fn predict_ttft_tokens(total_tokens: u64, cost: &CostModel, chunk_tokens: u32) -> f64 {
    if total_tokens == 0 {
        return 0.0;
    }
    let chunks = total_tokens.div_ceil(u64::from(chunk_tokens.max(1)));
    chunks as f64 * cost.alpha + cost.beta * total_tokens as f64
}

/// Chunked prefill latency of a batch of requests.
pub fn predict_ttft(requests: &[Request], cost: &CostModel, chunk_tokens: u32) -> f64 {
    let tokens = requests.iter().map(|r| u64::from(r.prompt_tokens)).sum();
    predict_ttft_tokens(tokens, cost, chunk_tokens)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: u64,
    pub model_id: String,
    pub arrival_time: f64,
    pub prompt_tokens: u32,
    /// Ground truth held by the simulator. Schedulers never read it.
    pub output_tokens: u32,
    pub deadline: f64,
}

impl Request {
    pub fn new(
        request_id: u64,
        model_id: impl Into<String>,
        arrival_time: f64,
        prompt_tokens: u32,
        output_tokens: u32,
        ttft_slo: f64,
    ) -> Self {
        Self {
            request_id,
            model_id: model_id.into(),
            arrival_time,
            prompt_tokens,
            output_tokens,
            deadline: arrival_time + ttft_slo,
        }
    }
}

/// Caps applied to one admitted batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchLimits {
    pub n_max: usize,
    /// Maximum prompt tokens admitted in the batch.
    pub t_max: u64,
    /// Prefill chunk size used for latency prediction.
    pub chunk_tokens: u32,
}

/// Partition of the considered waiting set for one tick.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BatchDecision {
    /// Earliest deadline first.
    pub admitted: Vec<u64>,
    pub dropped: Vec<u64>,
    pub deferred: Vec<u64>,
    /// Prefill latency predicted for the admitted batch.
    pub predicted_ttft: f64,
    /// Deadline of the earliest admitted request.
    pub anchor_deadline: Option<f64>,
}

fn edf(a: &Request, b: &Request) -> Ordering {
    a.deadline
        .total_cmp(&b.deadline)
        .then(a.request_id.cmp(&b.request_id))
}

/// Largest prompt; ties go to the latest deadline, then the highest id.
fn longer(a: &Request, b: &Request) -> Ordering {
    a.prompt_tokens
        .cmp(&b.prompt_tokens)
        .then(a.deadline.total_cmp(&b.deadline))
        .then(a.request_id.cmp(&b.request_id))
}

/// Runs one adaptive batching tick over `waiting` at time `now`.
pub fn schedule_batch(
    waiting: &[Request],
    now: f64,
    cost: &CostModel,
    limits: BatchLimits,
) -> BatchDecision {
    let mut decision = BatchDecision::default();
    let mut batch: Vec<&Request> = Vec::with_capacity(waiting.len());
    for r in waiting {
        let solo = predict_ttft_tokens(u64::from(r.prompt_tokens), cost, limits.chunk_tokens);
        if now + solo < r.deadline {
            batch.push(r);
        } else {
            decision.dropped.push(r.request_id);
        }
    }
    batch.sort_by(|a, b| edf(a, b));

    let mut tokens: u64 = batch.iter().map(|r| u64::from(r.prompt_tokens)).sum();
    // The anchor is re-read after every eviction.
    while let Some(anchor) = batch.first() {
        if now + predict_ttft_tokens(tokens, cost, limits.chunk_tokens) < anchor.deadline {
            break;
        }
        let (idx, _) = batch
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| longer(a, b))
            .expect("batch is non-empty");
        let evicted = batch.remove(idx);
        tokens -= u64::from(evicted.prompt_tokens);
        decision.deferred.push(evicted.request_id);
    }

    while batch.len() > limits.n_max || tokens > limits.t_max {
        let Some(last) = batch.pop() else { break };
        tokens -= u64::from(last.prompt_tokens);
        decision.deferred.push(last.request_id);
    }

    decision.predicted_ttft = predict_ttft_tokens(tokens, cost, limits.chunk_tokens);
    decision.anchor_deadline = batch.first().map(|r| r.deadline);
    decision.admitted = batch.iter().map(|r| r.request_id).collect();
    decision
}

/// First-come-first-serve admission up to the caps. Nothing is dropped.
pub fn schedule_fcfs(waiting: &[Request], cost: &CostModel, limits: BatchLimits) -> BatchDecision {
    let mut decision = BatchDecision::default();
    let mut order: Vec<&Request> = waiting.iter().collect();
    order.sort_by(|a, b| {
        a.arrival_time
            .total_cmp(&b.arrival_time)
            .then(a.request_id.cmp(&b.request_id))
    });
    let mut tokens = 0u64;
    let mut blocked = false;
    for r in order {
        let next = tokens + u64::from(r.prompt_tokens);
        if blocked || decision.admitted.len() >= limits.n_max || next > limits.t_max {
            // Head-of-line: later arrivals never overtake a blocked one.
            blocked = true;
            decision.deferred.push(r.request_id);
        } else {
            tokens = next;
            decision.admitted.push(r.request_id);
        }
    }
    decision.predicted_ttft = predict_ttft_tokens(tokens, cost, limits.chunk_tokens);
    decision.anchor_deadline = waiting
        .iter()
        .filter(|r| decision.admitted.contains(&r.request_id))
        .map(|r| r.deadline)
        .min_by(f64::total_cmp);
    decision
}

/// A model's waiting queue plus its adaptive batching policy.
#[derive(Debug, Clone, Default)]
pub struct LocalScheduler {
    waiting: VecDeque<Request>,
}

impl LocalScheduler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue(&mut self, request: Request) {
        self.waiting.push_back(request);
    }

    /// Puts requests back at the head of the queue, keeping their order.
    pub fn requeue(&mut self, requests: Vec<Request>) {
        for r in requests.into_iter().rev() {
            self.waiting.push_front(r);
        }
    }

    pub fn len(&self) -> usize {
        self.waiting.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waiting.is_empty()
    }

    pub fn waiting(&self) -> impl Iterator<Item = &Request> {
        self.waiting.iter()
    }

    /// Runs one tick and removes admitted and dropped requests from the queue.
    /// Returns the decision, the admitted requests in EDF order and the
    /// dropped requests.
    pub fn tick(
        &mut self,
        now: f64,
        cost: &CostModel,
        limits: BatchLimits,
        adaptive: bool,
    ) -> (BatchDecision, Vec<Request>, Vec<Request>) {
        // FCFS only ever looks past the queue head as far as the count cap.
        let considered = if adaptive {
            self.waiting.len()
        } else {
            self.waiting.len().min(limits.n_max.saturating_add(1))
        };
        let snapshot: Vec<Request> = self.waiting.iter().take(considered).cloned().collect();
        let decision = if adaptive {
            schedule_batch(&snapshot, now, cost, limits)
        } else {
            schedule_fcfs(&snapshot, cost, limits)
        };
        let mut admitted: Vec<Option<Request>> = vec![None; decision.admitted.len()];
        let mut dropped = Vec::with_capacity(decision.dropped.len());
        self.waiting.retain(|r| {
            if let Some(pos) = decision.admitted.iter().position(|id| *id == r.request_id) {
                admitted[pos] = Some(r.clone());
                false
            } else if decision.dropped.contains(&r.request_id) {
                dropped.push(r.clone());
                false
            } else {
                true
            }
        });
        let admitted = admitted.into_iter().flatten().collect();
        (decision, admitted, dropped)
    }
}

#[derive(PartialEq)]
struct ByLength(f64);

impl Eq for ByLength {}

impl PartialOrd for ByLength {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ByLength {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Moore-Hodgson for 1||ΣU_j: maximum number of jobs finishing strictly
/// before their deadline on one machine. Jobs are `(processing_time, deadline)`.
pub fn moore_hodgson(jobs: &[(f64, f64)]) -> usize {
    let mut order: Vec<(f64, f64)> = jobs.to_vec();
    order.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut scheduled = BinaryHeap::new();
    let mut t = 0.0;
    for (p, d) in order {
        scheduled.push(ByLength(p));
        t += p;
        if !(t < d) {
            let ByLength(longest) = scheduled.pop().expect("just pushed");
            t -= longest;
        }
    }
    scheduled.len()
}

/// Serves `requests` one at a time (`n_max = 1`) by repeated adaptive
/// batching ticks starting at `start`. Returns the admitted ids in service
/// order; every admitted request finishes before its deadline.
pub fn serve_one_at_a_time(
    requests: &[Request],
    start: f64,
    cost: &CostModel,
    chunk_tokens: u32,
) -> Vec<u64> {
    let limits = BatchLimits {
        n_max: 1,
        t_max: u64::MAX,
        chunk_tokens,
    };
    let mut sched = LocalScheduler::new();
    for r in requests {
        sched.enqueue(r.clone());
    }
    let mut now = start;
    let mut served = Vec::new();
    while !sched.is_empty() {
        let (decision, admitted, _) = sched.tick(now, cost, limits, true);
        if admitted.is_empty() {
            break;
        }
        now += decision.predicted_ttft;
        served.extend(admitted.iter().map(|r| r.request_id));
    }
    served
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cost() -> CostModel {
        CostModel {
            alpha: 0.01,
            beta: 0.0001,
            gamma: 0.0,
            delta: 0.0,
            epsilon: 0.0,
        }
    }

    fn req(id: u64, arrival: f64, prompt: u32, slo: f64) -> Request {
        Request::new(id, "m", arrival, prompt, 10, slo)
    }

    fn limits() -> BatchLimits {
        BatchLimits {
            n_max: 64,
            t_max: 1 << 20,
            chunk_tokens: 1000,
        }
    }

    #[test]
    fn predict_ttft_examples() {
        let c = cost();
        assert!((predict_ttft_tokens(500, &c, 1000) - 0.06).abs() < 1e-12);
        assert!((predict_ttft_tokens(1, &c, 1000) - (0.01 + 0.0001)).abs() < 1e-15);
        assert!((predict_ttft_tokens(1500, &c, 1000) - (2.0 * 0.01 + 0.0001 * 1500.0)).abs() < 1e-12);
        assert!((predict_ttft(&[req(1, 0.0, 300, 1.0), req(2, 0.0, 200, 1.0)], &c, 1000) - 0.06).abs() < 1e-12);
        assert_eq!(predict_ttft_tokens(0, &c, 1000), 0.0);
    }

    #[test]
    fn feasible_singleton_is_admitted() {
        let d = schedule_batch(&[req(1, 0.0, 100, 1.0)], 0.0, &cost(), limits());
        assert_eq!(d.admitted, vec![1]);
        assert!(d.dropped.is_empty() && d.deferred.is_empty());
        assert_eq!(d.anchor_deadline, Some(1.0));
    }

    #[test]
    fn hopeless_request_is_dropped() {
        // alpha + beta * 1000 = 0.11 > slo 0.1.
        let d = schedule_batch(&[req(1, 0.0, 1000, 0.1)], 0.0, &cost(), limits());
        assert_eq!(d.dropped, vec![1]);
        assert!(d.admitted.is_empty());
        // Boundary: finishing exactly at the deadline is a miss.
        let d = schedule_batch(&[req(2, 0.0, 900, 0.1)], 0.0, &cost(), limits());
        assert_eq!(d.dropped, vec![2]);
    }

    #[test]
    fn longer_request_is_deferred_when_joint_prefill_misses_anchor() {
        // Short: 100 tokens, deadline 0.05. Long: 800 tokens, deadline 0.2.
        // Joint: 0.01 + 0.09 = 0.10 >= 0.05. Short alone: 0.02 < 0.05.
        let waiting = [req(1, 0.0, 100, 0.05), req(2, 0.0, 800, 0.2)];
        let d = schedule_batch(&waiting, 0.0, &cost(), limits());
        assert_eq!(d.admitted, vec![1]);
        assert_eq!(d.deferred, vec![2]);
        assert!(d.dropped.is_empty());
    }

    #[test]
    fn evicting_the_anchor_promotes_the_next_deadline() {
        // Anchor is the longest; after it goes, the other pair fits.
        let waiting = [req(1, 0.0, 900, 0.22), req(2, 0.0, 100, 0.3), req(3, 0.0, 100, 0.3)];
        let d = schedule_batch(&waiting, 0.1, &cost(), limits());
        // Joint 1100 tokens: 2 chunks = 0.02 + 0.11 = 0.13; 0.1 + 0.13 >= 0.22.
        assert_eq!(d.deferred, vec![1]);
        assert_eq!(d.admitted, vec![2, 3]);
    }

    #[test]
    fn trim_removes_latest_deadlines_first() {
        let waiting: Vec<_> = (0..5).map(|i| req(i, i as f64 * 0.1, 10, 5.0)).collect();
        let mut l = limits();
        l.n_max = 2;
        let d = schedule_batch(&waiting, 1.0, &cost(), l);
        assert_eq!(d.admitted, vec![0, 1]);
        assert_eq!(d.deferred, vec![4, 3, 2]);

        l.n_max = 10;
        l.t_max = 35;
        let d = schedule_batch(&waiting, 1.0, &cost(), l);
        assert_eq!(d.admitted, vec![0, 1, 2]);
    }

    #[test]
    fn fcfs_never_drops() {
        let waiting = [req(1, 0.0, 1000, 0.01), req(2, 0.1, 10, 5.0)];
        let d = schedule_fcfs(&waiting, &cost(), limits());
        assert_eq!(d.admitted, vec![1, 2]);
        assert!(d.dropped.is_empty());
    }

    #[test]
    fn scheduler_tick_keeps_deferred_requests() {
        let mut s = LocalScheduler::new();
        s.enqueue(req(1, 0.0, 100, 0.05));
        s.enqueue(req(2, 0.0, 800, 0.2));
        s.enqueue(req(3, 0.0, 5000, 0.1));
        let (d, admitted, dropped) = s.tick(0.0, &cost(), limits(), true);
        assert_eq!(d.admitted, vec![1]);
        assert_eq!(admitted.len(), 1);
        assert_eq!(dropped[0].request_id, 3);
        let left: Vec<_> = s.waiting().cloned().collect();
        assert_eq!(left, vec![req(2, 0.0, 800, 0.2)]);
    }

    #[test]
    fn moore_hodgson_examples() {
        assert_eq!(moore_hodgson(&[(2.0, 3.0), (2.0, 4.0)]), 1);
        assert_eq!(moore_hodgson(&[(2.0, 3.0), (2.0, 5.0)]), 2);
        assert_eq!(moore_hodgson(&[]), 0);
        assert_eq!(moore_hodgson(&[(1.0, 10.0), (2.0, 10.0), (3.0, 10.0)]), 3);
        // Classic instance: evicting the long job saves two short ones.
        assert_eq!(moore_hodgson(&[(5.0, 6.0), (1.0, 7.0), (1.0, 8.0)]), 3);
        assert_eq!(moore_hodgson(&[(4.0, 4.5), (1.0, 5.0), (1.0, 5.5)]), 2);
    }
}

//! Precision and memory-footprint arithmetic.
//!
//! Everything here is a pure function of a [`ModelProfile`]: token and KV
//! block sizes, the per-shard base footprint charged at placement time, the
//! data-parallel replica count needed to meet a request rate within the TTFT
//! SLO, and marginal memory efficiency (tokens cached per extra KV byte).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::batching::{predict_ttft_tokens, CostModel};
use crate::error::ProfileError;

/// Bit-widths of one quantization variant, written `W#A#KV#`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PrecisionSpec {
    pub weight_bits: u8,
    pub activation_bits: u8,
    pub kv_bits: u8,
}

const ALLOWED_BITS: [u8; 3] = [4, 8, 16];

impl PrecisionSpec {
    pub const FP16: PrecisionSpec = PrecisionSpec {
        weight_bits: 16,
        activation_bits: 16,
        kv_bits: 16,
    };
    /// W8A8KV8.
    pub const FP8: PrecisionSpec = PrecisionSpec {
        weight_bits: 8,
        activation_bits: 8,
        kv_bits: 8,
    };
    /// Weight-only 4-bit (AWQ style), 16-bit KV.
    pub const W4A16: PrecisionSpec = PrecisionSpec {
        weight_bits: 4,
        activation_bits: 16,
        kv_bits: 16,
    };
    /// W4A8KV4 (QoQ style).
    pub const W4A8KV4: PrecisionSpec = PrecisionSpec {
        weight_bits: 4,
        activation_bits: 8,
        kv_bits: 4,
    };

    pub fn new(weight_bits: u8, activation_bits: u8, kv_bits: u8) -> Result<Self, String> {
        for (name, bits) in [
            ("weight", weight_bits),
            ("activation", activation_bits),
            ("kv", kv_bits),
        ] {
            if !ALLOWED_BITS.contains(&bits) {
                return Err(format!("{name} bits must be one of 4, 8, 16 (got {bits})"));
            }
        }
        Ok(Self {
            weight_bits,
            activation_bits,
            kv_bits,
        })
    }

    /// Bytes per KV element: 0.5, 1 or 2.
    pub fn kv_bytes_per_element(&self) -> f64 {
        f64::from(self.kv_bits) / 8.0
    }
}

impl fmt::Display for PrecisionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "W{}A{}KV{}",
            self.weight_bits, self.activation_bits, self.kv_bits
        )
    }
}

impl FromStr for PrecisionSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        match upper.as_str() {
            "FP16" | "BF16" => return Ok(Self::FP16),
            "FP8" => return Ok(Self::FP8),
            "AWQ" => return Ok(Self::W4A16),
            "QOQ" => return Ok(Self::W4A8KV4),
            _ => {}
        }
        let bad = || format!("expected W#A#KV# notation or a known alias, got `{s}`");
        let rest = upper.strip_prefix('W').ok_or_else(bad)?;
        let (w, rest) = rest.split_once('A').ok_or_else(bad)?;
        // KV defaults to the activation width when omitted, e.g. W4A16.
        let (a, kv) = match rest.split_once("KV") {
            Some((a, kv)) => (a, kv),
            None => (rest, rest),
        };
        let parse = |v: &str| v.parse::<u8>().map_err(|_| bad());
        Self::new(parse(w)?, parse(a)?, parse(kv)?)
    }
}

impl TryFrom<String> for PrecisionSpec {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<PrecisionSpec> for String {
    fn from(value: PrecisionSpec) -> Self {
        value.to_string()
    }
}

/// One profiled operating point of a model: throughput reached at a batch
/// size, optionally with the memory measured there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub batch_size: u32,
    /// Requests per second.
    pub throughput: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv_bytes: Option<u64>,
}

/// Admission caps and prefill chunking used by the local scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchingConfig {
    /// Upper bound on prompt tokens admitted in one batch.
    pub max_batched_tokens: u32,
    /// Prefill chunk size in tokens.
    pub chunk_tokens: u32,
    /// Upper bound on concurrently running sequences.
    pub max_running: u32,
}

impl Default for BatchingConfig {
    fn default() -> Self {
        Self {
            max_batched_tokens: 8192,
            chunk_tokens: 2048,
            max_running: 256,
        }
    }
}

/// Architecture, precision, cost model, demand and SLO of one served model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub model_id: String,
    pub precision: PrecisionSpec,
    pub num_kv_heads: u32,
    pub head_dim: u32,
    pub num_layers: u32,
    #[serde(default = "one")]
    pub tp_degree: u32,
    pub tokens_per_block: u32,
    #[serde(default)]
    pub quant_param_bytes_per_block: u64,
    pub weight_bytes: u64,
    pub avg_activation_bytes: u64,
    pub avg_kv_bytes: u64,
    /// Requests per second.
    pub request_rate: f64,
    /// Seconds.
    pub ttft_slo: f64,
    pub cost: CostModel,
    pub throughput_table: Vec<OperatingPoint>,
    pub avg_prompt_tokens: u32,
    pub avg_output_tokens: u32,
    #[serde(default)]
    pub batching: BatchingConfig,
}

fn one() -> u32 {
    1
}

/// Base footprint of one model shard and the batch size it was read at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Footprint {
    pub bytes: u64,
    pub batch_size: u32,
}

/// Outcome of replica sizing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicaPlan {
    pub replicas: u32,
    /// Largest-throughput SLO-safe batch size.
    pub batch_size: u32,
    pub per_replica_rate: f64,
}

impl ModelProfile {
    fn invalid(&self, reason: impl Into<String>) -> ProfileError {
        ProfileError::InvalidProfile {
            model: self.model_id.clone(),
            reason: reason.into(),
        }
    }

    /// Checks every structural invariant of the profile.
    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.model_id.is_empty() {
            return Err(self.invalid("empty model id"));
        }
        PrecisionSpec::new(
            self.precision.weight_bits,
            self.precision.activation_bits,
            self.precision.kv_bits,
        )
        .map_err(|e| self.invalid(e))?;
        self.kv_block_size()?;
        if !(self.ttft_slo > 0.0 && self.ttft_slo.is_finite()) {
            return Err(self.invalid("ttft_slo must be positive"));
        }
        if !(self.request_rate > 0.0 && self.request_rate.is_finite()) {
            return Err(self.invalid("request_rate must be positive"));
        }
        self.cost.validate().map_err(|e| self.invalid(e))?;
        if self.throughput_table.is_empty() {
            return Err(self.invalid("throughput_table is empty"));
        }
        for p in &self.throughput_table {
            if p.batch_size == 0 || !(p.throughput >= 0.0) {
                return Err(self.invalid("throughput_table entries need batch_size >= 1 and throughput >= 0"));
            }
        }
        if self.avg_prompt_tokens == 0 {
            return Err(self.invalid("avg_prompt_tokens must be >= 1"));
        }
        let b = &self.batching;
        if b.max_batched_tokens == 0 || b.chunk_tokens == 0 || b.max_running == 0 {
            return Err(self.invalid("batching caps must be >= 1"));
        }
        Ok(())
    }

    /// Bytes one token occupies in the KV cache of one layer on one TP shard.
    pub fn token_size(&self) -> Result<u64, ProfileError> {
        if self.tp_degree == 0 || self.num_kv_heads == 0 || self.head_dim == 0 {
            return Err(self.invalid("heads, head_dim and tp_degree must be >= 1"));
        }
        if !self.num_kv_heads.is_multiple_of(self.tp_degree) {
            return Err(self.invalid(format!(
                "{} KV heads are not divisible by TP degree {}",
                self.num_kv_heads, self.tp_degree
            )));
        }
        let heads_per_shard = u64::from(self.num_kv_heads / self.tp_degree);
        // K and V.
        let bits = heads_per_shard * u64::from(self.head_dim) * 2 * u64::from(self.precision.kv_bits);
        if bits % 8 != 0 {
            return Err(ProfileError::FractionalTokenSize {
                model: self.model_id.clone(),
                bits,
            });
        }
        Ok(bits / 8)
    }

    /// Bytes of one per-layer KV block: tokens plus quantization parameters.
    pub fn layer_block_size(&self) -> Result<u64, ProfileError> {
        if self.tokens_per_block == 0 {
            return Err(self.invalid("tokens_per_block must be >= 1"));
        }
        Ok(u64::from(self.tokens_per_block) * self.token_size()? + self.quant_param_bytes_per_block)
    }

    /// Bytes of one logical KV block spanning all layers. This is the slab key.
    pub fn kv_block_size(&self) -> Result<u64, ProfileError> {
        if self.num_layers == 0 {
            return Err(self.invalid("num_layers must be >= 1"));
        }
        Ok(u64::from(self.num_layers) * self.layer_block_size()?)
    }

    /// KV bytes of one token across all layers, excluding quantization parameters.
    pub fn token_bytes_all_layers(&self) -> Result<u64, ProfileError> {
        Ok(self.token_size()? * u64::from(self.num_layers))
    }

    fn sorted_points(&self) -> Vec<&OperatingPoint> {
        let mut points: Vec<_> = self.throughput_table.iter().collect();
        points.sort_by_key(|p| p.batch_size);
        points
    }

    /// Per-shard fixed memory charged at placement: weights, activations and
    /// KV at the smallest batch size whose throughput meets the request rate.
    pub fn base_footprint(&self) -> Result<Footprint, ProfileError> {
        if self.throughput_table.is_empty() {
            return Err(self.invalid("throughput_table is empty"));
        }
        let points = self.sorted_points();
        let Some(point) = points.iter().find(|p| p.throughput >= self.request_rate) else {
            let max_rate = points.iter().map(|p| p.throughput).fold(0.0, f64::max);
            return Err(ProfileError::InfeasibleRate {
                model: self.model_id.clone(),
                rate: self.request_rate,
                max_rate,
            });
        };
        let weights = self.weight_bytes.div_ceil(u64::from(self.tp_degree.max(1)));
        let activation = point.activation_bytes.unwrap_or(self.avg_activation_bytes);
        let kv = point.kv_bytes.unwrap_or(self.avg_kv_bytes);
        Ok(Footprint {
            bytes: weights + activation + kv,
            batch_size: point.batch_size,
        })
    }

    /// Predicted prefill latency of a batch of `batch_size` average prompts.
    pub fn predicted_ttft_at(&self, batch_size: u32) -> f64 {
        let tokens = u64::from(batch_size) * u64::from(self.avg_prompt_tokens);
        predict_ttft_tokens(tokens, &self.cost, self.batching.chunk_tokens)
    }

    /// Smallest data-parallel replica count that serves the request rate at
    /// an operating point whose predicted TTFT is within the SLO.
    pub fn required_replicas(&self) -> Result<ReplicaPlan, ProfileError> {
        if self.throughput_table.is_empty() {
            return Err(self.invalid("throughput_table is empty"));
        }
        let best = self
            .sorted_points()
            .into_iter()
            .filter(|p| p.throughput > 0.0 && self.predicted_ttft_at(p.batch_size) <= self.ttft_slo)
            .max_by(|a, b| {
                a.throughput
                    .total_cmp(&b.throughput)
                    .then(b.batch_size.cmp(&a.batch_size))
            })
            .ok_or_else(|| ProfileError::InfeasibleSlo {
                model: self.model_id.clone(),
                slo: self.ttft_slo,
            })?;
        let mut replicas = ((self.request_rate / best.throughput) - 1e-9).ceil().max(1.0) as u32;
        while self.request_rate / f64::from(replicas) > best.throughput {
            replicas += 1;
        }
        Ok(ReplicaPlan {
            replicas,
            batch_size: best.batch_size,
            per_replica_rate: self.request_rate / f64::from(replicas),
        })
    }

    /// Splits the profile into `replicas` independent instances sharing the
    /// rate evenly. A single replica keeps the original id.
    pub fn replicate(&self, replicas: u32) -> Vec<ModelProfile> {
        if replicas <= 1 {
            return vec![self.clone()];
        }
        (0..replicas)
            .map(|i| {
                let mut p = self.clone();
                p.model_id = replica_id(&self.model_id, i);
                p.request_rate = self.request_rate / f64::from(replicas);
                p
            })
            .collect()
    }
}

/// Id of the `index`-th data-parallel replica of `model_id`.
pub fn replica_id(model_id: &str, index: u32) -> String {
    format!("{model_id}/dp{index}")
}

/// Base model id of a (possibly replicated) instance id.
pub fn base_model_id(instance_id: &str) -> &str {
    match instance_id.rsplit_once("/dp") {
        Some((base, idx)) if !idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit()) => base,
        _ => instance_id,
    }
}

/// Marginal memory efficiency of one model on one GPU group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MmeEstimate {
    pub model_id: String,
    pub group_id: String,
    pub tokens_per_byte: f64,
}

/// Source of marginal memory efficiency values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MmeEstimator {
    /// Inverse of amortized KV bytes per token, charging half a block of
    /// waste per sequence. `mean_seq_tokens` defaults to the profile's
    /// average prompt plus output length.
    Analytical {
        #[serde(default)]
        mean_seq_tokens: Option<f64>,
    },
    /// Externally measured slopes in tokens per byte, keyed by model id.
    /// Models without an entry fall back to the analytical estimate.
    Profiled { slopes: BTreeMap<String, f64> },
}

impl Default for MmeEstimator {
    fn default() -> Self {
        MmeEstimator::Analytical {
            mean_seq_tokens: None,
        }
    }
}

impl MmeEstimator {
    pub fn estimate(&self, profile: &ModelProfile, group_id: &str) -> MmeEstimate {
        let tokens_per_byte = match self {
            MmeEstimator::Profiled { slopes } => slopes
                .get(&profile.model_id)
                .or_else(|| slopes.get(base_model_id(&profile.model_id)))
                .copied()
                .unwrap_or_else(|| analytical_tokens_per_byte(profile, None)),
            MmeEstimator::Analytical { mean_seq_tokens } => {
                analytical_tokens_per_byte(profile, *mean_seq_tokens)
            }
        };
        MmeEstimate {
            model_id: profile.model_id.clone(),
            group_id: group_id.to_string(),
            tokens_per_byte,
        }
    }
}

fn analytical_tokens_per_byte(profile: &ModelProfile, mean_seq_tokens: Option<f64>) -> f64 {
    // Profiles are validated before they reach placement; a broken one gets
    // the smallest positive efficiency rather than a panic.
    let Ok(block) = profile.kv_block_size() else {
        return f64::MIN_POSITIVE;
    };
    let tpb = f64::from(profile.tokens_per_block);
    let seq = mean_seq_tokens
        .unwrap_or_else(|| f64::from(profile.avg_prompt_tokens) + f64::from(profile.avg_output_tokens))
        .max(1.0);
    let bytes_per_token = block as f64 * (1.0 / tpb + 0.5 / seq);
    1.0 / bytes_per_token
}

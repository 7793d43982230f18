//! Synthetic workloads and trace files.
//!
//! Arrivals are Poisson per model (exponential gaps), optionally piecewise
//! over rate phases. Every model draws from its own ChaCha stream, so adding
//! a model never perturbs another model's arrivals.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Token-length distribution with finite support of at least one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDist {
    Fixed { value: u32 },
    Uniform { min: u32, max: u32 },
    /// Empirical histogram, e.g. prompt lengths of a chat dataset.
    Histogram { values: Vec<u32>, weights: Vec<f64> },
    /// Histogram read from a `length,weight` CSV file when the config loads.
    HistogramFile { path: String },
}

impl LengthDist {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            LengthDist::Fixed { value } if *value >= 1 => Ok(()),
            LengthDist::Uniform { min, max } if *min >= 1 && min <= max => Ok(()),
            LengthDist::Histogram { values, weights } => {
                if values.is_empty() || values.len() != weights.len() {
                    return Err("histogram needs equally many values and weights".into());
                }
                if values.contains(&0) {
                    return Err("histogram lengths must be >= 1".into());
                }
                if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
                    return Err("histogram weights must be non-negative with a positive sum".into());
                }
                Ok(())
            }
            LengthDist::HistogramFile { path } => Err(format!("histogram file `{path}` was not loaded")),
            _ => Err(format!("invalid length distribution {self:?}")),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            LengthDist::Fixed { value } => f64::from(*value),
            LengthDist::Uniform { min, max } => (f64::from(*min) + f64::from(*max)) / 2.0,
            LengthDist::Histogram { values, weights } => {
                let total: f64 = weights.iter().sum();
                values.iter().zip(weights).map(|(v, w)| f64::from(*v) * w).sum::<f64>() / total
            }
            LengthDist::HistogramFile { .. } => f64::NAN,
        }
    }

    /// Reads a `length,weight` CSV. Blank lines and `#` comments are skipped.
    pub fn load_histogram(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut values = Vec::new();
        let mut weights = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("length") {
                continue;
            }
            let err = |message: String| ConfigError::Line {
                path: path.display().to_string(),
                line: i + 1,
                message,
            };
            let (v, w) = line
                .split_once(',')
                .ok_or_else(|| err("expected `length,weight`".into()))?;
            values.push(v.trim().parse::<u32>().map_err(|e| err(format!("length: {e}")))?);
            weights.push(w.trim().parse::<f64>().map_err(|e| err(format!("weight: {e}")))?);
        }
        let dist = LengthDist::Histogram { values, weights };
        dist.validate().map_err(|message| ConfigError::Parse {
            path: path.display().to_string(),
            message,
        })?;
        Ok(dist)
    }

    fn sampler(&self) -> Sampler<'_> {
        match self {
            LengthDist::Histogram { values, weights } => {
                Sampler::Weighted(values, WeightedIndex::new(weights).expect("validated weights"))
            }
            other => Sampler::Direct(other),
        }
    }
}

enum Sampler<'a> {
    Direct(&'a LengthDist),
    Weighted(&'a [u32], WeightedIndex<f64>),
}

impl Sampler<'_> {
    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        match self {
            Sampler::Direct(LengthDist::Fixed { value }) => *value,
            Sampler::Direct(LengthDist::Uniform { min, max }) => rng.random_range(*min..=*max),
            Sampler::Direct(_) => unreachable!("histograms use the weighted sampler"),
            Sampler::Weighted(values, index) => values[index.sample(rng)],
        }
    }
}

/// A constant-rate window `[start, end)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePhase {
    pub start: f64,
    pub end: f64,
    /// Requests per second; zero silences the model in this window.
    pub rate: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWorkload {
    pub model_id: String,
    /// Constant rate over the whole run, used when `phases` is empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub phases: Vec<RatePhase>,
    #[serde(default = "unit")]
    pub rate_scale: f64,
    pub prompt: LengthDist,
    pub output: LengthDist,
}

impl ModelWorkload {
    /// Phases clipped to `[0, duration)`.
    pub fn effective_phases(&self, duration: f64) -> Vec<RatePhase> {
        let phases = if self.phases.is_empty() {
            vec![RatePhase {
                start: 0.0,
                end: duration,
                rate: self.rate.unwrap_or(0.0),
            }]
        } else {
            self.phases.clone()
        };
        phases
            .into_iter()
            .map(|p| RatePhase {
                start: p.start.max(0.0),
                end: p.end.min(duration),
                rate: p.rate * self.rate_scale,
            })
            .filter(|p| p.end > p.start)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub seed: u64,
    /// Seconds of arrivals.
    pub duration: f64,
    pub models: Vec<ModelWorkload>,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err("workload duration must be positive".into());
        }
        for m in &self.models {
            m.prompt.validate().map_err(|e| format!("{}: prompt: {e}", m.model_id))?;
            m.output.validate().map_err(|e| format!("{}: output: {e}", m.model_id))?;
            if !(m.rate_scale >= 0.0 && m.rate_scale.is_finite()) {
                return Err(format!("{}: rate_scale must be >= 0", m.model_id));
            }
            if m.phases.is_empty() && !m.rate.is_some_and(|r| r >= 0.0 && r.is_finite()) {
                return Err(format!("{}: needs a rate or rate phases", m.model_id));
            }
            for p in &m.phases {
                if !(p.rate >= 0.0 && p.rate.is_finite()) || !(p.end >= p.start) {
                    return Err(format!("{}: malformed phase {p:?}", m.model_id));
                }
            }
        }
        Ok(())
    }
}

/// One arrival: the line-delimited trace record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub arrival_time: f64,
    pub model_id: String,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
}

/// Poisson arrivals for every model, merged in arrival order.
pub fn generate_workload(spec: &WorkloadSpec) -> Vec<TraceRecord> {
    let mut out: Vec<(usize, TraceRecord)> = Vec::new();
    for (idx, model) in spec.models.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(idx as u64);
        let prompt = model.prompt.sampler();
        let output = model.output.sampler();
        for phase in model.effective_phases(spec.duration) {
            if phase.rate <= 0.0 {
                continue;
            }
            let gap = Exp::new(phase.rate).expect("positive rate");
            let mut t = phase.start;
            loop {
                t += gap.sample(&mut rng);
                if t >= phase.end {
                    break;
                }
                let record = TraceRecord {
                    arrival_time: t,
                    model_id: model.model_id.clone(),
                    prompt_tokens: prompt.sample(&mut rng),
                    output_tokens: output.sample(&mut rng),
                };
                out.push((idx, record));
            }
        }
    }
    out.sort_by(|(ia, a), (ib, b)| a.arrival_time.total_cmp(&b.arrival_time).then(ia.cmp(ib)));
    out.into_iter().map(|(_, r)| r).collect()
}

pub fn write_trace<W: Write>(records: &[TraceRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "arrival_time_s,model_id,prompt_tokens,output_tokens")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{}",
            r.arrival_time, r.model_id, r.prompt_tokens, r.output_tokens
        )?;
    }
    Ok(())
}

/// Parses a trace; `origin` names the source in diagnostics.
pub fn read_trace<R: BufRead>(reader: R, origin: &str) -> Result<Vec<TraceRecord>, ConfigError> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| ConfigError::Io {
            path: origin.to_string(),
            source,
        })?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("arrival_time") {
            continue;
        }
        let err = |message: String| ConfigError::Line {
            path: origin.to_string(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, got {}", fields.len())));
        }
        let arrival_time: f64 = fields[0]
            .parse()
            .map_err(|e| err(format!("arrival_time_s: {e}")))?;
        if !(arrival_time >= 0.0 && arrival_time.is_finite()) {
            return Err(err("arrival_time_s must be a finite non-negative number".into()));
        }
        let prompt_tokens: u32 = fields[2].parse().map_err(|e| err(format!("prompt_tokens: {e}")))?;
        let output_tokens: u32 = fields[3].parse().map_err(|e| err(format!("output_tokens: {e}")))?;
        if prompt_tokens == 0 || output_tokens == 0 {
            return Err(err("token counts must be >= 1".into()));
        }
        records.push(TraceRecord {
            arrival_time,
            model_id: fields[1].to_string(),
            prompt_tokens,
            output_tokens,
        });
    }
    records.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(rate: f64, duration: f64, seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            seed,
            duration,
            models: vec![ModelWorkload {
                model_id: "a".into(),
                rate: Some(rate),
                phases: vec![],
                rate_scale: 1.0,
                prompt: LengthDist::Uniform { min: 10, max: 500 },
                output: LengthDist::Fixed { value: 64 },
            }],
        }
    }

    #[test]
    fn poisson_count_is_concentrated() {
        // Mean 200, sd ~14.1: [140, 260] is beyond +-4 sd.
        for seed in 0..20 {
            let n = generate_workload(&spec(2.0, 100.0, seed)).len();
            assert!((140..=260).contains(&n), "seed {seed}: {n} arrivals");
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let a = generate_workload(&spec(3.0, 50.0, 7));
        let b = generate_workload(&spec(3.0, 50.0, 7));
        assert_eq!(a, b);
        let c = generate_workload(&spec(3.0, 50.0, 8));
        assert_ne!(a, c);
    }

    #[test]
    fn zero_rate_phase_is_silent() {
        let mut s = spec(0.0, 100.0, 1);
        s.models[0].phases = vec![
            RatePhase { start: 0.0, end: 40.0, rate: 5.0 },
            RatePhase { start: 40.0, end: 70.0, rate: 0.0 },
            RatePhase { start: 70.0, end: 100.0, rate: 5.0 },
        ];
        let trace = generate_workload(&s);
        assert!(!trace.is_empty());
        assert!(trace.iter().all(|r| !(40.0..70.0).contains(&r.arrival_time)));
        assert!(trace.iter().any(|r| r.arrival_time >= 70.0));
    }

    #[test]
    fn rate_scale_multiplies() {
        let mut s = spec(1.0, 200.0, 3);
        let base = generate_workload(&s).len() as f64;
        s.models[0].rate_scale = 4.0;
        let scaled = generate_workload(&s).len() as f64;
        assert!((scaled / base - 4.0).abs() < 1.0, "{base} -> {scaled}");
    }

    #[test]
    fn adding_a_model_keeps_other_streams() {
        let one = spec(2.0, 30.0, 11);
        let mut two = one.clone();
        let mut b = two.models[0].clone();
        b.model_id = "b".into();
        two.models.push(b);
        let a_only: Vec<_> = generate_workload(&two).into_iter().filter(|r| r.model_id == "a").collect();
        assert_eq!(a_only, generate_workload(&one));
    }

    #[test]
    fn histogram_sampling_stays_in_support() {
        let mut s = spec(5.0, 50.0, 2);
        s.models[0].prompt = LengthDist::Histogram {
            values: vec![16, 256, 1024],
            weights: vec![1.0, 0.0, 3.0],
        };
        let trace = generate_workload(&s);
        assert!(trace.iter().all(|r| r.prompt_tokens == 16 || r.prompt_tokens == 1024));
    }

    #[test]
    fn trace_round_trip_and_diagnostics() {
        let trace = generate_workload(&spec(2.0, 10.0, 5));
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf).unwrap();
        let back = read_trace(buf.as_slice(), "mem").unwrap();
        assert_eq!(back, trace);

        let bad = "arrival_time_s,model_id,prompt_tokens,output_tokens\n0.5,a,10,5\n0.7,a,x,5\n";
        match read_trace(bad.as_bytes(), "t.csv") {
            Err(ConfigError::Line { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation() {
        assert!(LengthDist::Uniform { min: 0, max: 4 }.validate().is_err());
        assert!(LengthDist::Fixed { value: 0 }.validate().is_err());
        let mut s = spec(1.0, 10.0, 0);
        s.models[0].rate = None;
        assert!(s.validate().is_err());
    }
}

//! TOML scenario files: cluster, models, workload, slab sizing and run options.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::placement::GpuGroup;
use crate::precision::{MmeEstimator, ModelProfile};
use crate::sim::{BlockSizing, MemoryMode, Policy, SimOptions, SlabSizing};
use crate::workload::{read_trace, LengthDist, ModelWorkload, TraceRecord, WorkloadSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuSpec {
    pub id: String,
    pub memory_bytes: u64,
}

/// A TP group: the GPUs that jointly host one shard set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub id: String,
    pub gpus: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub gpus: Vec<GpuSpec>,
    /// Omitted groups mean one single-GPU group per GPU.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<GroupSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub duration: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<ModelWorkload>,
    /// Replays a trace file instead of generating arrivals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
}

fn default_interval() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub mode: MemoryMode,
    pub policy: Policy,
    #[serde(default)]
    pub block_sizing: BlockSizing,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv_pool_bytes: Option<u64>,
    #[serde(default = "default_interval")]
    pub sample_interval: f64,
    #[serde(default)]
    pub record_decisions: bool,
    #[serde(default)]
    pub check_invariants: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measure_window: Option<(f64, f64)>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            mode: MemoryMode::DynamicSlab,
            policy: Policy::Adaptive,
            block_sizing: BlockSizing::PerModel,
            kv_pool_bytes: None,
            sample_interval: default_interval(),
            record_decisions: false,
            check_invariants: false,
            measure_window: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub cluster: ClusterConfig,
    pub models: Vec<ModelProfile>,
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub slab: SlabSizing,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub estimator: MmeEstimator,
    #[serde(default)]
    pub output: OutputConfig,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ScenarioConfig {
    /// Parses TOML; `origin` names the source in diagnostics.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| match e.span() {
            Some(span) => ConfigError::Line {
                path: origin.to_string(),
                line: line_of(text, span.start),
                message: e.message().to_string(),
            },
            None => ConfigError::Parse {
                path: origin.to_string(),
                message: e.message().to_string(),
            },
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text, &path.display().to_string())?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let path = Path::new(p);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let mut gpu_ids = BTreeSet::new();
        for g in &self.cluster.gpus {
            if !gpu_ids.insert(g.id.as_str()) {
                return invalid(format!("duplicate GPU id `{}`", g.id));
            }
            if g.memory_bytes == 0 {
                return invalid(format!("GPU `{}` has no memory", g.id));
            }
        }
        if gpu_ids.is_empty() {
            return invalid("cluster has no GPUs".into());
        }
        let mut group_ids = BTreeSet::new();
        for g in &self.cluster.groups {
            if !group_ids.insert(g.id.as_str()) {
                return invalid(format!("duplicate group id `{}`", g.id));
            }
            if g.gpus.is_empty() {
                return invalid(format!("group `{}` has no GPUs", g.id));
            }
            for m in &g.gpus {
                if !gpu_ids.contains(m.as_str()) {
                    return invalid(format!("group `{}` references unknown GPU `{m}`", g.id));
                }
            }
        }
        let mut model_ids = BTreeSet::new();
        for m in &self.models {
            if !model_ids.insert(m.model_id.as_str()) {
                return invalid(format!("duplicate model id `{}`", m.model_id));
            }
            m.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        for w in &self.workload.models {
            if !model_ids.contains(w.model_id.as_str()) {
                return invalid(format!("workload references unknown model `{}`", w.model_id));
            }
        }
        if self.workload.models.is_empty() && self.workload.trace.is_none() {
            return invalid("workload needs per-model rates or a trace file".into());
        }
        match self.slab {
            SlabSizing::AutoLcm { multiplier } if multiplier < 1 => {
                return invalid("auto-lcm multiplier must be >= 1".into());
            }
            SlabSizing::Explicit { bytes: 0 } => return invalid("explicit slab size must be > 0".into()),
            _ => {}
        }
        if !(self.simulation.sample_interval > 0.0) {
            return invalid("sample_interval must be > 0".into());
        }
        Ok(())
    }

    /// Placement candidates. A multi-GPU group gets the smallest member memory.
    pub fn gpu_groups(&self) -> Vec<GpuGroup> {
        let memory = |id: &str| {
            self.cluster
                .gpus
                .iter()
                .find(|g| g.id == id)
                .map_or(0, |g| g.memory_bytes)
        };
        if self.cluster.groups.is_empty() {
            return self
                .cluster
                .gpus
                .iter()
                .map(|g| GpuGroup::new(g.id.clone(), vec![g.id.clone()], g.memory_bytes))
                .collect();
        }
        self.cluster
            .groups
            .iter()
            .map(|g| {
                let mem = g.gpus.iter().map(|m| memory(m)).min().unwrap_or(0);
                GpuGroup::new(g.id.clone(), g.gpus.clone(), mem)
            })
            .collect()
    }

    /// Workload with histogram files loaded and the scenario seed applied.
    pub fn workload_spec(&self, seed: Option<u64>) -> Result<WorkloadSpec, ConfigError> {
        let mut models = self.workload.models.clone();
        for m in &mut models {
            for dist in [&mut m.prompt, &mut m.output] {
                if let LengthDist::HistogramFile { path } = dist {
                    *dist = LengthDist::load_histogram(&self.resolve(path))?;
                }
            }
        }
        let spec = WorkloadSpec {
            seed: seed.unwrap_or(self.seed),
            duration: self.workload.duration,
            models,
        };
        spec.validate().map_err(ConfigError::Invalid)?;
        Ok(spec)
    }

    /// Generated arrivals, or the replayed trace file.
    pub fn trace(&self, seed: Option<u64>) -> Result<Vec<TraceRecord>, ConfigError> {
        if let Some(p) = &self.workload.trace {
            let path = self.resolve(p);
            let file = std::fs::File::open(&path).map_err(|source| ConfigError::Io {
                path: path.display().to_string(),
                source,
            })?;
            return read_trace(std::io::BufReader::new(file), &path.display().to_string());
        }
        Ok(crate::workload::generate_workload(&self.workload_spec(seed)?))
    }

    pub fn sim_options(&self) -> SimOptions {
        SimOptions {
            mode: self.simulation.mode,
            policy: self.simulation.policy,
            block_sizing: self.simulation.block_sizing,
            slab: self.slab,
            kv_pool_bytes: self.simulation.kv_pool_bytes,
            duration: Some(self.workload.duration),
            sample_interval: self.simulation.sample_interval,
            record_decisions: self.simulation.record_decisions,
            record_slab_log: false,
            check_invariants: self.simulation.check_invariants,
            measure_window: self.simulation.measure_window,
        }
    }
}

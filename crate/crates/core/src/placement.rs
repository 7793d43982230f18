//! Model-to-GPU placement.
//!
//! Models are placed one by one in descending order of base footprint. Each
//! candidate GPU group is scored by how many tokens its contested memory
//! (capacity left after charging base footprints) is expected to cache once
//! the model joins, and the model goes to the best-scoring group.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::PlacementError;
use crate::precision::{MmeEstimator, ModelProfile};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resident {
    pub model_id: String,
    /// Per-shard base footprint in bytes.
    pub footprint: u64,
}

/// One placement candidate: a single GPU, or a TP-sized group of GPUs that
/// each hold one shard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpuGroup {
    pub group_id: String,
    pub member_gpus: Vec<String>,
    /// Memory of each member GPU in bytes.
    pub total_memory: u64,
    #[serde(default)]
    pub residents: Vec<Resident>,
}

impl GpuGroup {
    pub fn new(group_id: impl Into<String>, member_gpus: Vec<String>, total_memory: u64) -> Self {
        Self {
            group_id: group_id.into(),
            member_gpus,
            total_memory,
            residents: Vec::new(),
        }
    }

    pub fn tp_degree(&self) -> u32 {
        self.member_gpus.len() as u32
    }

    pub fn charged(&self) -> u64 {
        self.residents.iter().map(|r| r.footprint).sum()
    }

    /// Contested memory left after charging resident footprints.
    pub fn residual(&self) -> u64 {
        self.total_memory.saturating_sub(self.charged())
    }

    fn fits(&self, tp_degree: u32, footprint: u64) -> bool {
        self.tp_degree() == tp_degree && self.charged() <= self.total_memory && footprint <= self.residual()
    }
}

/// Averaged score: mean efficiency of the group's models times the
/// contested memory left.
pub fn proxy_score(mus: &[f64], k_rem: f64) -> f64 {
    if mus.is_empty() {
        return 0.0;
    }
    mus.iter().sum::<f64>() / mus.len() as f64 * k_rem
}

/// Best split of `k_rem` among the models on a grid of `step`, every model
/// receiving at least one step when the grid allows it. Exhaustive dynamic
/// program over the grid.
pub fn exact_score(mus: &[f64], k_rem: f64, step: f64) -> f64 {
    if mus.is_empty() || !(k_rem > 0.0) || !(step > 0.0) {
        return 0.0;
    }
    let units = (k_rem / step + 1e-9).floor() as usize;
    let min_units = usize::from(units >= mus.len());
    // best[u] = best value using exactly the models seen so far and at most u units.
    let mut best = vec![0.0f64; units + 1];
    for &mu in mus {
        let mut next = vec![f64::NEG_INFINITY; units + 1];
        for (u, slot) in next.iter_mut().enumerate() {
            for k in min_units..=u {
                let prev = best[u - k];
                if prev == f64::NEG_INFINITY {
                    continue;
                }
                let v = prev + mu * k as f64 * step;
                if v > *slot {
                    *slot = v;
                }
            }
        }
        best = next;
    }
    best.into_iter().fold(0.0, f64::max)
}

/// Looks up profiles and efficiency estimates for scoring.
pub struct ScoringContext<'a> {
    pub profiles: &'a BTreeMap<String, ModelProfile>,
    pub estimator: &'a MmeEstimator,
}

impl ScoringContext<'_> {
    fn mu(&self, profile: &ModelProfile, group: &GpuGroup) -> f64 {
        self.estimator.estimate(profile, &group.group_id).tokens_per_byte
    }

    /// Efficiencies of every model on the group once `candidate` has joined,
    /// and the residual left after charging its footprint.
    fn after_join(
        &self,
        group: &GpuGroup,
        candidate: &ModelProfile,
        footprint: u64,
    ) -> Result<(Vec<f64>, u64), PlacementError> {
        if !group.fits(candidate.tp_degree, footprint) {
            return Err(PlacementError::InfeasibleCandidate {
                model: candidate.model_id.clone(),
                group: group.group_id.clone(),
            });
        }
        let mut mus = Vec::with_capacity(group.residents.len() + 1);
        for r in &group.residents {
            let p = self
                .profiles
                .get(&r.model_id)
                .ok_or_else(|| PlacementError::UnknownModel(r.model_id.clone()))?;
            mus.push(self.mu(p, group));
        }
        mus.push(self.mu(candidate, group));
        Ok((mus, group.residual() - footprint))
    }

    pub fn score_proxy(
        &self,
        group: &GpuGroup,
        candidate: &ModelProfile,
        footprint: u64,
    ) -> Result<f64, PlacementError> {
        let (mus, k_rem) = self.after_join(group, candidate, footprint)?;
        Ok(proxy_score(&mus, k_rem as f64))
    }

    pub fn score_exact(
        &self,
        group: &GpuGroup,
        candidate: &ModelProfile,
        footprint: u64,
        step: f64,
    ) -> Result<f64, PlacementError> {
        let (mus, k_rem) = self.after_join(group, candidate, footprint)?;
        Ok(exact_score(&mus, k_rem as f64, step))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateScore {
    pub group_id: String,
    /// Residual before the model joins.
    pub k_rem: u64,
    /// `None` when the model does not fit.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlacementStep {
    pub model_id: String,
    pub footprint: u64,
    pub candidates: Vec<CandidateScore>,
    pub chosen: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlacementPlan {
    /// Instance id to group id.
    pub assignments: BTreeMap<String, String>,
    /// Per-shard base footprints of every placed instance.
    pub footprints: BTreeMap<String, u64>,
    /// Batch size at which each instance's TTFT was checked against its SLO.
    pub operating_batch: BTreeMap<String, u32>,
    /// Residual contested memory per group after placement.
    pub residuals: BTreeMap<String, u64>,
    pub groups: Vec<GpuGroup>,
    /// Placed instances, data-parallel replicas expanded.
    pub instances: Vec<ModelProfile>,
    pub trace: Vec<PlacementStep>,
}

impl PlacementPlan {
    pub fn group(&self, group_id: &str) -> Option<&GpuGroup> {
        self.groups.iter().find(|g| g.group_id == group_id)
    }

    pub fn instance(&self, model_id: &str) -> Option<&ModelProfile> {
        self.instances.iter().find(|p| p.model_id == model_id)
    }

    /// Instances resident on `group_id`, in placement order.
    pub fn residents_of(&self, group_id: &str) -> Vec<&ModelProfile> {
        self.group(group_id)
            .map(|g| {
                g.residents
                    .iter()
                    .filter_map(|r| self.instance(&r.model_id))
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// A model instance ready for placement.
#[derive(Debug, Clone)]
struct Pending {
    profile: ModelProfile,
    footprint: u64,
    batch: u32,
}

/// Expands replicas, sorts by footprint and greedily assigns every instance
/// to its highest-scoring group.
pub fn place_models(
    models: &[ModelProfile],
    groups: &[GpuGroup],
    estimator: &MmeEstimator,
) -> Result<PlacementPlan, PlacementError> {
    let mut pending = Vec::new();
    for m in models {
        m.validate()?;
        let replicas = m.required_replicas()?;
        for instance in m.replicate(replicas.replicas) {
            let fp = instance.base_footprint()?;
            pending.push(Pending {
                profile: instance,
                footprint: fp.bytes,
                batch: fp.batch_size,
            });
        }
    }
    pending.sort_by(|a, b| {
        b.footprint
            .cmp(&a.footprint)
            .then_with(|| a.profile.model_id.cmp(&b.profile.model_id))
    });

    let mut groups: Vec<GpuGroup> = groups.to_vec();
    groups.sort_by(|a, b| a.group_id.cmp(&b.group_id));

    // Pre-existing residents must have profiles among the inputs.
    let mut profiles: BTreeMap<String, ModelProfile> = BTreeMap::new();
    for m in models {
        profiles.insert(m.model_id.clone(), m.clone());
    }
    for p in &pending {
        profiles.insert(p.profile.model_id.clone(), p.profile.clone());
    }

    let mut plan = PlacementPlan {
        assignments: BTreeMap::new(),
        footprints: BTreeMap::new(),
        operating_batch: BTreeMap::new(),
        residuals: BTreeMap::new(),
        groups: Vec::new(),
        instances: Vec::new(),
        trace: Vec::new(),
    };

    for item in pending {
        let ctx = ScoringContext {
            profiles: &profiles,
            estimator,
        };
        let mut candidates = Vec::with_capacity(groups.len());
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in groups.iter().enumerate() {
            if g.tp_degree() != item.profile.tp_degree {
                continue;
            }
            let score = match ctx.score_proxy(g, &item.profile, item.footprint) {
                Ok(s) => Some(s),
                Err(PlacementError::InfeasibleCandidate { .. }) => None,
                Err(e) => return Err(e),
            };
            if let Some(s) = score {
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((gi, s));
                }
            }
            candidates.push(CandidateScore {
                group_id: g.group_id.clone(),
                k_rem: g.residual(),
                score,
            });
        }
        let Some((gi, _)) = best else {
            return Err(PlacementError::PlacementInfeasible {
                model: item.profile.model_id.clone(),
            });
        };
        let group = &mut groups[gi];
        group.residents.push(Resident {
            model_id: item.profile.model_id.clone(),
            footprint: item.footprint,
        });
        let id = item.profile.model_id.clone();
        plan.assignments.insert(id.clone(), group.group_id.clone());
        plan.footprints.insert(id.clone(), item.footprint);
        plan.operating_batch.insert(id.clone(), item.batch);
        plan.trace.push(PlacementStep {
            model_id: id,
            footprint: item.footprint,
            candidates,
            chosen: group.group_id.clone(),
        });
        plan.instances.push(item.profile);
    }

    plan.residuals = groups.iter().map(|g| (g.group_id.clone(), g.residual())).collect();
    plan.groups = groups;
    Ok(plan)
}

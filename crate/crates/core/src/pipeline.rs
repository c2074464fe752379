//! Reconstruction, grounding, visibility scoring and the view-planning loop.

use std::cell::RefCell;
use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{self, FlowConfig, FlowError};
use crate::geometry::{
    circular_trajectory, hemisphere_candidates, CameraIntrinsics, GeometryError, Vec3, Viewpoint,
    ViewpointRecord, EVAL_RADIUS,
};
use crate::heatmap::{AffordanceHeatmap, HeatKind, HeatmapError};
use crate::metrics::{aiou_acd, volumetric_iou, MetricError};
use crate::netcore::{
    geometry_context, input_scale, pe_table, GeometryContext, ModelKind, NetError,
    StructureContext, VelocityModel,
};
use crate::render::{render_affordance, render_observation, DepthImage, FeatureImage, RenderError};
use crate::synthscene::{
    ground_truth_affordance, occupancy_set, QueryTable, SceneError, SyntheticObject,
};
use crate::voxel::{
    backproject_view, dense_threshold, fuse, DenseGrid, Occupancy, SparseVoxelGrid, VoxelError,
};

/// Elevation of the sequential baseline's circular trajectory, in degrees.
pub const SEQUENTIAL_ELEVATION_DEG: f64 = 30.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no views given")]
    NoViews,
    #[error("occupancy is empty")]
    EmptyOccupancy,
    #[error("every candidate has been visited")]
    CandidatesExhausted,
    #[error("query {0:?} has an empty ground-truth mask")]
    DegenerateQuery(String),
    #[error("budget must be at least 1")]
    Budget,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// One RGBD observation with its camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub depth: DepthImage,
    pub features: FeatureImage,
    pub view: Viewpoint,
}

impl Observation {
    /// Render `obj` (occupancy already voxelized) from `view`.
    pub fn render(
        obj: &SyntheticObject,
        occupancy: &Occupancy,
        view: &Viewpoint,
        channels: usize,
    ) -> Result<Self, PipelineError> {
        let (depth, features) = render_observation(obj, occupancy, view, channels)?;
        Ok(Self {
            depth,
            features,
            view: *view,
        })
    }
}

/// Back-project and fuse observations.
pub fn fuse_observations(
    views: &[Observation],
    r: usize,
) -> Result<SparseVoxelGrid, PipelineError> {
    if views.is_empty() {
        return Err(PipelineError::NoViews);
    }
    let grids = views
        .iter()
        .map(|o| backproject_view(&o.depth, &o.features, &o.view, r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(fuse(&grids)?)
}

/// Velocity over the dense `r³` structure latent.
pub trait StructureVelocity: Sync {
    fn resolution(&self) -> usize;
    fn velocity(
        &self,
        state: &[f64],
        ctx: &StructureContext,
        t: f64,
    ) -> Result<Vec<f64>, PipelineError>;
}

/// Velocity over per-voxel affordance logits. `query` is `None` for the
/// unconditional branch.
pub trait AffordanceVelocity: Sync {
    fn velocity(
        &self,
        state: &[f64],
        geometry: &GeometryContext,
        query: Option<&[f64]>,
        t: f64,
    ) -> Result<Vec<f64>, PipelineError>;
}

/// A trained structure model bound to its positional-encoding table.
pub struct StructureNet<'a> {
    model: &'a VelocityModel,
    pe: Vec<f64>,
}

impl<'a> StructureNet<'a> {
    pub fn new(model: &'a VelocityModel) -> Result<Self, PipelineError> {
        model.expect_kind(ModelKind::Structure)?;
        Ok(Self {
            model,
            pe: pe_table(model.meta.resolution, model.meta.pe_dim)?,
        })
    }
}

impl StructureVelocity for StructureNet<'_> {
    fn resolution(&self) -> usize {
        self.model.meta.resolution
    }

    fn velocity(
        &self,
        state: &[f64],
        ctx: &StructureContext,
        t: f64,
    ) -> Result<Vec<f64>, PipelineError> {
        let m = &self.model.meta;
        let c_in = input_scale(t, m.noise_std, m.target_scale);
        let tokens = ctx.tokens(state, c_in, &self.pe, m.pe_dim)?;
        Ok(self.model.velocity(state, &tokens, &ctx.pooled, t)?)
    }
}

pub struct AffordanceNet<'a> {
    model: &'a VelocityModel,
    pe: Vec<f64>,
}

impl<'a> AffordanceNet<'a> {
    pub fn new(model: &'a VelocityModel) -> Result<Self, PipelineError> {
        model.expect_kind(ModelKind::Affordance)?;
        Ok(Self {
            model,
            pe: pe_table(model.meta.resolution, model.meta.pe_dim)?,
        })
    }
}

impl AffordanceVelocity for AffordanceNet<'_> {
    fn velocity(
        &self,
        state: &[f64],
        geometry: &GeometryContext,
        query: Option<&[f64]>,
        t: f64,
    ) -> Result<Vec<f64>, PipelineError> {
        let m = &self.model.meta;
        let c_in = input_scale(t, m.noise_std, m.target_scale);
        let tokens = geometry.tokens(state, c_in, &self.pe, m.pe_dim)?;
        let zeros = vec![0.0; self.model.dims.cond_dim];
        Ok(self
            .model
            .velocity(state, &tokens, query.unwrap_or(&zeros), t)?)
    }
}

/// Exact straight-path velocity `(x - x0) / t` toward a fixed target.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleVelocity {
    pub resolution: usize,
    pub target: Vec<f64>,
}

impl OracleVelocity {
    /// Target `±1` occupancy of `occ`.
    pub fn from_occupancy(occ: &Occupancy) -> Self {
        Self {
            resolution: occ.resolution(),
            target: occ.to_dense().into_values(),
        }
    }

    fn field(&self, state: &[f64], t: f64) -> Vec<f64> {
        state
            .iter()
            .zip(&self.target)
            .map(|(x, x0)| (x - x0) / t)
            .collect()
    }
}

impl StructureVelocity for OracleVelocity {
    fn resolution(&self) -> usize {
        self.resolution
    }

    fn velocity(
        &self,
        state: &[f64],
        _ctx: &StructureContext,
        t: f64,
    ) -> Result<Vec<f64>, PipelineError> {
        Ok(self.field(state, t))
    }
}

impl AffordanceVelocity for OracleVelocity {
    fn velocity(
        &self,
        state: &[f64],
        _g: &GeometryContext,
        _q: Option<&[f64]>,
        t: f64,
    ) -> Result<Vec<f64>, PipelineError> {
        Ok(self.field(state, t))
    }
}

/// Euler sampling where the velocity callback may fail; the first error
/// aborts the integration and is returned.
fn sample_fallible<F, R>(
    len: usize,
    cfg: &FlowConfig,
    rng: &mut R,
    mut f: F,
) -> Result<Vec<f64>, PipelineError>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>, PipelineError>,
    R: Rng + ?Sized,
{
    let failure: RefCell<Option<PipelineError>> = RefCell::new(None);
    let out = flow::euler_sample(
        |x, t| match f(x, t) {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                vec![f64::NAN; x.len()]
            }
        },
        len,
        cfg,
        rng,
    );
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(out?)
}

/// Sample the structure latent for a fused observation and threshold it at
/// zero. An empty grid samples unconditionally.
pub fn reconstruct_with<S: StructureVelocity + ?Sized, R: Rng + ?Sized>(
    grid: &SparseVoxelGrid,
    velocity: &S,
    flow_cfg: &FlowConfig,
    rng: &mut R,
) -> Result<Occupancy, PipelineError> {
    let r = velocity.resolution();
    if grid.resolution() != r {
        return Err(
            VoxelError::Shape(format!("grid r={} vs model r={r}", grid.resolution())).into(),
        );
    }
    let cond = StructureContext::from_grid(grid)?;
    let uncond = StructureContext::unconditional(r, grid.channels());
    let guided = !grid.is_empty();
    let latent = sample_fallible(r * r * r, flow_cfg, rng, |x, t| {
        let vc = velocity.velocity(x, &cond, t)?;
        if !guided {
            return Ok(vc);
        }
        let vu = velocity.velocity(x, &uncond, t)?;
        Ok(flow::cfg_combine(&vc, &vu, flow_cfg.guidance_strength)?)
    })?;
    Ok(dense_threshold(&DenseGrid::new(r, 1, latent)?, 0.0)?)
}

/// Reconstruct occupancy from observations with a trained structure model.
pub fn reconstruct<R: Rng + ?Sized>(
    views: &[Observation],
    model: &VelocityModel,
    flow_cfg: &FlowConfig,
    rng: &mut R,
) -> Result<Occupancy, PipelineError> {
    if !model.is_trained() {
        return Err(NetError::Untrained.into());
    }
    reconstruct_unchecked(views, model, flow_cfg, rng)
}

/// [`reconstruct`] without the trained-model check, for baselines.
pub fn reconstruct_unchecked<R: Rng + ?Sized>(
    views: &[Observation],
    model: &VelocityModel,
    flow_cfg: &FlowConfig,
    rng: &mut R,
) -> Result<Occupancy, PipelineError> {
    let net = StructureNet::new(model)?;
    let grid = fuse_observations(views, model.meta.resolution)?;
    reconstruct_with(&grid, &net, flow_cfg, rng)
}

/// Sample per-voxel affordance logits on `occupied` and return their
/// sigmoid.
pub fn ground_with<A: AffordanceVelocity + ?Sized, R: Rng + ?Sized>(
    occupied: &Occupancy,
    query_embedding: &[f64],
    velocity: &A,
    flow_cfg: &FlowConfig,
    rng: &mut R,
) -> Result<AffordanceHeatmap, PipelineError> {
    if occupied.is_empty() {
        return Err(PipelineError::EmptyOccupancy);
    }
    let geo = geometry_context(occupied);
    let logits = sample_fallible(occupied.len(), flow_cfg, rng, |x, t| {
        let vc = velocity.velocity(x, &geo, Some(query_embedding), t)?;
        let vu = velocity.velocity(x, &geo, None, t)?;
        Ok(flow::cfg_combine(&vc, &vu, flow_cfg.guidance_strength)?)
    })?;
    let values = logits.iter().map(|&z| flow::sigmoid(z)).collect();
    Ok(AffordanceHeatmap::new(
        occupied.resolution(),
        HeatKind::Probability,
        occupied.indices().to_vec(),
        values,
    )?)
}

pub fn ground<R: Rng + ?Sized>(
    occupied: &Occupancy,
    query: &str,
    table: &QueryTable,
    model: &VelocityModel,
    flow_cfg: &FlowConfig,
    rng: &mut R,
) -> Result<AffordanceHeatmap, PipelineError> {
    if !model.is_trained() {
        return Err(NetError::Untrained.into());
    }
    ground_unchecked(occupied, query, table, model, flow_cfg, rng)
}

/// [`ground`] without the trained-model check, for baselines.
pub fn ground_unchecked<R: Rng + ?Sized>(
    occupied: &Occupancy,
    query: &str,
    table: &QueryTable,
    model: &VelocityModel,
    flow_cfg: &FlowConfig,
    rng: &mut R,
) -> Result<AffordanceHeatmap, PipelineError> {
    let emb = &table.lookup(query)?.embedding;
    ground_with(occupied, emb, &AffordanceNet::new(model)?, flow_cfg, rng)
}

/// Sum of the rendered heatmap over all pixels.
pub fn visibility_score(
    occupied: &Occupancy,
    heat: &AffordanceHeatmap,
    view: &Viewpoint,
) -> Result<f64, PipelineError> {
    Ok(render_affordance(occupied, heat, view)?.sum())
}

/// Scores of every candidate; visited candidates get `None`.
pub fn candidate_scores(
    occupied: &Occupancy,
    heat: &AffordanceHeatmap,
    candidates: &[Viewpoint],
    visited: &BTreeSet<usize>,
) -> Result<Vec<Option<f64>>, PipelineError> {
    candidates
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            if visited.contains(&i) {
                Ok(None)
            } else {
                visibility_score(occupied, heat, v).map(Some)
            }
        })
        .collect()
}

/// Index of the maximum defined score; the lowest index wins ties.
pub fn argmax_lowest(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Unvisited candidate with the highest visibility score, its index and
/// all scores.
pub fn select_next_view(
    occupied: &Occupancy,
    heat: &AffordanceHeatmap,
    candidates: &[Viewpoint],
    visited: &BTreeSet<usize>,
) -> Result<(usize, Vec<Option<f64>>), PipelineError> {
    let scores = candidate_scores(occupied, heat, candidates, visited)?;
    let i = argmax_lowest(&scores).ok_or(PipelineError::CandidatesExhausted)?;
    Ok((i, scores))
}

/// Candidate from which the ground-truth affordance region is least
/// visible; the lowest index wins ties.
pub fn worst_initial_view(
    obj: &SyntheticObject,
    query: &str,
    table: &QueryTable,
    candidates: &[Viewpoint],
    r: usize,
) -> Result<usize, PipelineError> {
    if candidates.is_empty() {
        return Err(PipelineError::CandidatesExhausted);
    }
    let heat = ground_truth_affordance(obj, query, table, r)?;
    if heat.values.iter().all(|&v| v == 0.0) {
        return Err(PipelineError::DegenerateQuery(query.to_string()));
    }
    let occ = occupancy_set(obj, r)?;
    let scores = candidate_scores(&occ, &heat, candidates, &BTreeSet::new())?;
    let mut best = (0, f64::INFINITY);
    for (i, s) in scores.iter().enumerate() {
        let s = s.expect("nothing visited");
        if s < best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Active,
    Random,
    Sequential,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "active" => Ok(Self::Active),
            "random" => Ok(Self::Random),
            "sequential" => Ok(Self::Sequential),
            _ => Err(format!("unknown strategy {s:?}")),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Active => "active",
            Self::Random => "random",
            Self::Sequential => "sequential",
        })
    }
}

/// Settings of the planning loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub resolution: usize,
    pub channels: usize,
    pub image_size: u32,
    pub candidates: usize,
    pub structure_flow: FlowConfig,
    pub affordance_flow: FlowConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            resolution: 8,
            channels: 16,
            image_size: 128,
            candidates: crate::geometry::DEFAULT_CANDIDATES,
            structure_flow: FlowConfig::structure(),
            affordance_flow: FlowConfig::affordance_eval(),
        }
    }
}

impl LoopConfig {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics, PipelineError> {
        Ok(CameraIntrinsics::evaluation(self.image_size)?)
    }

    pub fn candidate_views(&self) -> Result<Vec<Viewpoint>, PipelineError> {
        Ok(hemisphere_candidates(
            self.candidates,
            EVAL_RADIUS,
            &Vec3::zeros(),
            &self.intrinsics()?,
        )?)
    }
}

/// How a view was chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub strategy: Strategy,
    /// Candidate index (active and random) or trajectory index (sequential).
    pub index: usize,
    /// Visibility score of every candidate (active only; `None` = visited).
    pub scores: Option<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub view: ViewpointRecord,
    /// `None` for the initial view.
    pub selection: Option<Selection>,
    pub occupancy: Vec<[usize; 3]>,
    pub heatmap: AffordanceHeatmap,
    pub iou: f64,
    pub aiou: f64,
    pub acd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewTrace {
    pub object_id: String,
    pub query: String,
    pub strategy: Strategy,
    pub budget: usize,
    pub iterations: Vec<IterationRecord>,
}

/// Index of the candidate whose pose equals `view`, if any.
fn candidate_index(candidates: &[Viewpoint], view: &Viewpoint) -> Option<usize> {
    candidates
        .iter()
        .position(|c| c.pose == view.pose && c.intrinsics == view.intrinsics)
}

/// Iterative view acquisition: reconstruct from all views so far, ground
/// the query, record metrics against ground truth, then pick the next view
/// with `strategy`.
///
/// Flow noise at iteration `i` comes from a stream seeded by one draw from
/// `rng` plus `i`, so strategies compared under the same seed share their
/// sampling noise; only the random strategy draws further from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn active_loop<S, A, R>(
    obj: &SyntheticObject,
    query: &str,
    table: &QueryTable,
    initial: &Viewpoint,
    budget: usize,
    strategy: Strategy,
    structure: &S,
    affordance: &A,
    cfg: &LoopConfig,
    rng: &mut R,
) -> Result<ViewTrace, PipelineError>
where
    S: StructureVelocity + ?Sized,
    A: AffordanceVelocity + ?Sized,
    R: Rng + ?Sized,
{
    if budget == 0 {
        return Err(PipelineError::Budget);
    }
    let r = cfg.resolution;
    let gt_occ = occupancy_set(obj, r)?;
    let gt_heat = ground_truth_affordance(obj, query, table, r)?;
    let emb = table.lookup(query)?.embedding.clone();
    let candidates = cfg.candidate_views()?;
    let intr = cfg.intrinsics()?;
    let azimuth = initial.pose.origin().y.atan2(initial.pose.origin().x);
    let trajectory = circular_trajectory(
        cfg.candidates,
        EVAL_RADIUS,
        SEQUENTIAL_ELEVATION_DEG,
        azimuth,
        &Vec3::zeros(),
        &intr,
    )?;
    let mut visited: BTreeSet<usize> = candidate_index(&candidates, initial).into_iter().collect();
    let mut observations = vec![Observation::render(obj, &gt_occ, initial, cfg.channels)?];
    let mut selection: Option<Selection> = None;
    let mut iterations = Vec::with_capacity(budget);
    let noise_seed: u64 = rng.random();
    for it in 0..budget {
        let mut noise = ChaCha8Rng::seed_from_u64(noise_seed.wrapping_add(it as u64));
        let grid = fuse_observations(&observations, r)?;
        let occ = reconstruct_with(&grid, structure, &cfg.structure_flow, &mut noise)?;
        let heat = if occ.is_empty() {
            AffordanceHeatmap::zeros(&occ)
        } else {
            ground_with(&occ, &emb, affordance, &cfg.affordance_flow, &mut noise)?
        };
        let scores = aiou_acd(&heat, &gt_heat)?;
        iterations.push(IterationRecord {
            iteration: it,
            view: ViewpointRecord::from(&observations[it].view),
            selection: selection.take(),
            occupancy: occ.indices().to_vec(),
            heatmap: heat.clone(),
            iou: volumetric_iou(&occ, &gt_occ)?,
            aiou: scores.aiou,
            acd: scores.acd,
        });
        if it + 1 == budget {
            break;
        }
        let (view, sel) = match strategy {
            Strategy::Active => {
                let (i, s) = select_next_view(&occ, &heat, &candidates, &visited)?;
                (
                    candidates[i],
                    Selection {
                        strategy,
                        index: i,
                        scores: Some(s),
                    },
                )
            }
            Strategy::Random => {
                let open: Vec<usize> = (0..candidates.len())
                    .filter(|i| !visited.contains(i))
                    .collect();
                if open.is_empty() {
                    return Err(PipelineError::CandidatesExhausted);
                }
                let i = open[rng.random_range(0..open.len())];
                (
                    candidates[i],
                    Selection {
                        strategy,
                        index: i,
                        scores: None,
                    },
                )
            }
            Strategy::Sequential => {
                let i = (it + 1) % trajectory.len();
                (
                    trajectory[i],
                    Selection {
                        strategy,
                        index: i,
                        scores: None,
                    },
                )
            }
        };
        if let Some(ci) = candidate_index(&candidates, &view) {
            visited.insert(ci);
        }
        selection = Some(sel);
        observations.push(Observation::render(obj, &gt_occ, &view, cfg.channels)?);
    }
    Ok(ViewTrace {
        object_id: obj.object_id.clone(),
        query: query.to_string(),
        strategy,
        budget,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::look_at_world_up;
    use crate::synthscene::generate_object;
    use crate::voxel::VoxelIndex;

    fn intr(size: u32) -> CameraIntrinsics {
        CameraIntrinsics::evaluation(size).unwrap()
    }

    /// Grounding stand-in with a fixed velocity, so sampling returns noise
    /// shifted by a constant.
    struct ConstantAffordance(f64);

    impl AffordanceVelocity for ConstantAffordance {
        fn velocity(
            &self,
            s: &[f64],
            _: &GeometryContext,
            _: Option<&[f64]>,
            _: f64,
        ) -> Result<Vec<f64>, PipelineError> {
            Ok(vec![self.0; s.len()])
        }
    }

    #[test]
    fn oracle_reconstruction_is_exact() {
        let obj = generate_object(4);
        let occ = occupancy_set(&obj, 8).unwrap();
        let view = Viewpoint::new(
            intr(32),
            look_at_world_up(&Vec3::new(1.2, 0.4, 1.5), &Vec3::zeros()).unwrap(),
        );
        let obs = Observation::render(&obj, &occ, &view, 16).unwrap();
        let grid = fuse_observations(&[obs], 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let oracle = OracleVelocity::from_occupancy(&occ);
        for steps in [1, 5, 20] {
            let cfg = FlowConfig {
                steps,
                ..FlowConfig::structure()
            };
            assert_eq!(
                reconstruct_with(&grid, &oracle, &cfg, &mut rng).unwrap(),
                occ
            );
        }
        assert!(matches!(
            fuse_observations(&[], 8),
            Err(PipelineError::NoViews)
        ));
    }

    #[test]
    fn untrained_models_are_rejected() {
        let cfg = crate::netcore::TrainerConfig::default();
        let m = crate::netcore::init_structure_model(&cfg, &FlowConfig::structure()).unwrap();
        let obj = generate_object(0);
        let occ = occupancy_set(&obj, 8).unwrap();
        let view = Viewpoint::new(
            intr(16),
            look_at_world_up(&Vec3::new(0.0, 1.5, 1.3), &Vec3::zeros()).unwrap(),
        );
        let obs = Observation::render(&obj, &occ, &view, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            reconstruct(
                std::slice::from_ref(&obs),
                &m,
                &FlowConfig::structure(),
                &mut rng
            ),
            Err(PipelineError::Net(NetError::Untrained))
        ));
        assert!(reconstruct_unchecked(&[obs], &m, &FlowConfig::structure(), &mut rng).is_ok());
    }

    #[test]
    fn grounding_outputs_probabilities() {
        let occ = occupancy_set(&generate_object(1), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = ground_with(
            &occ,
            &[0.0; 16],
            &ConstantAffordance(-3.0),
            &FlowConfig::affordance_eval(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(h.positions, occ.indices());
        assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let h2 = ground_with(
            &occ,
            &[0.0; 16],
            &ConstantAffordance(-3.0),
            &FlowConfig::affordance_eval(),
            &mut rng,
        )
        .unwrap();
        assert_ne!(h.values, h2.values);
        assert!(ground_with(
            &Occupancy::new(8, vec![]).unwrap(),
            &[0.0; 16],
            &ConstantAffordance(0.0),
            &FlowConfig::default(),
            &mut rng
        )
        .is_err());
    }

    /// Pixels whose ray first hits `target` among `occ`, by direct traversal.
    fn covered_pixels(occ: &Occupancy, target: VoxelIndex, view: &Viewpoint) -> usize {
        let mask = occ.to_mask();
        let r = occ.resolution();
        let mut n = 0;
        for j in 0..view.intrinsics.height {
            for i in 0..view.intrinsics.width {
                let (o, d) = view.pixel_ray(i, j);
                if let Some(h) =
                    crate::render::first_hit(&o, &d, r, |v| mask[crate::voxel::linear_index(v, r)])
                {
                    if h.voxel == target {
                        n += 1;
                    }
                }
            }
        }
        n
    }

    #[test]
    fn visibility_score_cases() {
        let r = 8;
        let cells: Vec<VoxelIndex> = vec![[3, 3, 3], [4, 3, 3], [3, 4, 3]];
        let occ = Occupancy::new(r, cells.clone()).unwrap();
        let view = Viewpoint::new(
            intr(48),
            look_at_world_up(&Vec3::new(1.0, 0.7, 1.5), &Vec3::zeros()).unwrap(),
        );
        assert_eq!(
            visibility_score(&occ, &AffordanceHeatmap::zeros(&occ), &view).unwrap(),
            0.0
        );
        let heat =
            AffordanceHeatmap::new(r, HeatKind::Probability, vec![[4, 3, 3]], vec![1.0]).unwrap();
        let n = covered_pixels(&occ, [4, 3, 3], &view);
        assert!(n > 0);
        assert_eq!(visibility_score(&occ, &heat, &view).unwrap(), n as f64);
        // a slab between camera and heated voxel hides it completely
        let mut walled: Vec<VoxelIndex> = (0..r)
            .flat_map(|x| (0..r).map(move |y| [x, y, 6]))
            .collect();
        walled.push([3, 3, 2]);
        let occ = Occupancy::new(r, walled).unwrap();
        let heat =
            AffordanceHeatmap::new(r, HeatKind::Probability, vec![[3, 3, 2]], vec![1.0]).unwrap();
        let top = Viewpoint::new(
            intr(48),
            look_at_world_up(&Vec3::new(0.0, 0.0, 2.0), &Vec3::zeros()).unwrap(),
        );
        assert_eq!(visibility_score(&occ, &heat, &top).unwrap(), 0.0);
        let bad =
            AffordanceHeatmap::new(r, HeatKind::Probability, vec![[0, 0, 0]], vec![1.0]).unwrap();
        assert!(visibility_score(&occ, &bad, &top).is_err());
    }

    #[test]
    fn selection_tie_breaks_and_exhaustion() {
        let occ = Occupancy::new(8, vec![[3, 3, 3]]).unwrap();
        let zero = AffordanceHeatmap::zeros(&occ);
        let cands = hemisphere_candidates(6, 2.0, &Vec3::zeros(), &intr(24)).unwrap();
        let (i, _) = select_next_view(&occ, &zero, &cands, &BTreeSet::new()).unwrap();
        assert_eq!(i, 0);
        let visited: BTreeSet<usize> = [0, 1].into();
        assert_eq!(
            select_next_view(&occ, &zero, &cands, &visited).unwrap().0,
            2
        );
        assert_eq!(
            select_next_view(&occ, &zero, &cands[3..4], &BTreeSet::new())
                .unwrap()
                .0,
            0
        );
        let all: BTreeSet<usize> = (0..6).collect();
        assert!(matches!(
            select_next_view(&occ, &zero, &cands, &all),
            Err(PipelineError::CandidatesExhausted)
        ));
    }

    #[test]
    fn heated_face_pulls_selection_to_its_side() {
        // thin wall in the x = const plane, heated voxel on its -x face
        let r = 8;
        let mut cells: Vec<VoxelIndex> = Vec::new();
        for y in 1..7 {
            for z in 1..7 {
                cells.push([3, y, z]);
                cells.push([4, y, z]);
            }
        }
        let occ = Occupancy::new(r, cells).unwrap();
        let heat_cells: Vec<VoxelIndex> = (2..6)
            .flat_map(|y| (2..6).map(move |z| [3, y, z]))
            .collect();
        let heat = AffordanceHeatmap::new(
            r,
            HeatKind::Probability,
            heat_cells.clone(),
            vec![1.0; heat_cells.len()],
        )
        .unwrap();
        let cands = hemisphere_candidates(40, 2.0, &Vec3::zeros(), &intr(32)).unwrap();
        let (i, scores) = select_next_view(&occ, &heat, &cands, &BTreeSet::new()).unwrap();
        assert!(cands[i].pose.origin().x < 0.0);
        // matches an exhaustive rescoring
        let exhaustive: Vec<f64> = cands
            .iter()
            .map(|c| visibility_score(&occ, &heat, c).unwrap())
            .collect();
        let best = exhaustive.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(exhaustive.iter().position(|&s| s == best).unwrap(), i);
        assert_eq!(
            scores.iter().map(|s| s.unwrap()).collect::<Vec<_>>(),
            exhaustive
        );
    }

    #[test]
    fn worst_view_hides_the_affordance() {
        let obj = generate_object(0);
        let table = QueryTable::default();
        let cands = hemisphere_candidates(40, 2.0, &Vec3::zeros(), &intr(32)).unwrap();
        let i = worst_initial_view(&obj, "grasp the handle", &table, &cands, 8).unwrap();
        let occ = occupancy_set(&obj, 8).unwrap();
        let heat = ground_truth_affordance(&obj, "grasp the handle", &table, 8).unwrap();
        let scores: Vec<f64> = cands
            .iter()
            .map(|c| visibility_score(&occ, &heat, c).unwrap())
            .collect();
        let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(scores.iter().position(|&s| s == min).unwrap(), i);
        // the mug handle points along +out; the worst view looks from the body side
        let handle_dir =
            obj.parts[1].transform.pose.translation() - obj.parts[0].transform.pose.translation();
        let o = cands[i].pose.origin();
        assert!(Vec3::new(o.x, o.y, 0.0).dot(&handle_dir) <= 0.0);
        assert_eq!(
            worst_initial_view(&obj, "grasp the handle", &table, &cands[5..6], 8).unwrap(),
            0
        );
        assert!(worst_initial_view(&obj, "sit on the seat", &table, &cands, 8).is_err());
    }

    fn oracle_loop(strategy: Strategy, budget: usize, seed: u64) -> ViewTrace {
        let obj = generate_object(1);
        let table = QueryTable::default();
        let cfg = LoopConfig {
            image_size: 24,
            candidates: 12,
            ..LoopConfig::default()
        };
        let occ = occupancy_set(&obj, 8).unwrap();
        let cands = cfg.candidate_views().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        active_loop(
            &obj,
            "grasp the handle",
            &table,
            &cands[3],
            budget,
            strategy,
            &OracleVelocity::from_occupancy(&occ),
            &ConstantAffordance(0.0),
            &cfg,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn loop_budget_and_strategies() {
        let t = oracle_loop(Strategy::Active, 1, 0);
        assert_eq!(t.iterations.len(), 1);
        assert!(t.iterations[0].selection.is_none());
        assert_eq!(t.iterations[0].iou, 1.0);
        let a = oracle_loop(Strategy::Sequential, 3, 1);
        let b = oracle_loop(Strategy::Sequential, 3, 2);
        let poses = |t: &ViewTrace| {
            t.iterations
                .iter()
                .map(|i| i.view.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(poses(&a), poses(&b));
        let act = oracle_loop(Strategy::Active, 4, 3);
        let picked: Vec<usize> = act.iterations[1..]
            .iter()
            .map(|i| i.selection.as_ref().unwrap().index)
            .collect();
        let mut uniq = picked.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), picked.len());
        assert!(!picked.contains(&3));
        for w in act.iterations.windows(2) {
            let sel = w[1].selection.as_ref().unwrap();
            let scores = sel.scores.as_ref().unwrap();
            assert_eq!(argmax_lowest(scores), Some(sel.index));
        }
        let rnd = oracle_loop(Strategy::Random, 3, 4);
        assert_eq!(rnd.iterations.len(), 3);
    }
}

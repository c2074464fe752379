//! Procedural desk-scale objects with labelled functional parts.
//!
//! Every object is a union of analytic primitives inside the normalized cube
//! `[-0.5, 0.5]³`. Parts carry affordance tags; a [`QueryTable`] maps natural
//! language queries to tags and to deterministic hash-derived text embeddings.
//! [`SurfaceFeatures`] plays the role of a per-pixel image feature extractor.
//!
//! # Templates
//!
//! The template is `seed % 4`. Parameters are drawn in the listed order from
//! `ChaCha8Rng::seed_from_u64(seed)`, each as `lo + u * (hi - lo)` with
//! `u = rng.random::<f64>()`:
//!
//! | template | parameters (in draw order) |
//! |----------|----------------------------|
//! | mug    | body radius [0.17, 0.23], body half height [0.20, 0.28], handle major radius [0.13, 0.16], handle minor radius [0.09, 0.11], yaw [0, 2π) |
//! | hammer | handle radius [0.10, 0.13], handle half length [0.26, 0.32], head half extents along/across/up [0.07, 0.09] / [0.15, 0.20] / [0.08, 0.10], yaw [0, 2π) |
//! | chair  | seat half extents x/y/z [0.20, 0.26] / [0.20, 0.26] / [0.07, 0.09], seat centre z [-0.02, 0.04], leg half width [0.065, 0.08], back thickness [0.065, 0.08], back top z [0.38, 0.45], yaw [0, 2π) |
//! | lamp   | base radius [0.18, 0.25], base half height [0.06, 0.08], stem radius [0.07, 0.09], stem top z [0.10, 0.20], stem offset x/y [-0.05, 0.05] each, shade radius [0.16, 0.21] |

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{Pose, Vec3};
use crate::heatmap::{AffordanceHeatmap, HeatKind};
use crate::voxel::{index_from_linear, voxel_center, DenseGrid, Occupancy};

/// Seed of the hash family behind text and part-label embeddings.
pub const EMBEDDING_SEED: u64 = 0x5eed_a11d;
/// Default text-embedding width.
pub const QUERY_DIM: usize = 16;

pub const TAG_GRASP: &str = "grasp";
pub const TAG_STRIKE: &str = "strike";
pub const TAG_SIT: &str = "sit";
pub const TAG_ATTACH_LIGHT: &str = "attach_light";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("unknown query {0:?}")]
    UnknownQuery(String),
    #[error("invalid object: {0}")]
    InvalidObject(String),
    #[error("resolution {0} too small (need >= 4)")]
    Resolution(usize),
    #[error("feature width {0} too small (need >= 4)")]
    Channels(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Mug,
    Hammer,
    Chair,
    Lamp,
}

impl Template {
    pub const ALL: [Template; 4] = [
        Template::Mug,
        Template::Hammer,
        Template::Chair,
        Template::Lamp,
    ];

    pub fn from_seed(seed: u64) -> Self {
        Self::ALL[(seed % 4) as usize]
    }
}

/// Analytic primitive in its local frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "primitive", content = "params", rename_all = "snake_case")]
pub enum Primitive {
    Box {
        half_extents: [f64; 3],
    },
    Sphere {
        radius: f64,
    },
    /// Axis along local `z`.
    Cylinder {
        radius: f64,
        half_height: f64,
    },
    /// Tube of radius `minor` around an arc of radius `major` in the local
    /// `xy` plane, spanning azimuth `[-half_angle, half_angle]` about `+x`,
    /// with rounded ends.
    TorusSegment {
        major: f64,
        minor: f64,
        half_angle: f64,
    },
}

impl Primitive {
    pub fn contains(&self, q: &Vec3) -> bool {
        match *self {
            Primitive::Box { half_extents: h } => {
                q.x.abs() <= h[0] && q.y.abs() <= h[1] && q.z.abs() <= h[2]
            }
            Primitive::Sphere { radius } => q.norm_squared() <= radius * radius,
            Primitive::Cylinder {
                radius,
                half_height,
            } => q.x * q.x + q.y * q.y <= radius * radius && q.z.abs() <= half_height,
            Primitive::TorusSegment { .. } => self.sdf(q) <= 0.0,
        }
    }

    /// Signed distance in the local frame.
    pub fn sdf(&self, q: &Vec3) -> f64 {
        match *self {
            Primitive::Box { half_extents: h } => {
                let d = Vec3::new(q.x.abs() - h[0], q.y.abs() - h[1], q.z.abs() - h[2]);
                let outside = Vec3::new(d.x.max(0.0), d.y.max(0.0), d.z.max(0.0)).norm();
                outside + d.x.max(d.y).max(d.z).min(0.0)
            }
            Primitive::Sphere { radius } => q.norm() - radius,
            Primitive::Cylinder {
                radius,
                half_height,
            } => {
                let dr = (q.x * q.x + q.y * q.y).sqrt() - radius;
                let dz = q.z.abs() - half_height;
                dr.max(dz).min(0.0) + (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt()
            }
            Primitive::TorusSegment {
                major,
                minor,
                half_angle,
            } => {
                let phi = q.y.atan2(q.x);
                if phi.abs() <= half_angle {
                    let radial = (q.x * q.x + q.y * q.y).sqrt() - major;
                    (radial * radial + q.z * q.z).sqrt() - minor
                } else {
                    let end = |a: f64| Vec3::new(major * a.cos(), major * a.sin(), 0.0);
                    let d = (q - end(half_angle))
                        .norm()
                        .min((q - end(-half_angle)).norm());
                    d - minor
                }
            }
        }
    }
}

/// Part placement: world point `p` maps to local `Rᵀ(p - t) ⊘ scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartTransform {
    #[serde(with = "pose_row_major")]
    pub pose: Pose,
    pub scale: [f64; 3],
}

impl PartTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        Self {
            pose: Pose::new(rotation, translation).expect("template rotations are orthonormal"),
            scale: [1.0; 3],
        }
    }

    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        let q = self.pose.rotation().transpose() * (p - self.pose.translation());
        Vec3::new(
            q.x / self.scale[0],
            q.y / self.scale[1],
            q.z / self.scale[2],
        )
    }

    fn min_scale(&self) -> f64 {
        self.scale[0].min(self.scale[1]).min(self.scale[2])
    }
}

mod pose_row_major {
    use super::Pose;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(pose: &Pose, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(pose.to_row_major())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Pose, D::Error> {
        let values = Vec::<f64>::deserialize(d)?;
        Pose::from_row_major(&values).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Part {
    #[serde(flatten)]
    pub primitive: Primitive,
    pub transform: PartTransform,
    pub part_label: String,
    pub affordance_tags: Vec<String>,
}

impl Part {
    pub fn contains(&self, p: &Vec3) -> bool {
        self.primitive.contains(&self.transform.to_local(p))
    }

    /// Approximate world-space signed distance (exact for unit scale).
    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.primitive.sdf(&self.transform.to_local(p)) * self.transform.min_scale()
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.affordance_tags.iter().any(|t| t == tag)
    }
}

/// A `.scene.json` object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticObject {
    pub object_id: String,
    pub seed: u64,
    pub template: Template,
    pub parts: Vec<Part>,
}

impl SyntheticObject {
    pub fn validate(&self, table: &QueryTable) -> Result<(), SceneError> {
        if self.parts.is_empty() {
            return Err(SceneError::InvalidObject("object has no parts".into()));
        }
        for part in &self.parts {
            if let Some(tag) = part
                .affordance_tags
                .iter()
                .find(|t| table.query_for_tag(t).is_none())
            {
                return Err(SceneError::InvalidObject(format!(
                    "tag {tag:?} missing from the query table"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.parts.iter().any(|part| part.contains(p))
    }

    /// Distinct tags in part order.
    pub fn tags(&self) -> Vec<&str> {
        let mut tags: Vec<&str> = Vec::new();
        for t in self.parts.iter().flat_map(|p| p.affordance_tags.iter()) {
            if !tags.contains(&t.as_str()) {
                tags.push(t);
            }
        }
        tags
    }

    /// Index of the part nearest to `p` (smallest signed distance, lowest
    /// index on ties).
    pub fn nearest_part(&self, p: &Vec3) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, part) in self.parts.iter().enumerate() {
            let d = part.sdf(p);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + rng.random::<f64>() * (hi - lo)
}

/// Rotation whose third column is `axis` (unit), first column horizontal
/// when possible.
fn frame_with_z_axis(axis: &Vec3) -> Matrix3<f64> {
    let helper = if axis.z.abs() < 0.9 {
        Vec3::z()
    } else {
        Vec3::x()
    };
    let x = helper.cross(axis).normalize();
    let y = axis.cross(&x);
    Matrix3::from_columns(&[x, y, *axis])
}

fn yaw(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn part(primitive: Primitive, transform: PartTransform, label: &str, tags: &[&str]) -> Part {
    Part {
        primitive,
        transform,
        part_label: label.to_string(),
        affordance_tags: tags.iter().map(|t| t.to_string()).collect(),
    }
}

/// Deterministic object for `seed`; see the module docs for the templates.
pub fn generate_object(seed: u64) -> SyntheticObject {
    let template = Template::from_seed(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let parts = match template {
        Template::Mug => {
            let body_r = uniform(rng, 0.17, 0.23);
            let body_h = uniform(rng, 0.20, 0.28);
            let major = uniform(rng, 0.13, 0.16);
            let minor = uniform(rng, 0.09, 0.11);
            let psi = uniform(rng, 0.0, std::f64::consts::TAU);
            let out = Vec3::new(psi.cos(), psi.sin(), 0.0);
            let shift = -0.5 * (major + minor);
            let body_c = out * shift;
            let handle_rot = Matrix3::from_columns(&[out, Vec3::z(), out.cross(&Vec3::z())]);
            vec![
                part(
                    Primitive::Cylinder {
                        radius: body_r,
                        half_height: body_h,
                    },
                    PartTransform::new(Matrix3::identity(), body_c),
                    "body",
                    &[],
                ),
                part(
                    Primitive::TorusSegment {
                        major,
                        minor,
                        half_angle: std::f64::consts::FRAC_PI_2,
                    },
                    PartTransform::new(handle_rot, body_c + out * body_r),
                    "handle",
                    &[TAG_GRASP],
                ),
            ]
        }
        Template::Hammer => {
            let handle_r = uniform(rng, 0.10, 0.13);
            let half_len = uniform(rng, 0.26, 0.32);
            let hx = uniform(rng, 0.07, 0.09);
            let hy = uniform(rng, 0.15, 0.20);
            let hz = uniform(rng, 0.08, 0.10);
            let psi = uniform(rng, 0.0, std::f64::consts::TAU);
            let axis = Vec3::new(psi.cos(), psi.sin(), 0.0);
            let shift = -0.5 * hx;
            let head_rot = Matrix3::from_columns(&[axis, Vec3::z().cross(&axis), Vec3::z()]);
            vec![
                part(
                    Primitive::Cylinder {
                        radius: handle_r,
                        half_height: half_len,
                    },
                    PartTransform::new(frame_with_z_axis(&axis), axis * shift),
                    "handle",
                    &[TAG_GRASP],
                ),
                part(
                    Primitive::Box {
                        half_extents: [hx, hy, hz],
                    },
                    PartTransform::new(head_rot, axis * (half_len + shift)),
                    "head",
                    &[TAG_STRIKE],
                ),
            ]
        }
        Template::Chair => {
            let sx = uniform(rng, 0.20, 0.26);
            let sy = uniform(rng, 0.20, 0.26);
            let sz = uniform(rng, 0.07, 0.09);
            let seat_z = uniform(rng, -0.02, 0.04);
            let lw = uniform(rng, 0.065, 0.08);
            let bt = uniform(rng, 0.065, 0.08);
            let top = uniform(rng, 0.38, 0.45);
            let psi = uniform(rng, 0.0, std::f64::consts::TAU);
            let rot = yaw(psi);
            let place = |local: Vec3| PartTransform::new(rot, rot * local);
            let floor = -0.45;
            let seat_bottom = seat_z - sz;
            let leg_h = 0.5 * (seat_bottom - floor);
            let mut parts = vec![part(
                Primitive::Box {
                    half_extents: [sx, sy, sz],
                },
                place(Vec3::new(0.0, 0.0, seat_z)),
                "seat",
                &[TAG_SIT],
            )];
            for (dx, dy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                parts.push(part(
                    Primitive::Box {
                        half_extents: [lw, lw, leg_h],
                    },
                    place(Vec3::new(dx * (sx - lw), dy * (sy - lw), floor + leg_h)),
                    "leg",
                    &[],
                ));
            }
            let back_h = 0.5 * (top - (seat_z + sz));
            parts.push(part(
                Primitive::Box {
                    half_extents: [bt, sy, back_h],
                },
                place(Vec3::new(-(sx - bt), 0.0, seat_z + sz + back_h)),
                "back",
                &[],
            ));
            parts
        }
        Template::Lamp => {
            let base_r = uniform(rng, 0.18, 0.25);
            let base_h = uniform(rng, 0.06, 0.08);
            let stem_r = uniform(rng, 0.07, 0.09);
            let stem_top = uniform(rng, 0.10, 0.20);
            let ox = uniform(rng, -0.05, 0.05);
            let oy = uniform(rng, -0.05, 0.05);
            let shade_r = uniform(rng, 0.16, 0.21);
            let base_z = -0.42 + base_h;
            let stem_bottom = base_z + base_h;
            let stem_half = 0.5 * (stem_top - stem_bottom);
            let shade_z = (stem_top + 0.1).min(0.45 - shade_r);
            vec![
                part(
                    Primitive::Cylinder {
                        radius: base_r,
                        half_height: base_h,
                    },
                    PartTransform::new(Matrix3::identity(), Vec3::new(0.0, 0.0, base_z)),
                    "base",
                    &[],
                ),
                part(
                    Primitive::Cylinder {
                        radius: stem_r,
                        half_height: stem_half,
                    },
                    PartTransform::new(
                        Matrix3::identity(),
                        Vec3::new(ox, oy, stem_bottom + stem_half),
                    ),
                    "stem",
                    &[],
                ),
                part(
                    Primitive::Sphere { radius: shade_r },
                    PartTransform::new(Matrix3::identity(), Vec3::new(ox, oy, shade_z)),
                    "shade",
                    &[TAG_ATTACH_LIGHT],
                ),
            ]
        }
    };
    SyntheticObject {
        object_id: format!("{template:?}-{seed:016x}").to_lowercase(),
        seed,
        template,
        parts,
    }
}

/// Voxel-centre inside test against every part: `+1` inside, `-1` outside.
pub fn ground_truth_occupancy(obj: &SyntheticObject, r: usize) -> Result<DenseGrid, SceneError> {
    Ok(occupancy_set(obj, r)?.to_dense())
}

pub fn occupancy_set(obj: &SyntheticObject, r: usize) -> Result<Occupancy, SceneError> {
    if r < 4 {
        return Err(SceneError::Resolution(r));
    }
    let indices = (0..r * r * r)
        .map(|i| index_from_linear(i, r))
        .filter(|idx| obj.contains(&voxel_center(idx, r)))
        .collect();
    Ok(Occupancy::new(r, indices).expect("indices in range"))
}

/// Binary heatmap over the occupied voxels: 1 inside parts tagged with the
/// query's tag, 0 elsewhere.
pub fn ground_truth_affordance(
    obj: &SyntheticObject,
    query: &str,
    table: &QueryTable,
    r: usize,
) -> Result<AffordanceHeatmap, SceneError> {
    let tag = &table.lookup(query)?.tag;
    let occ = occupancy_set(obj, r)?;
    let tagged: Vec<&Part> = obj.parts.iter().filter(|p| p.has_tag(tag)).collect();
    let values = occ
        .indices()
        .iter()
        .map(|idx| {
            let c = voxel_center(idx, r);
            if tagged.iter().any(|p| p.contains(&c)) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(
        AffordanceHeatmap::new(r, HeatKind::Probability, occ.indices().to_vec(), values)
            .expect("binary values"),
    )
}

/// Unit vector of width `dim` derived from `(domain, seed, text)` by SHA-256
/// seeding a ChaCha stream of standard normals.
pub fn hashed_unit_vector(domain: &str, seed: u64, text: &str, dim: usize) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(domain.as_bytes());
    hasher.update([0u8]);
    hasher.update(seed.to_le_bytes());
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Deterministic stand-in text encoder.
pub fn query_embedding(query: &str, seed: u64, dim: usize) -> Vec<f64> {
    hashed_unit_vector("query", seed, query, dim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub tag: String,
    pub embedding: Vec<f64>,
}

/// `.queries.json`: query string → (tag, embedding).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTable {
    pub seed: u64,
    pub dim: usize,
    pub entries: BTreeMap<String, QueryEntry>,
}

impl QueryTable {
    pub fn new(seed: u64, dim: usize, queries: &[(&str, &str)]) -> Self {
        let entries = queries
            .iter()
            .map(|(q, tag)| {
                (
                    q.to_string(),
                    QueryEntry {
                        tag: tag.to_string(),
                        embedding: query_embedding(q, seed, dim),
                    },
                )
            })
            .collect();
        Self { seed, dim, entries }
    }

    pub fn lookup(&self, query: &str) -> Result<&QueryEntry, SceneError> {
        self.entries
            .get(query)
            .ok_or_else(|| SceneError::UnknownQuery(query.to_string()))
    }

    /// First query (in sorted order) mapped to `tag`.
    pub fn query_for_tag(&self, tag: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, e)| e.tag == tag)
            .map(|(q, _)| q.as_str())
    }

    /// Queries for every tag of `obj`, in the object's tag order.
    pub fn queries_for(&self, obj: &SyntheticObject) -> Vec<&str> {
        obj.tags()
            .into_iter()
            .filter_map(|t| self.query_for_tag(t))
            .collect()
    }
}

impl Default for QueryTable {
    fn default() -> Self {
        Self::new(
            EMBEDDING_SEED,
            QUERY_DIM,
            &[
                ("grasp the handle", TAG_GRASP),
                ("strike with the head", TAG_STRIKE),
                ("sit on the seat", TAG_SIT),
                ("attach a light fixture", TAG_ATTACH_LIGHT),
            ],
        )
    }
}

/// Per-pixel feature extractor stand-in: `[part-label embedding, normal]`.
#[derive(Debug, Clone)]
pub struct SurfaceFeatures<'a> {
    object: &'a SyntheticObject,
    channels: usize,
    label_embeddings: Vec<Vec<f64>>,
}

impl<'a> SurfaceFeatures<'a> {
    pub fn new(object: &'a SyntheticObject, channels: usize) -> Result<Self, SceneError> {
        if channels < 4 {
            return Err(SceneError::Channels(channels));
        }
        let label_embeddings = object
            .parts
            .iter()
            .map(|p| hashed_unit_vector("part", EMBEDDING_SEED, &p.part_label, channels - 3))
            .collect();
        Ok(Self {
            object,
            channels,
            label_embeddings,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn feature(&self, hit_point: &Vec3, normal: &Vector3<f64>) -> Vec<f64> {
        let part = self.object.nearest_part(hit_point);
        let mut f = Vec::with_capacity(self.channels);
        f.extend_from_slice(&self.label_embeddings[part]);
        f.extend_from_slice(&[normal.x, normal.y, normal.z]);
        f
    }
}

pub fn surface_feature(
    obj: &SyntheticObject,
    hit_point: &Vec3,
    normal: &Vec3,
    channels: usize,
) -> Result<Vec<f64>, SceneError> {
    Ok(SurfaceFeatures::new(obj, channels)?.feature(hit_point, normal))
}

/// Object seeds of a dataset: `base * 10_000 + i`, so templates cycle in order.
pub fn dataset_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base * 10_000 + i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::linear_index;

    #[test]
    fn generation_is_deterministic() {
        for seed in 0..8 {
            assert_eq!(generate_object(seed), generate_object(seed));
        }
    }

    #[test]
    fn every_object_has_a_tagged_part_and_valid_tags() {
        let table = QueryTable::default();
        for seed in 0..100 {
            let obj = generate_object(seed);
            assert!(
                obj.parts.iter().any(|p| !p.affordance_tags.is_empty()),
                "seed {seed}"
            );
            obj.validate(&table).unwrap();
        }
    }

    #[test]
    fn objects_stay_inside_cube_and_voxelize_every_tagged_part() {
        let table = QueryTable::default();
        for seed in 0..100 {
            let obj = generate_object(seed);
            let occ = occupancy_set(&obj, 8).unwrap();
            assert!(occ.len() >= 12, "seed {seed} has {} voxels", occ.len());
            // parts must not poke outside the cube: sample the 1/64-lattice boundary shell
            let n = 64;
            for i in 0..n {
                for j in 0..n {
                    let a = -0.5 + (i as f64 + 0.5) / n as f64;
                    let b = -0.5 + (j as f64 + 0.5) / n as f64;
                    for p in [
                        Vec3::new(0.5, a, b),
                        Vec3::new(-0.5, a, b),
                        Vec3::new(a, 0.5, b),
                        Vec3::new(a, -0.5, b),
                        Vec3::new(a, b, 0.5),
                        Vec3::new(a, b, -0.5),
                    ] {
                        assert!(
                            !obj.contains(&p),
                            "seed {seed} touches the cube boundary at {p:?}"
                        );
                    }
                }
            }
            for q in table.queries_for(&obj) {
                let heat = ground_truth_affordance(&obj, q, &table, 8).unwrap();
                let tagged = heat.values.iter().filter(|&&v| v == 1.0).count();
                assert!(
                    tagged >= 3,
                    "seed {seed} query {q:?} has only {tagged} voxels"
                );
            }
        }
    }

    #[test]
    fn template_parameters_match_documented_draws() {
        // seed 5 → hammer (5 % 4 == 1)
        let obj = generate_object(5);
        assert_eq!(obj.template, Template::Hammer);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut draw = |lo: f64, hi: f64| lo + rng.random::<f64>() * (hi - lo);
        let handle_r = draw(0.10, 0.13);
        let half_len = draw(0.26, 0.32);
        let hx = draw(0.07, 0.09);
        let hy = draw(0.15, 0.20);
        let hz = draw(0.08, 0.10);
        let psi = draw(0.0, std::f64::consts::TAU);
        assert_eq!(
            obj.parts[0].primitive,
            Primitive::Cylinder {
                radius: handle_r,
                half_height: half_len
            }
        );
        assert_eq!(
            obj.parts[1].primitive,
            Primitive::Box {
                half_extents: [hx, hy, hz]
            }
        );
        let axis = Vec3::new(psi.cos(), psi.sin(), 0.0);
        let head_centre = axis * (half_len - 0.5 * hx);
        assert!((obj.parts[1].transform.pose.translation() - head_centre).norm() < 1e-15);
        assert_eq!(obj.parts[0].affordance_tags, vec!["grasp".to_string()]);
        assert_eq!(obj.parts[1].affordance_tags, vec!["strike".to_string()]);
    }

    #[test]
    fn sphere_occupancy_matches_analytic_test() {
        let obj = SyntheticObject {
            object_id: "sphere".into(),
            seed: 0,
            template: Template::Lamp,
            parts: vec![part(
                Primitive::Sphere { radius: 0.3 },
                PartTransform::new(Matrix3::identity(), Vec3::zeros()),
                "ball",
                &[],
            )],
        };
        let dense = ground_truth_occupancy(&obj, 8).unwrap();
        for i in 0..512 {
            let idx = index_from_linear(i, 8);
            let c = voxel_center(&idx, 8);
            let expected = if c.norm() <= 0.3 { 1.0 } else { -1.0 };
            assert_eq!(dense.values()[linear_index(&idx, 8)], expected);
        }
        // mirror symmetry x → -x
        for i in 0..512 {
            let [x, y, z] = index_from_linear(i, 8);
            assert_eq!(dense.get(&[x, y, z], 0), dense.get(&[7 - x, y, z], 0));
        }
        assert!(matches!(
            ground_truth_occupancy(&obj, 3),
            Err(SceneError::Resolution(3))
        ));
    }

    #[test]
    fn hammer_grasp_is_exactly_the_handle() {
        let table = QueryTable::default();
        let obj = generate_object(1);
        assert_eq!(obj.template, Template::Hammer);
        let heat = ground_truth_affordance(&obj, "grasp the handle", &table, 8).unwrap();
        let occ = occupancy_set(&obj, 8).unwrap();
        assert_eq!(heat.positions, occ.indices());
        for (idx, v) in heat.positions.iter().zip(&heat.values) {
            let inside_handle = obj.parts[0].contains(&voxel_center(idx, 8));
            assert_eq!(*v == 1.0, inside_handle);
        }
        let none = ground_truth_affordance(&obj, "sit on the seat", &table, 8).unwrap();
        assert!(none.values.iter().all(|&v| v == 0.0));
        assert!(matches!(
            ground_truth_affordance(&obj, "juggle", &table, 8),
            Err(SceneError::UnknownQuery(_))
        ));
    }

    #[test]
    fn query_embeddings_are_unit_deterministic_and_distinct() {
        let a = query_embedding("grasp the handle", EMBEDDING_SEED, 16);
        assert_eq!(a, query_embedding("grasp the handle", EMBEDDING_SEED, 16));
        assert!((a.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        let table = QueryTable::default();
        let embs: Vec<&Vec<f64>> = table.entries.values().map(|e| &e.embedding).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let cos: f64 = embs[i].iter().zip(embs[j]).map(|(x, y)| x * y).sum();
                assert!(cos < 0.9, "cosine {cos}");
            }
        }
    }

    #[test]
    fn surface_features_identify_parts() {
        let obj = generate_object(1);
        let feats = SurfaceFeatures::new(&obj, 16).unwrap();
        let n = Vec3::new(0.0, 0.0, 1.0);
        let handle_point = obj.parts[0].transform.pose.translation() + Vec3::new(0.0, 0.0, 0.1);
        let a = feats.feature(&handle_point, &n);
        assert_eq!(a, feats.feature(&handle_point, &n));
        assert_eq!(a.len(), 16);
        assert_eq!(&a[13..], &[0.0, 0.0, 1.0]);
        // beyond the handle's end cap and off to the side, inside the head
        let head_rot = obj.parts[1].transform.pose.rotation();
        let head_point = obj.parts[1].transform.pose.translation()
            + head_rot.column(0) * 0.03
            + head_rot.column(1) * 0.14;
        assert_eq!(obj.nearest_part(&head_point), 1);
        let b = feats.feature(&head_point, &n);
        assert_ne!(a[..13], b[..13]);
        assert_eq!(surface_feature(&obj, &head_point, &n, 16).unwrap(), b);
        assert!(SurfaceFeatures::new(&obj, 3).is_err());
    }

    #[test]
    fn scene_json_round_trip() {
        let obj = generate_object(3);
        let json = serde_json::to_string(&obj).unwrap();
        let back: SyntheticObject = serde_json::from_str(&json).unwrap();
        assert_eq!(obj, back);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v["parts"][0]["primitive"].is_string());
        assert!(v["parts"][0]["params"].is_object());
        assert_eq!(
            v["parts"][0]["transform"]["pose"].as_array().unwrap().len(),
            16
        );
    }

    #[test]
    fn dataset_seeds_cycle_templates() {
        let seeds = dataset_seeds(7, 8);
        let templates: Vec<Template> = seeds.iter().map(|&s| Template::from_seed(s)).collect();
        assert_eq!(&templates[..4], &Template::ALL);
        assert_eq!(&templates[4..], &Template::ALL);
    }
}

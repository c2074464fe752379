//! Voxel ray casting: simulated RGBD capture and affordance images.
//!
//! Rays are traversed through the `r³` lattice with an exact grid walk
//! (Amanatides & Woo), visiting every cell the ray crosses in order. Depth is
//! the camera-frame `z` of the entry face of the first occupied voxel.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Vec3, Viewpoint};
use crate::heatmap::AffordanceHeatmap;
use crate::synthscene::{occupancy_set, SceneError, SurfaceFeatures, SyntheticObject};
use crate::voxel::{linear_index, Occupancy, VoxelIndex, CUBE_HALF};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("camera at {0:?} is inside the object cube")]
    CameraInsideCube([f64; 3]),
    #[error("heatmap support is not contained in the occupied set")]
    SupportViolation,
    #[error("resolution mismatch: {0} vs {1}")]
    Resolution(usize, usize),
    #[error("image shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    /// Row-major, `0` where the ray hits nothing.
    pub values: Vec<f64>,
}

impl DepthImage {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width as usize * height as usize],
        }
    }

    pub fn get(&self, i: u32, j: u32) -> f64 {
        self.values[(j * self.width + i) as usize]
    }

    pub fn set(&mut self, i: u32, j: u32, d: f64) {
        self.values[(j * self.width + i) as usize] = d;
    }

    pub fn hit_count(&self) -> usize {
        self.values.iter().filter(|&&d| d > 0.0).count()
    }

    /// ASCII PGM preview: near is bright, misses are black.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let hits = self.values.iter().copied().filter(|&d| d > 0.0);
        let (lo, hi) = hits.fold((f64::INFINITY, 0.0f64), |(lo, hi), d| {
            (lo.min(d), hi.max(d))
        });
        writeln!(out, "P2\n{} {}\n255", self.width, self.height)?;
        for row in self.values.chunks(self.width as usize) {
            let line: Vec<String> = row
                .iter()
                .map(|&d| {
                    if d <= 0.0 {
                        0
                    } else if hi > lo {
                        (255.0 - 200.0 * (d - lo) / (hi - lo)).round() as u8
                    } else {
                        255
                    }
                })
                .map(|v| v.to_string())
                .collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImage {
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl FeatureImage {
    pub fn zeros(width: u32, height: u32, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            values: vec![0.0; width as usize * height as usize * channels],
        }
    }

    /// Feature of the pixel with row-major offset `pixel`.
    pub fn pixel(&self, pixel: usize) -> &[f64] {
        &self.values[pixel * self.channels..(pixel + 1) * self.channels]
    }

    pub fn get(&self, i: u32, j: u32) -> &[f64] {
        self.pixel((j * self.width + i) as usize)
    }

    pub fn set_pixel(&mut self, i: u32, j: u32, f: &[f64]) {
        let p = (j * self.width + i) as usize;
        self.values[p * self.channels..(p + 1) * self.channels].copy_from_slice(f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarImage {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl ScalarImage {
    pub fn get(&self, i: u32, j: u32) -> f64 {
        self.values[(j * self.width + i) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// `.img.json` container shared by every image kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFile {
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl From<&DepthImage> for ImageFile {
    fn from(d: &DepthImage) -> Self {
        Self {
            width: d.width,
            height: d.height,
            channels: 1,
            values: d.values.clone(),
        }
    }
}

impl From<&ScalarImage> for ImageFile {
    fn from(d: &ScalarImage) -> Self {
        Self {
            width: d.width,
            height: d.height,
            channels: 1,
            values: d.values.clone(),
        }
    }
}

impl From<&FeatureImage> for ImageFile {
    fn from(f: &FeatureImage) -> Self {
        Self {
            width: f.width,
            height: f.height,
            channels: f.channels,
            values: f.values.clone(),
        }
    }
}

impl TryFrom<ImageFile> for DepthImage {
    type Error = RenderError;

    fn try_from(f: ImageFile) -> Result<Self, RenderError> {
        if f.channels != 1 || f.values.len() != f.width as usize * f.height as usize {
            return Err(RenderError::Shape(
                "depth image needs one channel and width*height values".into(),
            ));
        }
        if !f.values.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(RenderError::Shape(
                "depth values must be finite and >= 0".into(),
            ));
        }
        Ok(Self {
            width: f.width,
            height: f.height,
            values: f.values,
        })
    }
}

impl TryFrom<ImageFile> for FeatureImage {
    type Error = RenderError;

    fn try_from(f: ImageFile) -> Result<Self, RenderError> {
        if f.values.len() != f.width as usize * f.height as usize * f.channels {
            return Err(RenderError::Shape(
                "feature image has the wrong number of values".into(),
            ));
        }
        Ok(Self {
            width: f.width,
            height: f.height,
            channels: f.channels,
            values: f.values,
        })
    }
}

/// First occupied voxel along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub voxel: VoxelIndex,
    /// Ray parameter of the entry face.
    pub t: f64,
    /// Outward normal of the entry face.
    pub normal: Vec3,
}

fn plane(i: i64, r: usize) -> f64 {
    i as f64 / r as f64 - CUBE_HALF
}

/// Walk the lattice from `origin` along `dir` and report the first voxel for
/// which `occupied` returns true. `origin` must lie outside the cube.
pub fn first_hit(
    origin: &Vec3,
    dir: &Vec3,
    r: usize,
    occupied: impl Fn(&VoxelIndex) -> bool,
) -> Option<Hit> {
    // slab test against the cube
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut entry_axis = 0;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < -CUBE_HALF || origin[a] > CUBE_HALF {
                return None;
            }
            continue;
        }
        let t0 = (-CUBE_HALF - origin[a]) / dir[a];
        let t1 = (CUBE_HALF - origin[a]) / dir[a];
        let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        if lo > t_near {
            t_near = lo;
            entry_axis = a;
        }
        t_far = t_far.min(hi);
    }
    if t_near > t_far || t_far <= 0.0 {
        return None;
    }
    let t_start = t_near.max(0.0);
    let p = origin + dir * t_start;
    let mut idx = [0i64; 3];
    let mut step = [0i64; 3];
    for a in 0..3 {
        let g = ((p[a] + CUBE_HALF) * r as f64).floor() as i64;
        idx[a] = g.clamp(0, r as i64 - 1);
        step[a] = if dir[a] > 0.0 {
            1
        } else if dir[a] < 0.0 {
            -1
        } else {
            0
        };
    }
    // the entry face is exactly the slab plane on the entry axis
    if t_near >= 0.0 && dir[entry_axis] != 0.0 {
        idx[entry_axis] = if step[entry_axis] > 0 {
            0
        } else {
            r as i64 - 1
        };
    }
    let mut normal = Vec3::zeros();
    normal[entry_axis] = -(step[entry_axis] as f64);
    let mut t = t_start;
    let next_boundary = |idx: &[i64; 3], a: usize| -> f64 {
        match step[a] {
            0 => f64::INFINITY,
            s => {
                let face = if s > 0 { idx[a] + 1 } else { idx[a] };
                (plane(face, r) - origin[a]) / dir[a]
            }
        }
    };
    loop {
        let voxel = [idx[0] as usize, idx[1] as usize, idx[2] as usize];
        if occupied(&voxel) {
            return Some(Hit { voxel, t, normal });
        }
        let tm = [
            next_boundary(&idx, 0),
            next_boundary(&idx, 1),
            next_boundary(&idx, 2),
        ];
        let a = if tm[0] <= tm[1] && tm[0] <= tm[2] {
            0
        } else if tm[1] <= tm[2] {
            1
        } else {
            2
        };
        if !tm[a].is_finite() {
            return None;
        }
        idx[a] += step[a];
        if idx[a] < 0 || idx[a] >= r as i64 {
            return None;
        }
        t = tm[a];
        normal = Vec3::zeros();
        normal[a] = -(step[a] as f64);
    }
}

fn check_camera(view: &Viewpoint) -> Result<(), RenderError> {
    let o = view.pose.origin();
    if o.iter().all(|c| (-CUBE_HALF..=CUBE_HALF).contains(c)) {
        return Err(RenderError::CameraInsideCube([o.x, o.y, o.z]));
    }
    Ok(())
}

/// First hit of every pixel, row-major.
pub fn raycast_hits(
    mask: &[bool],
    r: usize,
    view: &Viewpoint,
) -> Result<Vec<Option<Hit>>, RenderError> {
    if mask.len() != r * r * r {
        return Err(RenderError::Shape(format!(
            "mask has {} cells, expected {}",
            mask.len(),
            r * r * r
        )));
    }
    check_camera(view)?;
    let (w, h) = (view.intrinsics.width, view.intrinsics.height);
    let rows: Vec<Vec<Option<Hit>>> = (0..h)
        .into_par_iter()
        .map(|j| {
            (0..w)
                .map(|i| {
                    let (o, d) = view.pixel_ray(i, j);
                    first_hit(&o, &d, r, |v| mask[linear_index(v, r)])
                })
                .collect()
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

pub fn raycast_depth(occupied: &Occupancy, view: &Viewpoint) -> Result<DepthImage, RenderError> {
    let hits = raycast_hits(&occupied.to_mask(), occupied.resolution(), view)?;
    Ok(DepthImage {
        width: view.intrinsics.width,
        height: view.intrinsics.height,
        values: hits.iter().map(|h| h.map_or(0.0, |h| h.t)).collect(),
    })
}

/// Simulated RGBD observation of an object whose occupancy is already known.
pub fn render_observation(
    obj: &SyntheticObject,
    occupancy: &Occupancy,
    view: &Viewpoint,
    channels: usize,
) -> Result<(DepthImage, FeatureImage), RenderError> {
    let features = SurfaceFeatures::new(obj, channels)?;
    let hits = raycast_hits(&occupancy.to_mask(), occupancy.resolution(), view)?;
    let (w, h) = (view.intrinsics.width, view.intrinsics.height);
    let mut depth = DepthImage::zeros(w, h);
    let mut image = FeatureImage::zeros(w, h, channels);
    for (p, hit) in hits.iter().enumerate() {
        if let Some(hit) = hit {
            let (i, j) = (p as u32 % w, p as u32 / w);
            let (o, d) = view.pixel_ray(i, j);
            depth.values[p] = hit.t;
            image.set_pixel(i, j, &features.feature(&(o + d * hit.t), &hit.normal));
        }
    }
    Ok((depth, image))
}

/// Depth and feature images of `obj` at lattice resolution `r`.
pub fn render_views(
    obj: &SyntheticObject,
    view: &Viewpoint,
    r: usize,
    channels: usize,
) -> Result<(DepthImage, FeatureImage), RenderError> {
    render_observation(obj, &occupancy_set(obj, r)?, view, channels)
}

/// Heat value of the first-hit voxel per pixel; misses and unheated voxels
/// read 0.
pub fn render_affordance(
    occupied: &Occupancy,
    heat: &AffordanceHeatmap,
    view: &Viewpoint,
) -> Result<ScalarImage, RenderError> {
    if heat.resolution != occupied.resolution() {
        return Err(RenderError::Resolution(
            heat.resolution,
            occupied.resolution(),
        ));
    }
    if !heat.is_subset_of(occupied) {
        return Err(RenderError::SupportViolation);
    }
    let r = occupied.resolution();
    let mut dense_heat = vec![0.0; r * r * r];
    for (p, v) in heat.positions.iter().zip(&heat.values) {
        dense_heat[linear_index(p, r)] = *v;
    }
    let hits = raycast_hits(&occupied.to_mask(), r, view)?;
    Ok(ScalarImage {
        width: view.intrinsics.width,
        height: view.intrinsics.height,
        values: hits
            .iter()
            .map(|h| h.map_or(0.0, |h| dense_heat[linear_index(&h.voxel, r)]))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{look_at_world_up, CameraIntrinsics};
    use crate::heatmap::HeatKind;

    fn camera(size: u32, origin: Vec3) -> Viewpoint {
        let k = CameraIntrinsics::evaluation(size).unwrap();
        Viewpoint::new(k, look_at_world_up(&origin, &Vec3::zeros()).unwrap())
    }

    #[test]
    fn empty_scene_renders_zero_depth() {
        let occ = Occupancy::new(8, vec![]).unwrap();
        let d = raycast_depth(&occ, &camera(16, Vec3::new(0.0, 0.0, 2.0))).unwrap();
        assert!(d.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn camera_inside_cube_is_rejected() {
        let occ = Occupancy::new(8, vec![]).unwrap();
        let err = raycast_depth(&occ, &camera(16, Vec3::new(0.0, 0.0, 0.4)));
        assert!(matches!(err, Err(RenderError::CameraInsideCube(_))));
    }

    /// Analytic ray/axis-aligned-box intersection (slab method), entry only.
    fn ray_box(o: &Vec3, d: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<f64> {
        let mut tn = f64::NEG_INFINITY;
        let mut tf = f64::INFINITY;
        for a in 0..3 {
            let t0 = (lo[a] - o[a]) / d[a];
            let t1 = (hi[a] - o[a]) / d[a];
            tn = tn.max(t0.min(t1));
            tf = tf.min(t0.max(t1));
        }
        (tn <= tf && tf > 0.0).then_some(tn)
    }

    #[test]
    fn single_centre_voxel_matches_ray_box() {
        // odd resolution so a voxel sits exactly at the cube centre
        let r = 9;
        let occ = Occupancy::new(r, vec![[4, 4, 4]]).unwrap();
        let view = camera(33, Vec3::new(0.0, 0.0, 2.0));
        let depth = raycast_depth(&occ, &view).unwrap();
        let h = 0.5 / r as f64;
        let (lo, hi) = (Vec3::new(-h, -h, -h), Vec3::new(h, h, h));
        let mut hits = 0;
        for j in 0..33 {
            for i in 0..33 {
                let (o, d) = view.pixel_ray(i, j);
                match ray_box(&o, &d, &lo, &hi) {
                    Some(t) => {
                        hits += 1;
                        assert!((depth.get(i, j) - t).abs() < 1e-9, "pixel ({i},{j})");
                    }
                    None => assert_eq!(depth.get(i, j), 0.0),
                }
            }
        }
        assert!(hits > 0);
        let centre = depth.get(16, 16);
        assert!((centre - (2.0 - 0.5 / r as f64)).abs() < 1e-12);
        // even resolution: voxel (4,4,4) has its top face at 1/8
        let occ = Occupancy::new(8, vec![[4, 4, 4]]).unwrap();
        let view = camera(32, Vec3::new(0.0, 0.0, 2.0));
        let d = raycast_depth(&occ, &view).unwrap();
        let hit: Vec<f64> = d.values.iter().copied().filter(|&v| v > 0.0).collect();
        assert!(!hit.is_empty());
        assert!(hit.iter().all(|&v| (v - (2.0 - 1.0 / 8.0)).abs() < 1e-9));
    }

    #[test]
    fn full_slab_has_planar_depth() {
        let r = 8;
        let slab: Vec<VoxelIndex> = (0..r)
            .flat_map(|x| (0..r).map(move |y| [x, y, 2]))
            .collect();
        let occ = Occupancy::new(r, slab).unwrap();
        let view = camera(64, Vec3::new(0.0, 0.0, 2.0));
        let depth = raycast_depth(&occ, &view).unwrap();
        // top face of layer z=2 is at world z = 3/8 - 0.5 = -0.125
        let expected = 2.0 + 0.125;
        let mut hits = 0;
        for &d in &depth.values {
            if d > 0.0 {
                hits += 1;
                assert!((d - expected).abs() < 1e-9);
            }
        }
        // the slab spans about 42% of the 40 degree field of view at this distance
        assert!(hits > 64 * 64 / 3);
    }

    #[test]
    fn occlusion_hides_heat() {
        let r = 8;
        let mut cells: Vec<VoxelIndex> = (0..r)
            .flat_map(|x| (0..r).map(move |y| [x, y, 5]))
            .collect();
        cells.push([3, 3, 2]);
        let occ = Occupancy::new(r, cells).unwrap();
        let heat =
            AffordanceHeatmap::new(r, HeatKind::Probability, vec![[3, 3, 2]], vec![1.0]).unwrap();
        let view = camera(48, Vec3::new(0.0, 0.0, 2.0));
        let img = render_affordance(&occ, &heat, &view).unwrap();
        // exhaustive oracle: every ray that reaches voxel (3,3,2) passes layer 5 first
        for j in 0..48 {
            for i in 0..48 {
                let (o, d) = view.pixel_ray(i, j);
                let first = first_hit(&o, &d, r, |v| occ.contains(v));
                assert_ne!(first.map(|h| h.voxel), Some([3, 3, 2]));
            }
        }
        assert!(img.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unoccluded_heat_passes_through() {
        let occ = Occupancy::new(8, vec![[3, 3, 2], [5, 5, 5]]).unwrap();
        let heat =
            AffordanceHeatmap::new(8, HeatKind::Probability, vec![[3, 3, 2]], vec![0.7]).unwrap();
        let view = camera(48, Vec3::new(0.0, 0.0, 2.0));
        let img = render_affordance(&occ, &heat, &view).unwrap();
        let lit: Vec<f64> = img.values.iter().copied().filter(|&v| v != 0.0).collect();
        assert!(!lit.is_empty());
        assert!(lit.iter().all(|&v| v == 0.7));
        let zero = AffordanceHeatmap::zeros(&occ);
        assert!(render_affordance(&occ, &zero, &view)
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 0.0));
        let outside =
            AffordanceHeatmap::new(8, HeatKind::Probability, vec![[0, 0, 0]], vec![0.7]).unwrap();
        assert!(matches!(
            render_affordance(&occ, &outside, &view),
            Err(RenderError::SupportViolation)
        ));
    }

    #[test]
    fn render_views_features_match_surface_feature_calls() {
        let obj = crate::synthscene::generate_object(2);
        let view = camera(48, Vec3::new(1.2, -0.9, 1.3));
        let (depth, feats) = render_views(&obj, &view, 8, 16).unwrap();
        let (d2, f2) = render_views(&obj, &view, 8, 16).unwrap();
        assert_eq!(depth, d2);
        assert_eq!(feats, f2);
        let sf = SurfaceFeatures::new(&obj, 16).unwrap();
        let occ = occupancy_set(&obj, 8).unwrap();
        for j in 0..48 {
            for i in 0..48 {
                let d = depth.get(i, j);
                if d == 0.0 {
                    assert!(feats.get(i, j).iter().all(|&v| v == 0.0));
                    continue;
                }
                let (o, dir) = view.pixel_ray(i, j);
                let hit = first_hit(&o, &dir, 8, |v| occ.contains(v)).unwrap();
                assert_eq!(
                    feats.get(i, j),
                    sf.feature(&(o + dir * hit.t), &hit.normal).as_slice()
                );
            }
        }
    }

    #[test]
    fn pgm_preview_header() {
        let mut d = DepthImage::zeros(3, 2);
        d.set(1, 1, 2.0);
        let mut buf = Vec::new();
        d.write_pgm(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("P2\n3 2\n255\n"));
    }
}

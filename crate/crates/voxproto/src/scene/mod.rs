//! Synthetic scenes: procedural voxel worlds, pinhole cameras, a raycast
//! feature renderer, voxel-to-image projection, and the binary scene format.
//!
//! Axis conventions used everywhere downstream:
//! * the voxel grid has extents `(h, w, z)` along world axes `(x, y, z)`;
//! * the canonical cell order is x-fastest: `idx = x + h·(y + w·z)`;
//! * a cells-major vector in that order is exactly a row-major tensor of
//!   shape `[z, w, h]`, which is how grid-shaped tensors are built.

pub mod generate;
pub mod io;
pub mod project;
pub mod render;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub use generate::{generate_scene, SceneConfig};
pub use io::{decode_scene, encode_scene, read_scene, write_scene};
pub use project::{hit_capacity, project_voxels};
pub use render::{raycast, render_views};

// ── World geometry ──────────────────────────────────────────────────────────

/// Axis-aligned world box holding the voxel grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl WorldBounds {
    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    pub fn diagonal(&self) -> f64 {
        let e = self.extent();
        (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.extent();
        if e.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::param(format!("degenerate world bounds: {self:?}")));
        }
        Ok(())
    }

    /// Center of cell `(x, y, z)` in a grid with the given extents.
    pub fn cell_center(&self, extents: [usize; 3], cell: [usize; 3]) -> [f64; 3] {
        let e = self.extent();
        let mut p = [0.0; 3];
        for a in 0..3 {
            let step = e[a] / extents[a] as f64;
            p[a] = self.min[a] + (cell[a] as f64 + 0.5) * step;
        }
        p
    }
}

// ── Occupancy grid ──────────────────────────────────────────────────────────

/// Dense semantic label grid; label 0 is free space.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    extents: [usize; 3], // (h, w, z) cells along x, y, z
    num_classes: usize,  // total label count including free
    labels: Vec<u8>,     // x-fastest
}

impl OccupancyGrid {
    pub fn new(extents: [usize; 3], num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        let n: usize = extents.iter().product();
        if labels.len() != n {
            return Err(Error::dim(format!(
                "grid extents {extents:?} imply {n} cells but got {} labels",
                labels.len()
            )));
        }
        if num_classes < 2 || num_classes > 256 {
            return Err(Error::param(format!("num_classes {num_classes} outside [2, 256]")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::data(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(OccupancyGrid { extents, num_classes, labels })
    }

    pub fn empty(extents: [usize; 3], num_classes: usize) -> Self {
        let n = extents.iter().product();
        OccupancyGrid { extents, num_classes, labels: vec![0; n] }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_cells(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Canonical (x-fastest) linear index.
    pub fn linear(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.extents[0] && y < self.extents[1] && z < self.extents[2]);
        x + self.extents[0] * (y + self.extents[1] * z)
    }

    pub fn label_at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.linear(x, y, z)]
    }

    pub fn set_label(&mut self, x: usize, y: usize, z: usize, label: u8) {
        let i = self.linear(x, y, z);
        self.labels[i] = label;
    }

    pub fn occupied_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    /// Distinct non-free labels present.
    pub fn present_labels(&self) -> Vec<u8> {
        let mut seen = vec![false; self.num_classes];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..self.num_classes).filter(|&l| seen[l]).map(|l| l as u8).collect()
    }
}

// ── Scene objects ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Box,
    Sphere,
}

/// A placed primitive with per-axis half-extents; a `Sphere` is an
/// axis-aligned ellipsoid (an exact sphere when the half-extents are equal).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ObjectKind,
    pub class: u8,
    pub center: [f64; 3],
    pub half_extent: [f64; 3],
}

impl SceneObject {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self.kind {
            ObjectKind::Box => (0..3).all(|a| (p[a] - self.center[a]).abs() <= self.half_extent[a]),
            ObjectKind::Sphere => {
                let d2: f64 =
                    (0..3).map(|a| ((p[a] - self.center[a]) / self.half_extent[a]).powi(2)).sum();
                d2 <= 1.0
            }
        }
    }
}

/// A generated world: labels plus the primitives that produced them.
/// `owners[i]` is 0 for free cells, `object index + 1` otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub occupancy: OccupancyGrid,
    pub objects: Vec<SceneObject>,
    pub owners: Vec<u16>,
    pub seed: u64,
}

// ── Cameras ─────────────────────────────────────────────────────────────────

/// Pinhole camera: `rotation` rows are the camera's (right, down, forward)
/// axes, so camera coords are `R · (p_world - position)` and pixel coords are
/// `u = fx·x/z + cx`, `v = fy·y/z + cy`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: [f64; 3],
    pub rotation: [[f64; 3]; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub image_h: usize,
    pub image_w: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.image_h == 0 || self.image_w == 0 {
            return Err(Error::param(format!(
                "degenerate intrinsics: fx={}, fy={}, image {}x{}",
                self.fx, self.fy, self.image_h, self.image_w
            )));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.position[0], p[1] - self.position[1], p[2] - self.position[2]];
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[0][1] * d[1] + r[0][2] * d[2],
            r[1][0] * d[0] + r[1][1] * d[1] + r[1][2] * d[2],
            r[2][0] * d[0] + r[2][1] * d[1] + r[2][2] * d[2],
        ]
    }

    /// Camera-frame direction back to world (rotation transpose).
    pub fn camera_dir_to_world(&self, d: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    /// Projects a world point; returns `(u, v, depth)` in pixels or `None`
    /// when the point sits at or behind the camera plane.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        if c[2] <= 0.0 {
            return None;
        }
        Some((self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy, c[2]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::param("camera rig has no cameras".to_string()));
        }
        for c in &self.cameras {
            c.validate()?;
        }
        Ok(())
    }

    pub fn num_views(&self) -> usize {
        self.cameras.len()
    }

    /// Deterministic rig of `n` cameras orbiting the bounds center: evenly
    /// spaced in azimuth at `radius_scale` x the bounds diagonal, raised by
    /// `height_scale` x the diagonal, all looking at the center.
    pub fn orbit(
        n: usize,
        bounds: &WorldBounds,
        image_hw: (usize, usize),
        fov_deg: f64,
        radius_scale: f64,
        height_scale: f64,
    ) -> Result<CameraRig> {
        if n == 0 {
            return Err(Error::param("orbit rig needs at least one camera".to_string()));
        }
        if !(10.0..=170.0).contains(&fov_deg) {
            return Err(Error::param(format!("fov {fov_deg} degrees outside [10, 170]")));
        }
        bounds.validate()?;
        let center = bounds.center();
        let diag = bounds.diagonal();
        let (ih, iw) = image_hw;
        let f = iw as f64 / (2.0 * (fov_deg.to_radians() / 2.0).tan());
        let mut cameras = Vec::with_capacity(n);
        for i in 0..n {
            let az = 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
            let pos = [
                center[0] + radius_scale * diag * az.cos(),
                center[1] + radius_scale * diag * az.sin(),
                center[2] + height_scale * diag,
            ];
            let fwd = normalize([center[0] - pos[0], center[1] - pos[1], center[2] - pos[2]]);
            let right = normalize(cross(fwd, [0.0, 0.0, 1.0]));
            let down = cross(fwd, right);
            cameras.push(Camera {
                position: pos,
                rotation: [right, down, fwd],
                fx: f,
                fy: f,
                cx: iw as f64 / 2.0,
                cy: ih as f64 / 2.0,
                image_h: ih,
                image_w: iw,
            });
        }
        let rig = CameraRig { cameras };
        rig.validate()?;
        Ok(rig)
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    assert!(n > 0.0, "cannot normalize zero vector");
    [v[0] / n, v[1] / n, v[2] / n]
}

// ── Rendered artifacts ──────────────────────────────────────────────────────

/// Per-view `[d, h_f, w_f]` feature maps.
#[derive(Clone, Debug)]
pub struct FeatureMaps {
    pub views: Vec<Tensor>,
    pub feat_h: usize,
    pub feat_w: usize,
    pub d: usize,
}

/// Per-view mask id maps at feature resolution; id 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthMasks {
    pub views: Vec<Vec<u32>>,
    pub h: usize,
    pub w: usize,
}

impl GroundTruthMasks {
    /// Pixel counts per id for one view (index = id).
    pub fn id_counts(&self, view: usize) -> Vec<usize> {
        let max_id = self.views[view].iter().copied().max().unwrap_or(0) as usize;
        let mut counts = vec![0usize; max_id + 1];
        for &id in &self.views[view] {
            counts[id as usize] += 1;
        }
        counts
    }
}

// ── Voxel-to-image hits ─────────────────────────────────────────────────────

/// One projected voxel-query slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HitSlot {
    pub query_index: usize,
    pub q_c: [f64; 2],
    pub valid: bool,
}

/// Fixed-width per-view hit lists: exactly `k` slots per view, padded with
/// invalid entries (which carry zero affinity downstream).
#[derive(Clone, Debug)]
pub struct HitSet {
    pub views: Vec<Vec<HitSlot>>,
    pub k: usize,
}

impl HitSet {
    pub fn valid_count(&self, view: usize) -> usize {
        self.views[view].iter().filter(|s| s.valid).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn occupancy_grid_linear_is_x_fastest() {
        let g = OccupancyGrid::empty([4, 3, 2], 5);
        assert_eq!(g.linear(1, 0, 0), 1);
        assert_eq!(g.linear(0, 1, 0), 4);
        assert_eq!(g.linear(0, 0, 1), 12);
        assert_eq!(g.linear(3, 2, 1), 3 + 4 * (2 + 3 * 1));
    }

    #[test]
    fn grid_validation() {
        assert!(OccupancyGrid::new([2, 2, 2], 3, vec![0; 8]).is_ok());
        assert!(OccupancyGrid::new([2, 2, 2], 3, vec![0; 7]).is_err());
        assert!(OccupancyGrid::new([2, 2, 2], 3, vec![3; 8]).is_err()); // label out of range
        assert!(OccupancyGrid::new([2, 2, 2], 1, vec![0; 8]).is_err());
    }

    #[test]
    fn cell_centers_sit_at_midpoints() {
        let b = WorldBounds { min: [0.0, 0.0, 0.0], max: [4.0, 2.0, 1.0] };
        assert_eq!(b.cell_center([4, 2, 1], [0, 0, 0]), [0.5, 0.5, 0.5]);
        assert_eq!(b.cell_center([4, 2, 1], [3, 1, 0]), [3.5, 1.5, 0.5]);
    }

    #[test]
    fn camera_rotation_is_orthonormal_and_looks_at_center() {
        let b = WorldBounds { min: [-1.0, -1.0, -0.25], max: [1.0, 1.0, 0.25] };
        let rig = CameraRig::orbit(3, &b, (16, 16), 60.0, 1.2, 0.4).unwrap();
        for cam in &rig.cameras {
            let r = &cam.rotation;
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|t| r[i][t] * r[j][t]).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-12, "rows {i},{j}: {dot}");
                }
            }
            // The bounds center projects to the principal point.
            let (u, v, depth) = cam.project(b.center()).expect("center visible");
            assert!((u - cam.cx).abs() < 1e-9 && (v - cam.cy).abs() < 1e-9);
            assert!(depth > 0.0);
        }
    }

    #[test]
    fn principal_point_projection_is_normalized_center() {
        // A voxel center on the optical axis at depth 1 lands on (cx, cy).
        let cam = Camera {
            position: [0.0, 0.0, 0.0],
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            fx: 8.0,
            fy: 8.0,
            cx: 8.0,
            cy: 6.0,
            image_h: 12,
            image_w: 16,
        };
        let (u, v, depth) = cam.project([0.0, 0.0, 1.0]).unwrap();
        assert_eq!((u, v, depth), (8.0, 6.0, 1.0));
        assert_eq!((u / 16.0, v / 12.0), (0.5, 0.5));
        assert!(cam.project([0.0, 0.0, -1.0]).is_none());
    }
}

//! Procedural scene generation: boxes and spheres rejection-placed into a
//! voxel grid without overlap, so every non-free voxel belongs to exactly one
//! primitive.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::StreamRng;

use super::{ObjectKind, OccupancyGrid, SceneObject, SceneSample, WorldBounds};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// Grid extents (h, w, z) along world (x, y, z).
    pub grid: [usize; 3],
    /// Total label count including free space (label 0).
    pub num_classes: usize,
    pub world_bounds: WorldBounds,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Primitive kinds to sample from.
    pub kinds: Vec<ObjectKind>,
    /// Object half-extent range as a fraction of the smallest world extent.
    pub min_size_frac: f64,
    pub max_size_frac: f64,
    /// Permits min_objects = 0 (an all-free grid).
    pub allow_empty: bool,
    /// Placement retries per object before giving up.
    pub max_place_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            grid: [32, 32, 8],
            num_classes: 5,
            world_bounds: WorldBounds { min: [-1.0, -1.0, -0.25], max: [1.0, 1.0, 0.25] },
            min_objects: 2,
            max_objects: 5,
            kinds: vec![ObjectKind::Box, ObjectKind::Sphere],
            min_size_frac: 0.30,
            max_size_frac: 0.50,
            allow_empty: false,
            max_place_retries: 128,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.iter().any(|&e| e < 8) {
            return Err(Error::config("scene.grid", format!("extents {:?} must be >= 8 per axis", self.grid)));
        }
        if self.num_classes < 2 {
            return Err(Error::config("scene.num_classes", "need at least free + one class"));
        }
        if self.num_classes > 256 {
            return Err(Error::config("scene.num_classes", "labels are stored as bytes"));
        }
        self.world_bounds.validate()?;
        if self.min_objects > self.max_objects {
            return Err(Error::config("scene.min_objects", "exceeds max_objects"));
        }
        if self.max_objects == 0 && !self.allow_empty {
            return Err(Error::config("scene.max_objects", "0 objects requires allow_empty"));
        }
        if self.min_objects == 0 && !self.allow_empty {
            return Err(Error::config("scene.min_objects", "0 objects requires allow_empty"));
        }
        if self.kinds.is_empty() {
            return Err(Error::config("scene.kinds", "no primitive kinds to sample"));
        }
        if !(self.min_size_frac > 0.0 && self.max_size_frac >= self.min_size_frac && self.max_size_frac <= 0.5)
        {
            return Err(Error::config(
                "scene.min_size_frac",
                format!("size fracs ({}, {}) outside 0 < min <= max <= 0.5", self.min_size_frac, self.max_size_frac),
            ));
        }
        if self.max_place_retries == 0 {
            return Err(Error::config("scene.max_place_retries", "must be positive"));
        }
        Ok(())
    }
}

/// Generates a scene deterministically from `(cfg, seed)`.
///
/// Objects are drawn one at a time; a candidate that covers no voxel or
/// overlaps an already placed object is rejected and redrawn, up to
/// `cfg.max_place_retries` times. Exhausting the retries settles for the
/// objects placed so far when at least `cfg.min_objects` fit, and fails
/// otherwise.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = StreamRng::new(seed).stream("scene.generate", 0);
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);

    let mut occupancy = OccupancyGrid::empty(cfg.grid, cfg.num_classes);
    let mut owners = vec![0u16; occupancy.num_cells()];
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);

    let ext = cfg.world_bounds.extent();

    for obj_idx in 0..count {
        let mut placed = false;
        for _attempt in 0..cfg.max_place_retries {
            let kind = cfg.kinds[rng.gen_range(0..cfg.kinds.len())];
            let class = rng.gen_range(1..cfg.num_classes) as u8;
            let half_extent = match kind {
                ObjectKind::Box => {
                    let mut he = [0.0; 3];
                    for (a, h) in he.iter_mut().enumerate() {
                        let frac = rng.gen_range(cfg.min_size_frac..=cfg.max_size_frac);
                        *h = 0.5 * frac * ext[a];
                    }
                    he
                }
                ObjectKind::Sphere => {
                    // One shared fraction: a sphere in normalized world
                    // coordinates, an ellipsoid in metric ones.
                    let frac = rng.gen_range(cfg.min_size_frac..=cfg.max_size_frac);
                    [0.5 * frac * ext[0], 0.5 * frac * ext[1], 0.5 * frac * ext[2]]
                }
            };
            let mut center = [0.0; 3];
            let mut degenerate = false;
            for a in 0..3 {
                let lo = cfg.world_bounds.min[a] + half_extent[a];
                let hi = cfg.world_bounds.max[a] - half_extent[a];
                if lo >= hi {
                    degenerate = true;
                    break;
                }
                center[a] = rng.gen_range(lo..hi);
            }
            if degenerate {
                continue;
            }
            let candidate = SceneObject { kind, class, center, half_extent };

            // Voxelize: a cell belongs to the object iff its center is inside.
            let mut cells = Vec::new();
            let mut overlaps = false;
            'scan: for zc in 0..cfg.grid[2] {
                for yc in 0..cfg.grid[1] {
                    for xc in 0..cfg.grid[0] {
                        let p = cfg.world_bounds.cell_center(cfg.grid, [xc, yc, zc]);
                        if candidate.contains(p) {
                            let idx = occupancy.linear(xc, yc, zc);
                            if owners[idx] != 0 {
                                overlaps = true;
                                break 'scan;
                            }
                            cells.push(idx);
                        }
                    }
                }
            }
            if overlaps || cells.is_empty() {
                continue;
            }

            for &idx in &cells {
                owners[idx] = (obj_idx + 1) as u16;
            }
            let labels = {
                let mut l = occupancy.labels().to_vec();
                for &idx in &cells {
                    l[idx] = candidate.class;
                }
                l
            };
            occupancy = OccupancyGrid::new(cfg.grid, cfg.num_classes, labels)?;
            objects.push(candidate);
            placed = true;
            break;
        }
        if !placed {
            // A crowded world may not fit the sampled count; settle for
            // fewer objects as long as the configured minimum is met.
            if objects.len() >= cfg.min_objects {
                break;
            }
            return Err(Error::generation(format!(
                "could not place object {} of {} after {} retries (seed {})",
                obj_idx + 1,
                count,
                cfg.max_place_retries,
                seed
            )));
        }
    }

    if objects.is_empty() && !cfg.allow_empty {
        return Err(Error::generation("empty scene but allow_empty is false".to_string()));
    }
    Ok(SceneSample { occupancy, objects, owners, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&cfg, 7).unwrap();
        let b = generate_scene(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&cfg, 8).unwrap();
        assert_ne!(a.occupancy.labels(), c.occupancy.labels());
    }

    #[test]
    fn scenes_are_nonempty_and_owners_match_labels() {
        let cfg = SceneConfig::default();
        for seed in 0..10 {
            let s = generate_scene(&cfg, seed).unwrap();
            assert!(s.occupancy.occupied_count() > 0);
            for (i, &l) in s.occupancy.labels().iter().enumerate() {
                assert_eq!(l == 0, s.owners[i] == 0, "cell {i} label/owner disagree");
                if s.owners[i] != 0 {
                    let obj = &s.objects[(s.owners[i] - 1) as usize];
                    assert_eq!(obj.class, l);
                }
            }
        }
    }

    #[test]
    fn empty_scene_only_with_allow_empty() {
        let cfg = SceneConfig {
            min_objects: 0,
            max_objects: 0,
            allow_empty: true,
            ..SceneConfig::default()
        };
        let s = generate_scene(&cfg, 1).unwrap();
        assert_eq!(s.occupancy.occupied_count(), 0);
        assert!(s.objects.is_empty());

        let bad = SceneConfig { min_objects: 0, max_objects: 0, allow_empty: false, ..SceneConfig::default() };
        assert!(generate_scene(&bad, 1).is_err());
    }

    #[test]
    fn three_boxes_with_distinct_classes_show_three_labels() {
        // 16^3 grid, exactly 3 boxes, 4 total labels: when the sampled classes
        // happen to be distinct the grid contains exactly 3 non-free labels.
        let cfg = SceneConfig {
            grid: [16, 16, 16],
            num_classes: 4,
            world_bounds: WorldBounds { min: [-1.0, -1.0, -1.0], max: [1.0, 1.0, 1.0] },
            min_objects: 3,
            max_objects: 3,
            kinds: vec![ObjectKind::Box],
            ..SceneConfig::default()
        };
        let mut seen_distinct = false;
        for seed in 0..50 {
            let s = generate_scene(&cfg, seed).unwrap();
            assert_eq!(s.objects.len(), 3);
            let mut classes: Vec<u8> = s.objects.iter().map(|o| o.class).collect();
            classes.sort_unstable();
            classes.dedup();
            if classes.len() == 3 {
                seen_distinct = true;
                assert_eq!(s.occupancy.present_labels().len(), 3, "seed {seed}");
            }
        }
        assert!(seen_distinct, "no seed in 0..50 sampled three distinct classes");
    }

    #[test]
    fn unsatisfiable_placement_reports_generation_error() {
        // Objects large enough that a second placement must overlap.
        let cfg = SceneConfig {
            grid: [8, 8, 8],
            world_bounds: WorldBounds { min: [-1.0, -1.0, -1.0], max: [1.0, 1.0, 1.0] },
            min_objects: 6,
            max_objects: 6,
            min_size_frac: 0.5,
            max_size_frac: 0.5,
            max_place_retries: 8,
            ..SceneConfig::default()
        };
        let err = generate_scene(&cfg, 3).unwrap_err();
        assert!(matches!(err, Error::Generation(_)), "got {err:?}");
    }
}

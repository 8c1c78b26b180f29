// temporary debug probe: replicate the placement loop with logging
use voxproto::numeric::StreamRng;
use voxproto::scene::{ObjectKind, SceneConfig, SceneObject, WorldBounds};
use rand::Rng;

fn main() {
    let cfg = SceneConfig { max_place_retries: 128, ..SceneConfig::default() };
    let seed: u64 = 14289489746802655669;
    let mut rng = StreamRng::new(seed).stream("scene.generate", 0);
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    println!("count = {count}");
    let ext = [2.0, 2.0, 0.5];
    let bounds = WorldBounds { min: [-1.0, -1.0, -0.25], max: [1.0, 1.0, 0.25] };
    let mut placed: Vec<SceneObject> = Vec::new();
    for obj_idx in 0..count {
        let mut ok = false;
        let (mut n_degen, mut n_overlap, mut n_empty) = (0, 0, 0);
        for _ in 0..cfg.max_place_retries {
            let kind = cfg.kinds[rng.gen_range(0..cfg.kinds.len())];
            let _class = rng.gen_range(1..cfg.num_classes) as u8;
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
                    let frac = rng.gen_range(cfg.min_size_frac..=cfg.max_size_frac);
                    [0.5 * frac * ext[0], 0.5 * frac * ext[1], 0.5 * frac * ext[2]]
                }
            };
            let mut center = [0.0; 3];
            let mut degenerate = false;
            for a in 0..3 {
                let lo = bounds.min[a] + half_extent[a];
                let hi = bounds.max[a] - half_extent[a];
                if lo >= hi { degenerate = true; break; }
                center[a] = rng.gen_range(lo..hi);
            }
            if degenerate { n_degen += 1; continue; }
            let cand = SceneObject { kind, class: 1, center, half_extent };
            // voxel-overlap approximation: center-in-object per cell
            let mut cells = 0usize;
            let mut overlaps = false;
            'scan: for zc in 0..cfg.grid[2] {
                for yc in 0..cfg.grid[1] {
                    for xc in 0..cfg.grid[0] {
                        let p = bounds.cell_center(cfg.grid, [xc, yc, zc]);
                        if cand.contains(p) {
                            if placed.iter().any(|o| o.contains(p)) { overlaps = true; break 'scan; }
                            cells += 1;
                        }
                    }
                }
            }
            if overlaps { n_overlap += 1; continue; }
            if cells == 0 { n_empty += 1; continue; }
            println!("obj {obj_idx}: placed {:?} he {:?} center {:?} cells {cells}", kind, half_extent, center);
            placed.push(cand);
            ok = true;
            break;
        }
        if !ok {
            println!("obj {obj_idx}: FAILED degen={n_degen} overlap={n_overlap} empty={n_empty}");
            break;
        }
    }
}

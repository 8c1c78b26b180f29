//! Binary scene files.
//!
//! Layout: magic `POSC`, version u32 LE, `h, w, z, L` as u32 LE, `h·w·z`
//! label bytes in canonical (x-fastest) order, then a length-prefixed JSON
//! document (u32 LE byte count) carrying the camera rig along with the
//! placed objects and generation seed, so a loaded scene can re-derive its
//! ground-truth masks.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{CameraRig, OccupancyGrid, SceneObject, SceneSample, WorldBounds};

pub const MAGIC: &[u8; 4] = b"POSC";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TrailerDoc {
    cameras: CameraRig,
    objects: Vec<SceneObject>,
    world_bounds: WorldBounds,
    seed: u64,
}

/// Serializes a scene + rig to bytes.
pub fn encode_scene(scene: &SceneSample, rig: &CameraRig, bounds: &WorldBounds) -> Result<Vec<u8>> {
    let grid = &scene.occupancy;
    let [h, w, z] = grid.extents();
    let doc = TrailerDoc {
        cameras: rig.clone(),
        objects: scene.objects.clone(),
        world_bounds: *bounds,
        seed: scene.seed,
    };
    let json = serde_json::to_vec(&doc)?;
    let mut out = Vec::with_capacity(24 + grid.num_cells() + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for dim in [h, w, z, grid.num_classes()] {
        let v = u32::try_from(dim).map_err(|_| Error::format(format!("dim {dim} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(grid.labels());
    let jlen = u32::try_from(json.len()).map_err(|_| Error::format("rig JSON too large".to_string()))?;
    out.extend_from_slice(&jlen.to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

/// Parses bytes produced by [`encode_scene`]; truncated or malformed input
/// yields a format error and no partial state.
pub fn decode_scene(bytes: &[u8]) -> Result<(SceneSample, CameraRig, WorldBounds)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported scene version {version}")));
    }
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let z = cur.u32()? as usize;
    let l = cur.u32()? as usize;
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(z))
        .ok_or_else(|| Error::format("grid extents overflow".to_string()))?;
    let labels = cur.take(n)?.to_vec();
    let jlen = cur.u32()? as usize;
    let json = cur.take(jlen)?;
    if cur.pos != bytes.len() {
        return Err(Error::format(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    let doc: TrailerDoc = serde_json::from_slice(json)
        .map_err(|e| Error::format(format!("scene trailer JSON: {e}")))?;
    doc.cameras.validate()?;
    doc.world_bounds.validate()?;
    let occupancy = OccupancyGrid::new([h, w, z], l, labels)?;

    // Re-derive owners from the stored primitives (the file stores labels only).
    let owners = derive_owners(&occupancy, &doc.objects, &doc.world_bounds)?;
    Ok((
        SceneSample { occupancy, objects: doc.objects, owners, seed: doc.seed },
        doc.cameras,
        doc.world_bounds,
    ))
}

/// Recomputes the owner grid by testing cell centers against the stored
/// primitives. Placement guarantees each occupied cell center lies inside
/// exactly one primitive; a file violating that is rejected as inconsistent.
fn derive_owners(
    grid: &OccupancyGrid,
    objects: &[SceneObject],
    bounds: &WorldBounds,
) -> Result<Vec<u16>> {
    let [h, w, z] = grid.extents();
    let mut owners = vec![0u16; grid.num_cells()];
    for zc in 0..z {
        for yc in 0..w {
            for xc in 0..h {
                let idx = grid.linear(xc, yc, zc);
                let p = bounds.cell_center([h, w, z], [xc, yc, zc]);
                let mut hit: Option<u16> = None;
                for (oi, obj) in objects.iter().enumerate() {
                    if obj.contains(p) {
                        if hit.is_some() {
                            return Err(Error::data(format!(
                                "cell ({xc},{yc},{zc}) inside two primitives"
                            )));
                        }
                        hit = Some((oi + 1) as u16);
                    }
                }
                let label = grid.labels()[idx];
                match hit {
                    Some(owner) => {
                        let class = objects[(owner - 1) as usize].class;
                        if label != class {
                            return Err(Error::data(format!(
                                "cell ({xc},{yc},{zc}) labelled {label} but primitive class is {class}"
                            )));
                        }
                        owners[idx] = owner;
                    }
                    None if label != 0 => {
                        return Err(Error::data(format!(
                            "cell ({xc},{yc},{zc}) labelled {label} but no primitive covers it"
                        )));
                    }
                    None => {}
                }
            }
        }
    }
    Ok(owners)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!(
                "truncated scene file: wanted {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Writes a scene file.
pub fn write_scene(
    path: &Path,
    scene: &SceneSample,
    rig: &CameraRig,
    bounds: &WorldBounds,
) -> Result<()> {
    fs::write(path, encode_scene(scene, rig, bounds)?)?;
    Ok(())
}

/// Reads a scene file.
pub fn read_scene(path: &Path) -> Result<(SceneSample, CameraRig, WorldBounds)> {
    let bytes = fs::read(path)?;
    decode_scene(&bytes)
}

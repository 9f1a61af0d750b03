//! Pure geometric kernels: pinhole projection, rigid alignment,
//! voxelization, voxel-connectivity clustering and point-set IoU.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::model::{CameraCalibration, RigidTransform};

/// Points at or below this camera depth (meters) are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Integer voxel coordinates, `floor(coord / voxel_size)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct VoxelKey {
    pub ix: i32,
    pub iy: i32,
    pub iz: i32,
}

impl VoxelKey {
    pub const fn new(ix: i32, iy: i32, iz: i32) -> Self {
        Self { ix, iy, iz }
    }

    pub fn of(p: &Vector3<f64>, voxel_size: f64) -> Self {
        Self {
            ix: (p.x / voxel_size).floor() as i32,
            iy: (p.y / voxel_size).floor() as i32,
            iz: (p.z / voxel_size).floor() as i32,
        }
    }

    /// Euclidean distance in meters between the centers of two voxels.
    pub fn center_distance(&self, other: &VoxelKey, voxel_size: f64) -> f64 {
        let dx = (self.ix as i64 - other.ix as i64) as f64 * voxel_size;
        let dy = (self.iy as i64 - other.iy as i64) as f64 * voxel_size;
        let dz = (self.iz as i64 - other.iz as i64) as f64 * voxel_size;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    fn offset(&self, dx: i32, dy: i32, dz: i32) -> Self {
        Self::new(self.ix + dx, self.iy + dy, self.iz + dz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub u: f64,
    pub v: f64,
    /// Depth along the camera axis.
    pub depth: f64,
    pub in_image: bool,
}

impl ProjectedPoint {
    /// Integer pixel holding the projection, when it lands inside the image.
    pub fn pixel(&self) -> Option<(u32, u32)> {
        self.in_image
            .then(|| (self.u.floor() as u32, self.v.floor() as u32))
    }
}

/// Pinhole projection `z_c·[u, v, 1]ᵀ = K·T·[x, y, z, 1]ᵀ`.
pub fn project_point(p: &Vector3<f64>, calib: &CameraCalibration) -> ProjectedPoint {
    let cam = calib.extrinsics.apply(p);
    let uvw = calib.intrinsics * cam;
    let depth = uvw.z;
    if depth <= MIN_DEPTH {
        return ProjectedPoint {
            u: f64::NAN,
            v: f64::NAN,
            depth,
            in_image: false,
        };
    }
    let u = uvw.x / depth;
    let v = uvw.y / depth;
    let in_image = u >= 0.0 && v >= 0.0 && u < calib.width as f64 && v < calib.height as f64;
    ProjectedPoint {
        u,
        v,
        depth,
        in_image,
    }
}

/// Maps points expressed in `src_pose`'s frame into `dst_pose`'s frame,
/// i.e. applies `dst⁻¹·src`. Both poses map their frame into a common world.
pub fn transform_points(
    points: &[Vector3<f64>],
    src_pose: &RigidTransform,
    dst_pose: &RigidTransform,
) -> Result<Vec<Vector3<f64>>> {
    if let Some(why) = src_pose.rigidity_violation() {
        return Err(Error::SingularPose(why));
    }
    let relative = dst_pose.inverse()?.compose(src_pose);
    let r = relative.rotation();
    let t = relative.translation_part();
    Ok(points.iter().map(|p| r * p + t).collect())
}

fn check_voxel_size(voxel_size: f64) -> Result<()> {
    if voxel_size > 0.0 && voxel_size.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument {
            arg: "voxel_size",
            reason: format!("must be positive, got {voxel_size}"),
        })
    }
}

/// Buckets point indices by voxel. Indices inside a bucket are ascending.
pub fn voxelize(points: &[Vector3<f64>], voxel_size: f64) -> Result<HashMap<VoxelKey, Vec<usize>>> {
    check_voxel_size(voxel_size)?;
    let mut buckets: HashMap<VoxelKey, Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        buckets.entry(VoxelKey::of(p, voxel_size)).or_default().push(i);
    }
    Ok(buckets)
}

struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Half of the 26-neighborhood; visiting it from every voxel covers all pairs once.
const FORWARD_NEIGHBORS: [(i32, i32, i32); 13] = [
    (1, 0, 0),
    (-1, 1, 0),
    (0, 1, 0),
    (1, 1, 0),
    (-1, -1, 1),
    (0, -1, 1),
    (1, -1, 1),
    (-1, 0, 1),
    (0, 0, 1),
    (1, 0, 1),
    (-1, 1, 1),
    (0, 1, 1),
    (1, 1, 1),
];

/// Groups the selected points into clusters of 26-connected occupied voxels.
///
/// Clusters hold original point indices in ascending order and are sorted
/// by size (descending), then by smallest member.
pub fn connected_components(
    point_indices: &[usize],
    points: &[Vector3<f64>],
    link_voxel_size: f64,
) -> Result<Vec<Vec<usize>>> {
    check_voxel_size(link_voxel_size)?;
    let mut voxel_ids: HashMap<VoxelKey, usize> = HashMap::new();
    let mut keys = Vec::new();
    let mut member_voxel = Vec::with_capacity(point_indices.len());
    for &idx in point_indices {
        let key = VoxelKey::of(&points[idx], link_voxel_size);
        let id = *voxel_ids.entry(key).or_insert_with(|| {
            keys.push(key);
            keys.len() - 1
        });
        member_voxel.push(id);
    }

    let mut sets = DisjointSet::new(keys.len());
    for (id, key) in keys.iter().enumerate() {
        for (dx, dy, dz) in FORWARD_NEIGHBORS {
            if let Some(&other) = voxel_ids.get(&key.offset(dx, dy, dz)) {
                sets.union(id, other);
            }
        }
    }

    let mut by_root: HashMap<usize, Vec<usize>> = HashMap::new();
    for (&idx, &voxel) in point_indices.iter().zip(&member_voxel) {
        by_root.entry(sets.find(voxel)).or_default().push(idx);
    }
    let mut clusters: Vec<Vec<usize>> = by_root
        .into_values()
        .map(|mut c| {
            c.sort_unstable();
            c.dedup();
            c
        })
        .collect();
    clusters.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    Ok(clusters)
}

/// `|a ∩ b| / |a ∪ b|` over index sets given as sorted, deduplicated slices;
/// zero when both are empty.
pub fn point_set_iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

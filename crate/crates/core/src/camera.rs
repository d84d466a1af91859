//! Scene normalization, relative 6-DoF poses, camera-conditioning encoding
//! and pinhole ray generation.
//!
//! Conventions: camera-to-world rotation with +z forward, image origin
//! top-left, pixel centers at +0.5. The conditioned input camera sits at
//! (0, 0, -z) looking through the origin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
/// Row-major 3x3 matrix.
pub type Mat3 = [f64; 9];

pub const IDENTITY: Mat3 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn normalize3(a: Vec3) -> Vec3 {
    scale3(a, 1.0 / norm3(a))
}

pub fn matvec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
        m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
        m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
    ]
}

pub fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
            }
        }
    }
    out
}

pub fn transpose3(m: &Mat3) -> Mat3 {
    [m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]]
}

pub fn det3(m: &Mat3) -> f64 {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6])
}

/// 6-DoF camera: camera-to-world rotation plus camera center, with pinhole
/// intrinsics. `focal` is the focal length in pixels divided by image width.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub center: Vec3,
    pub focal: f64,
    pub principal_point: [f64; 2],
    pub image_size: (usize, usize),
}

impl CameraPose {
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let rt_r = matmul3(&transpose3(r), r);
        for (i, (&a, &b)) in rt_r.iter().zip(IDENTITY.iter()).enumerate() {
            if (a - b).abs() > 1e-6 {
                return Err(Error::Validation(format!(
                    "rotation is not orthonormal (R^T R entry {} = {})",
                    i, a
                )));
            }
        }
        let d = det3(r);
        if (d - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("rotation determinant {} != +1", d)));
        }
        if self.focal <= 0.0 {
            return Err(Error::Validation(format!("focal {} must be positive", self.focal)));
        }
        Ok(())
    }

    /// Camera placed at `center` with +z looking through `target`, world up (0,1,0).
    pub fn look_at(center: Vec3, target: Vec3, focal: f64, size: (usize, usize)) -> CameraPose {
        let fwd = normalize3(sub3(target, center));
        let up = if fwd[0].abs() < 1e-9 && fwd[2].abs() < 1e-9 {
            [0.0, 0.0, 1.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        let x = normalize3(cross3(up, fwd));
        let y = cross3(fwd, x);
        CameraPose {
            rotation: [x[0], y[0], fwd[0], x[1], y[1], fwd[1], x[2], y[2], fwd[2]],
            center,
            focal,
            principal_point: [size.0 as f64 / 2.0, size.1 as f64 / 2.0],
            image_size: size,
        }
    }
}

/// Result of rescaling a scene to the unit-box convention: the largest
/// bounding-box axis extent becomes 1 and the box centroid moves to the
/// origin. `z` is the normalized distance of the input camera.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneNormalization {
    pub scale: f64,
    pub translation: Vec3,
    pub z: f64,
}

/// A pixel ray: unit direction from origin, with entry/exit parameters
/// against the field bounds when intersecting.
#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

/// The 18-entry camera conditioning vector (f, z, and 4 octaves of
/// sine/cosine embeddings of each).
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningVector(pub Vec<f64>);

impl ConditioningVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub const CONDITIONING_DIM: usize = 18;

/// Rescale points and camera centers so the point-cloud bounding box has
/// largest axis extent 1 and is centered at the origin. Rotations are
/// unchanged. `input_index` selects the camera whose normalized distance
/// becomes `z`.
pub fn normalize_scene(
    points: &[Vec3],
    poses: &[CameraPose],
    input_index: usize,
) -> Result<(SceneNormalization, Vec<CameraPose>)> {
    if poses.len() < 2 {
        return Err(Error::Normalization(format!("need >= 2 poses, got {}", poses.len())));
    }
    if input_index >= poses.len() {
        return Err(Error::Normalization(format!("input index {} out of range", input_index)));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let max_extent = extent[0].max(extent[1]).max(extent[2]);
    if !(max_extent > 0.0) || points.is_empty() {
        return Err(Error::Normalization("degenerate point cloud with zero extent".into()));
    }
    let scale = 1.0 / max_extent;
    let centroid = [
        (lo[0] + hi[0]) / 2.0,
        (lo[1] + hi[1]) / 2.0,
        (lo[2] + hi[2]) / 2.0,
    ];
    let translation = scale3(centroid, -1.0);
    let transformed: Vec<CameraPose> = poses
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q.center = scale3(add3(p.center, translation), scale);
            q
        })
        .collect();
    let z = norm3(transformed[input_index].center);
    if !(z > 0.0) {
        return Err(Error::Normalization("input camera sits at the origin".into()));
    }
    Ok((SceneNormalization { scale, translation, z }, transformed))
}

/// Apply a scene normalization to a point.
pub fn apply_normalization(n: &SceneNormalization, p: Vec3) -> Vec3 {
    scale3(add3(p, n.translation), n.scale)
}

/// Conditioned location of the input camera in the relative frame.
pub fn conditioned_input_center(z: f64) -> Vec3 {
    [0.0, 0.0, -z]
}

/// Express `target` in the frame where `input` has identity rotation and
/// sits at the conditioned center: R_rel = R_in^T R_tgt,
/// C_rel = R_in^T (C_tgt - C_in) + C0(z).
pub fn relativize_pose(input: &CameraPose, target: &CameraPose, z: f64) -> Result<CameraPose> {
    input.validate()?;
    target.validate()?;
    if !(z > 0.0) {
        return Err(Error::Validation(format!("z {} must be positive", z)));
    }
    let rt = transpose3(&input.rotation);
    // Equal rotations relativize to the identity exactly; the float product
    // R^T R would only reach it to rounding error.
    let rotation =
        if input.rotation == target.rotation { IDENTITY } else { matmul3(&rt, &target.rotation) };
    let center = add3(matvec(&rt, sub3(target.center, input.center)), conditioned_input_center(z));
    Ok(CameraPose {
        rotation,
        center,
        focal: target.focal,
        principal_point: target.principal_point,
        image_size: target.image_size,
    })
}

/// Conditioning vector (f, z, sin 2f, cos 2f, sin 2z, cos 2z, ..., cos 16z).
pub fn encode_conditioning(f: f64, z: f64) -> Result<ConditioningVector> {
    if !(f > 0.0) || !(z > 0.0) {
        return Err(Error::Validation(format!("f and z must be positive, got f={} z={}", f, z)));
    }
    Ok(encode_conditioning_unchecked(f, z))
}

pub fn encode_conditioning_unchecked(f: f64, z: f64) -> ConditioningVector {
    let mut out = Vec::with_capacity(CONDITIONING_DIM);
    out.push(f);
    out.push(z);
    for k in 1..=4u32 {
        let m = f64::from(2u32.pow(k));
        out.push((m * f).sin());
        out.push((m * f).cos());
        out.push((m * z).sin());
        out.push((m * z).cos());
    }
    debug_assert_eq!(out.len(), CONDITIONING_DIM);
    ConditioningVector(out)
}

/// Ray through the center of pixel (u, v): direction
/// R * normalize(((u+0.5-cx)/F, (v+0.5-cy)/F, 1)) with F = focal * width.
pub fn generate_ray(pose: &CameraPose, u: usize, v: usize) -> Ray {
    let f_pix = pose.focal * pose.image_size.0 as f64;
    let dx = (u as f64 + 0.5 - pose.principal_point[0]) / f_pix;
    let dy = (v as f64 + 0.5 - pose.principal_point[1]) / f_pix;
    let dir_cam = normalize3([dx, dy, 1.0]);
    Ray {
        origin: pose.center,
        direction: matvec(&pose.rotation, dir_cam),
        t_near: 0.0,
        t_far: f64::INFINITY,
    }
}

pub fn generate_rays(pose: &CameraPose, pixels: &[(usize, usize)]) -> Vec<Ray> {
    pixels.iter().map(|&(u, v)| generate_ray(pose, u, v)).collect()
}

/// Slab-method ray/axis-aligned-box intersection. `t_near` is clamped to 0.
pub fn ray_box_intersect(ray: &Ray, lo: Vec3, hi: Vec3) -> Option<(f64, f64)> {
    let mut t0 = 0.0_f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if ray.direction[a].abs() < 1e-12 {
            if ray.origin[a] < lo[a] || ray.origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / ray.direction[a];
        let (mut ta, mut tb) = ((lo[a] - ray.origin[a]) * inv, (hi[a] - ray.origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Project a world point back to pixel coordinates (for round-trip checks).
pub fn project(pose: &CameraPose, p: Vec3) -> Option<(f64, f64)> {
    let cam = matvec(&transpose3(&pose.rotation), sub3(p, pose.center));
    if cam[2] <= 0.0 {
        return None;
    }
    let f_pix = pose.focal * pose.image_size.0 as f64;
    Some((
        cam[0] / cam[2] * f_pix + pose.principal_point[0] - 0.5,
        cam[1] / cam[2] * f_pix + pose.principal_point[1] - 0.5,
    ))
}

/// Rotation about an axis by `angle` radians (for tests and orbit poses).
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let [x, y, z] = normalize3(axis);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        t * x * x + c,
        t * x * y - s * z,
        t * x * z + s * y,
        t * x * y + s * z,
        t * y * y + c,
        t * y * z - s * x,
        t * x * z - s * y,
        t * y * z + s * x,
        t * z * z + c,
    ]
}

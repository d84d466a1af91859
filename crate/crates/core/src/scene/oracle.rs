//! Analytic ray tracer for toy scenes: exact primitive intersections,
//! Lambertian-plus-ambient shading with one fixed directional light, exact
//! depth on hit.

use crate::camera::{generate_ray, normalize3, CameraPose, Ray, Vec3};

use super::{Primitive, ToyScene};

/// Unit vector from any surface point toward the light.
pub fn light_direction() -> Vec3 {
    normalize3([0.4, 0.7, -0.6])
}

pub const AMBIENT: f64 = 0.3;
pub const DIFFUSE: f64 = 0.7;

/// Nearest intersection parameter t > t_min and outward surface normal.
fn intersect(p: &Primitive, ray: &Ray, t_min: f64) -> Option<(f64, Vec3)> {
    match p {
        Primitive::Sphere { center, radius, .. } => {
            let oc = [
                ray.origin[0] - center[0],
                ray.origin[1] - center[1],
                ray.origin[2] - center[2],
            ];
            let b = oc[0] * ray.direction[0] + oc[1] * ray.direction[1] + oc[2] * ray.direction[2];
            let c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = if -b - sq > t_min { -b - sq } else { -b + sq };
            if t <= t_min {
                return None;
            }
            let hit: Vec3 = std::array::from_fn(|a| ray.origin[a] + t * ray.direction[a]);
            let n: Vec3 = std::array::from_fn(|a| (hit[a] - center[a]) / radius);
            Some((t, n))
        }
        Primitive::Cuboid { center, half, .. } => {
            let mut t0 = t_min;
            let mut t1 = f64::INFINITY;
            let mut axis0 = 0;
            for a in 0..3 {
                let lo = center[a] - half[a];
                let hi = center[a] + half[a];
                if ray.direction[a].abs() < 1e-12 {
                    if ray.origin[a] < lo || ray.origin[a] > hi {
                        return None;
                    }
                    continue;
                }
                let inv = 1.0 / ray.direction[a];
                let (mut ta, mut tb) = ((lo - ray.origin[a]) * inv, (hi - ray.origin[a]) * inv);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                if ta > t0 {
                    t0 = ta;
                    axis0 = a;
                }
                t1 = t1.min(tb);
                if t0 > t1 {
                    return None;
                }
            }
            if t0 <= t_min {
                return None;
            }
            let hit: Vec3 = std::array::from_fn(|a| ray.origin[a] + t0 * ray.direction[a]);
            let mut n = [0.0; 3];
            n[axis0] = if hit[axis0] > center[axis0] { 1.0 } else { -1.0 };
            Some((t0, n))
        }
    }
}

fn shade(p: &Primitive, hit: Vec3, n: Vec3) -> [f64; 3] {
    let l = light_direction();
    let ndotl = (n[0] * l[0] + n[1] * l[1] + n[2] * l[2]).max(0.0);
    let albedo = match p {
        Primitive::Sphere { albedo, .. } => *albedo,
        Primitive::Cuboid { albedo, checker: false, .. } => *albedo,
        Primitive::Cuboid { albedo, checker: true, .. } => {
            // Checker over the (x, z) footprint, 0.5-unit tiles.
            let parity = ((hit[0] * 2.0).floor() as i64 + (hit[2] * 2.0).floor() as i64)
                .rem_euclid(2);
            if parity == 0 {
                *albedo
            } else {
                std::array::from_fn(|c| albedo[c] * 0.35)
            }
        }
    };
    std::array::from_fn(|c| (albedo[c] * (AMBIENT + DIFFUSE * ndotl)).clamp(0.0, 1.0))
}

/// Trace a single ray: shaded color and exact depth, or None on miss.
pub fn trace_ray(scene: &ToyScene, ray: &Ray) -> Option<([f64; 3], f64)> {
    let mut best: Option<(f64, Vec3, &Primitive)> = None;
    for p in &scene.primitives {
        if let Some((t, n)) = intersect(p, ray, 1e-9) {
            if best.as_ref().is_none_or(|(bt, _, _)| t < *bt) {
                best = Some((t, n, p));
            }
        }
    }
    best.map(|(t, n, p)| {
        let hit: Vec3 = std::array::from_fn(|a| ray.origin[a] + t * ray.direction[a]);
        (shade(p, hit, n), t)
    })
}

/// Render ground truth for one view: rgb [h*w*3] in [0,1] and depth [h*w]
/// (infinity on miss, background color there).
pub fn raytrace_oracle(scene: &ToyScene, pose: &CameraPose) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = pose.image_size;
    let mut rgb = vec![0.0; w * h * 3];
    let mut depth = vec![f64::INFINITY; w * h];
    for v in 0..h {
        for u in 0..w {
            let ray = generate_ray(pose, u, v);
            let px = v * w + u;
            match trace_ray(scene, &ray) {
                Some((c, t)) => {
                    rgb[px * 3..px * 3 + 3].copy_from_slice(&c);
                    depth[px] = t;
                }
                None => rgb[px * 3..px * 3 + 3].copy_from_slice(&scene.background),
            }
        }
    }
    (rgb, depth)
}

/// Unsigned distance from a point to the nearest primitive surface
/// (consistency-test helper).
pub fn surface_distance(scene: &ToyScene, p: Vec3) -> f64 {
    scene
        .primitives
        .iter()
        .map(|prim| match prim {
            Primitive::Sphere { center, radius, .. } => {
                let d: f64 = (0..3).map(|a| (p[a] - center[a]).powi(2)).sum::<f64>().sqrt();
                (d - radius).abs()
            }
            Primitive::Cuboid { center, half, .. } => {
                let q: Vec3 = std::array::from_fn(|a| (p[a] - center[a]).abs() - half[a]);
                let outside: f64 =
                    (0..3).map(|a| q[a].max(0.0).powi(2)).sum::<f64>().sqrt();
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                (outside + inside).abs()
            }
        })
        .fold(f64::INFINITY, f64::min)
}

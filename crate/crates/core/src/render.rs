//! Vector-matrix radiance field and differentiable volume renderer: field
//! queries with linear/bilinear interpolation, density and view-dependent
//! color decoding, ray sampling, and transmittance-weighted compositing.

use std::sync::Arc;

use rand::Rng;

use crate::camera::{generate_ray, ray_box_intersect, CameraPose, Ray};
use crate::tensor::{ParamGroup, ParamStore, Scalar, Session, TensorId};

/// The normalized scene lives in [-FIELD_BOUND, FIELD_BOUND]^3.
pub const FIELD_BOUND: f64 = 1.0;

/// Three axis vectors (each [R, k]) and three axis matrices (each [R*R, k],
/// row-major) living on the tape of the current pass. The matrix paired with
/// vector V_x spans (y, z), and so on cyclically.
#[derive(Clone, Copy, Debug)]
pub struct VMRepresentation {
    pub v: [TensorId; 3],
    pub m: [TensorId; 3],
    pub resolution: usize,
    pub channels: usize,
}

impl VMRepresentation {
    /// A field with every factor set to the same constant (tests).
    pub fn constant<T: Scalar>(sess: &mut Session<T>, r: usize, k: usize, value: f64) -> VMRepresentation {
        let v = std::array::from_fn(|_| {
            let data = vec![T::from_f64(value); r * k];
            sess.tape.constant(&[r, k], data)
        });
        let m = std::array::from_fn(|_| {
            let data = vec![T::from_f64(value); r * r * k];
            sess.tape.constant(&[r * r, k], data)
        });
        VMRepresentation { v, m, resolution: r, channels: k }
    }

    pub fn from_values<T: Scalar>(sess: &mut Session<T>, data: &VmData<T>) -> VMRepresentation {
        let r = data.resolution;
        let k = data.channels;
        let v = std::array::from_fn(|i| sess.tape.constant(&[r, k], data.v[i].clone()));
        let m = std::array::from_fn(|i| sess.tape.constant(&[r * r, k], data.m[i].clone()));
        VMRepresentation { v, m, resolution: r, channels: k }
    }

    /// Copy the current factor values off the tape.
    pub fn materialize<T: Scalar>(&self, sess: &Session<T>) -> VmData<T> {
        VmData {
            v: std::array::from_fn(|i| sess.tape.value(self.v[i]).to_vec()),
            m: std::array::from_fn(|i| sess.tape.value(self.m[i]).to_vec()),
            resolution: self.resolution,
            channels: self.channels,
        }
    }
}

/// Plain factor values detached from any tape (for chunked image rendering
/// and serialization).
#[derive(Clone, Debug)]
pub struct VmData<T> {
    pub v: [Vec<T>; 3],
    pub m: [Vec<T>; 3],
    pub resolution: usize,
    pub channels: usize,
}

fn interp_coeffs(coord: f64, r: usize) -> (usize, f64) {
    assert!(
        coord >= -1e-9 && coord <= (r - 1) as f64 + 1e-9,
        "field query coordinate {} outside grid [0, {}]",
        coord,
        r - 1
    );
    let c = coord.clamp(0.0, (r - 1) as f64);
    let i0 = (c.floor() as usize).min(r.saturating_sub(2));
    (i0, c - i0 as f64)
}

/// Map a world coordinate inside the bounds to a continuous grid coordinate
/// in [0, R-1].
fn grid_coord(x: f64, r: usize) -> f64 {
    assert!(
        x.abs() <= FIELD_BOUND + 1e-9,
        "field query position {} outside bounds [{}, {}]",
        x,
        -FIELD_BOUND,
        FIELD_BOUND
    );
    (x + FIELD_BOUND) / (2.0 * FIELD_BOUND) * (r - 1) as f64
}

fn vec_interp<T: Scalar>(sess: &mut Session<T>, v: TensorId, coords: &[f64], r: usize) -> TensorId {
    let n = coords.len();
    let mut i0 = Vec::with_capacity(n);
    let mut i1 = Vec::with_capacity(n);
    let mut w0 = Vec::with_capacity(n);
    let mut w1 = Vec::with_capacity(n);
    for &c in coords {
        let (i, f) = interp_coeffs(c, r);
        i0.push(i);
        i1.push(i + 1);
        w0.push(T::from_f64(1.0 - f));
        w1.push(T::from_f64(f));
    }
    let g0 = sess.tape.gather_rows(v, Arc::new(i0));
    let g1 = sess.tape.gather_rows(v, Arc::new(i1));
    let c0 = sess.tape.constant(&[n], w0);
    let c1 = sess.tape.constant(&[n], w1);
    let t0 = sess.tape.mul_col(g0, c0);
    let t1 = sess.tape.mul_col(g1, c1);
    sess.tape.add(t0, t1)
}

fn mat_interp<T: Scalar>(
    sess: &mut Session<T>,
    m: TensorId,
    a: &[f64],
    b: &[f64],
    r: usize,
) -> TensorId {
    let n = a.len();
    let mut idx = [(); 4].map(|_| Vec::with_capacity(n));
    let mut w = [(); 4].map(|_| Vec::with_capacity(n));
    for i in 0..n {
        let (ia, fa) = interp_coeffs(a[i], r);
        let (ib, fb) = interp_coeffs(b[i], r);
        let corners = [(ia, ib), (ia, ib + 1), (ia + 1, ib), (ia + 1, ib + 1)];
        let ws = [(1.0 - fa) * (1.0 - fb), (1.0 - fa) * fb, fa * (1.0 - fb), fa * fb];
        for c in 0..4 {
            idx[c].push(corners[c].0 * r + corners[c].1);
            w[c].push(T::from_f64(ws[c]));
        }
    }
    let mut acc: Option<TensorId> = None;
    for c in 0..4 {
        let g = sess.tape.gather_rows(m, Arc::new(std::mem::take(&mut idx[c])));
        let wc = sess.tape.constant(&[n], std::mem::take(&mut w[c]));
        let t = sess.tape.mul_col(g, wc);
        acc = Some(match acc {
            Some(a) => sess.tape.add(a, t),
            None => t,
        });
    }
    acc.unwrap()
}

/// Field feature at each position: per channel,
/// V_x[x]·M_yz[y,z] + V_y[y]·M_zx[z,x] + V_z[z]·M_xy[x,y],
/// with linear interpolation on vectors and bilinear on matrices.
/// Positions must lie inside the bounds; they are not differentiated.
pub fn query_vm<T: Scalar>(
    sess: &mut Session<T>,
    vm: &VMRepresentation,
    positions: &[[f64; 3]],
) -> TensorId {
    let r = vm.resolution;
    let n = positions.len();
    let mut g = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for p in positions {
        for a in 0..3 {
            g[a].push(grid_coord(p[a], r));
        }
    }
    let mut total: Option<TensorId> = None;
    for axis in 0..3 {
        // V along `axis`, matrix over the remaining two axes in cyclic order.
        let b1 = (axis + 1) % 3;
        let b2 = (axis + 2) % 3;
        let vi = vec_interp(sess, vm.v[axis], &g[axis], r);
        let mi = mat_interp(sess, vm.m[axis], &g[b1], &g[b2], r);
        let term = sess.tape.mul(vi, mi);
        total = Some(match total {
            Some(t) => sess.tape.add(t, term),
            None => term,
        });
    }
    total.unwrap()
}

/// Density per position: relu of the channel sum of the feature.
pub fn density<T: Scalar>(sess: &mut Session<T>, feature: TensorId) -> TensorId {
    let s = sess.tape.sum_axis(feature, 1);
    sess.tape.relu(s)
}

/// Shallow color network: (feature, raw unit view direction) -> rgb in (0,1).
#[derive(Clone, Debug)]
pub struct RendererMlp {
    pub fc1: crate::attention::Linear,
    pub fc2: crate::attention::Linear,
    pub fc3: crate::attention::Linear,
    pub channels: usize,
}

pub const RENDERER_HIDDEN: usize = 64;

impl RendererMlp {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> RendererMlp {
        use crate::attention::Linear;
        let g = ParamGroup::DecoderRenderer;
        RendererMlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels + 3, hidden, g, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, hidden, g, rng),
            fc3: Linear::new(store, &format!("{name}.fc3"), hidden, 3, g, rng),
            channels,
        }
    }

    /// rgb [n, 3] for features [n, k] and unit directions (constants).
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        sess: &mut Session<T>,
        feature: TensorId,
        dirs: &[[f64; 3]],
    ) -> TensorId {
        for d in dirs {
            let n2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            assert!((n2 - 1.0).abs() < 1e-6, "view direction not unit: |d|^2 = {}", n2);
        }
        let n = dirs.len();
        let flat: Vec<T> = dirs.iter().flatten().map(|&v| T::from_f64(v)).collect();
        let d = sess.tape.constant(&[n, 3], flat);
        let x = sess.tape.concat(&[feature, d], 1);
        let h1 = self.fc1.forward(store, sess, x);
        let a1 = crate::attention::silu(sess, h1);
        let h2 = self.fc2.forward(store, sess, a1);
        let a2 = crate::attention::silu(sess, h2);
        let out = self.fc3.forward(store, sess, a2);
        sess.tape.sigmoid(out)
    }

    pub fn param_count(channels: usize, hidden: usize) -> usize {
        use crate::attention::Linear;
        Linear::param_count(channels + 3, hidden)
            + Linear::param_count(hidden, hidden)
            + Linear::param_count(hidden, 3)
    }
}

/// Samples along one ray: strictly increasing parameters, positions inside
/// the bounds, interval widths with the last one closed by t_far.
#[derive(Clone, Debug)]
pub struct RaySampleBatch {
    pub t: Vec<f64>,
    pub positions: Vec<[f64; 3]>,
    pub deltas: Vec<f64>,
    pub direction: [f64; 3],
}

/// N samples between the ray's near and far parameters: bin midpoints when
/// unstratified, one uniform jitter per bin otherwise. Returns None when the
/// ray misses the bounds.
pub fn sample_ray<R: Rng>(ray: &Ray, n: usize, stratified: bool, rng: &mut R) -> Option<RaySampleBatch> {
    let lo = [-FIELD_BOUND; 3];
    let hi = [FIELD_BOUND; 3];
    let (t0, t1) = ray_box_intersect(ray, lo, hi)?;
    if t1 <= t0 {
        return None;
    }
    let width = (t1 - t0) / n as f64;
    let mut t = Vec::with_capacity(n);
    for i in 0..n {
        let u = if stratified { rng.gen_range(0.0..1.0) } else { 0.5 };
        t.push(t0 + (i as f64 + u) * width);
    }
    let mut deltas = Vec::with_capacity(n);
    for i in 0..n {
        let next = if i + 1 < n { t[i + 1] } else { t1 };
        deltas.push(next - t[i]);
    }
    let positions = t
        .iter()
        .map(|&ti| {
            std::array::from_fn(|a| {
                (ray.origin[a] + ti * ray.direction[a]).clamp(-FIELD_BOUND, FIELD_BOUND)
            })
        })
        .collect();
    Some(RaySampleBatch { t, positions, deltas, direction: ray.direction })
}

/// Batched compositing over [rays, N] tensors:
/// T_i = exp(-sum_{j<i} sigma_j delta_j), w_i = T_i (1 - exp(-sigma_i delta_i)),
/// rgb = sum_i w_i c_i per channel.
pub struct Composited {
    /// Per-channel [rays] sums.
    pub rgb: [TensorId; 3],
    /// [rays, N] weights.
    pub weights: TensorId,
    /// [rays, N] transmittance.
    pub transmittance: TensorId,
    /// [rays] accumulated opacity.
    pub accumulation: TensorId,
}

pub fn composite<T: Scalar>(
    sess: &mut Session<T>,
    sigma: TensorId,
    colors: [TensorId; 3],
    deltas: TensorId,
) -> Composited {
    let sd = sess.tape.mul(sigma, deltas);
    let csum = sess.tape.cumsum_exclusive(sd, 1);
    let neg = sess.tape.neg(csum);
    let transmittance = sess.tape.exp(neg);
    let nsd = sess.tape.neg(sd);
    let esd = sess.tape.exp(nsd);
    let neg_esd = sess.tape.neg(esd);
    let alpha = sess.tape.add_scalar(neg_esd, 1.0);
    let weights = sess.tape.mul(transmittance, alpha);
    let rgb = colors.map(|c| {
        let wc = sess.tape.mul(weights, c);
        sess.tape.sum_axis(wc, 1)
    });
    let accumulation = sess.tape.sum_axis(weights, 1);
    Composited { rgb, weights, transmittance, accumulation }
}

/// Output of rendering a batch of rays inside one session (the training
/// path). Sample geometry is exposed for the distortion loss.
pub struct RayRender {
    /// Per-channel [rays] colors with background composited in.
    pub rgb: [TensorId; 3],
    pub weights: TensorId,
    pub accumulation: TensorId,
    /// Constant sample parameters [rays, N] and widths [rays, N].
    pub t: Vec<f64>,
    pub deltas: Vec<f64>,
    pub t_range: Vec<(f64, f64)>,
    /// Indices (into the input ray slice) of rays that hit the bounds.
    pub hit: Vec<usize>,
    /// Indices of rays that missed (their color is exactly the background).
    pub missed: Vec<usize>,
    pub n_samples: usize,
}

pub struct RenderOptions {
    pub n_samples: usize,
    pub stratified: bool,
    pub background: [f64; 3],
}

/// Render a batch of rays against a VM field living on the session's tape.
/// Missed rays are excluded from the tensors; their pixels are exactly the
/// background color.
pub fn render_rays<T: Scalar, R: Rng>(
    store: &ParamStore<T>,
    sess: &mut Session<T>,
    vm: &VMRepresentation,
    mlp: &RendererMlp,
    rays: &[Ray],
    opts: &RenderOptions,
    rng: &mut R,
) -> RayRender {
    let n = opts.n_samples;
    let mut hit = Vec::new();
    let mut missed = Vec::new();
    let mut positions = Vec::new();
    let mut dirs = Vec::new();
    let mut t_all = Vec::new();
    let mut d_all = Vec::new();
    let mut t_range = Vec::new();
    for (i, ray) in rays.iter().enumerate() {
        match sample_ray(ray, n, opts.stratified, rng) {
            Some(batch) => {
                hit.push(i);
                t_range.push((batch.t[0] - 0.0, batch.t[0] + batch.deltas.iter().sum::<f64>()));
                // Record the actual integration range [t0_first_sample_bin_start ...]
                positions.extend_from_slice(&batch.positions);
                dirs.extend(std::iter::repeat(batch.direction).take(n));
                t_all.extend_from_slice(&batch.t);
                d_all.extend_from_slice(&batch.deltas);
            }
            None => missed.push(i),
        }
    }
    let rays_hit = hit.len();
    if rays_hit == 0 {
        let empty = sess.tape.zeros(&[0]);
        return RayRender {
            rgb: [empty; 3],
            weights: empty,
            accumulation: empty,
            t: t_all,
            deltas: d_all,
            t_range,
            hit,
            missed,
            n_samples: n,
        };
    }
    let feature = query_vm(sess, vm, &positions);
    let sigma_flat = density(sess, feature);
    let sigma = sess.tape.reshape(sigma_flat, &[rays_hit, n]);
    let rgb_all = mlp.forward(store, sess, feature, &dirs);
    let colors = std::array::from_fn(|c| {
        let col = sess.tape.slice_cols(rgb_all, c, 1);
        sess.tape.reshape(col, &[rays_hit, n])
    });
    let deltas: Vec<T> = d_all.iter().map(|&d| T::from_f64(d)).collect();
    let delta_t = sess.tape.constant(&[rays_hit, n], deltas);
    let comp = composite(sess, sigma, colors, delta_t);
    // Composite the background behind whatever opacity remains.
    let rgb = std::array::from_fn(|c| {
        let neg_acc = sess.tape.neg(comp.accumulation);
        let rest = sess.tape.add_scalar(neg_acc, 1.0);
        let bg = sess.tape.mul_scalar(rest, opts.background[c]);
        sess.tape.add(comp.rgb[c], bg)
    });
    RayRender {
        rgb,
        weights: comp.weights,
        accumulation: comp.accumulation,
        t: t_all,
        deltas: d_all,
        t_range,
        hit,
        missed,
        n_samples: n,
    }
}

/// Full-image forward rendering with detached field values, chunked over
/// rays. Returns rgb [h*w*3], depth [h*w], accumulation [h*w]; pixels whose
/// rays miss the bounds get the background color, zero depth, zero
/// accumulation.
pub fn render_image<T: Scalar>(
    store: &ParamStore<T>,
    vm: &VmData<T>,
    mlp: &RendererMlp,
    pose: &CameraPose,
    opts: &RenderOptions,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (w, h) = pose.image_size;
    let mut rgb = vec![0.0; w * h * 3];
    let mut depth = vec![0.0; w * h];
    let mut acc = vec![0.0; w * h];
    for p in 0..w * h {
        for c in 0..3 {
            rgb[p * 3 + c] = opts.background[c];
        }
    }
    let rays: Vec<Ray> = (0..w * h)
        .map(|p| generate_ray(pose, p % w, p / w))
        .collect();
    let chunk = 1024;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    for (ci, rays_chunk) in rays.chunks(chunk).enumerate() {
        let base = ci * chunk;
        let mut sess = Session::<T>::new();
        let vm_t = VMRepresentation::from_values(&mut sess, vm);
        let out = render_rays(store, &mut sess, &vm_t, mlp, rays_chunk, opts, &mut rng);
        let n = out.n_samples;
        for (row, &ri) in out.hit.iter().enumerate() {
            let p = base + ri;
            for c in 0..3 {
                rgb[p * 3 + c] = sess.tape.value(out.rgb[c])[row].to_f64();
            }
            let wv = sess.tape.value(out.weights);
            let mut wsum = 0.0;
            let mut wt = 0.0;
            for i in 0..n {
                let wi = wv[row * n + i].to_f64();
                wsum += wi;
                wt += wi * out.t[row * n + i];
            }
            acc[p] = wsum;
            depth[p] = wt / wsum.max(1e-8);
        }
    }
    (rgb, depth, acc)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::camera::{CameraPose, Ray};
    use crate::tensor::gradcheck;

    use super::*;

    fn unit_ray(origin: [f64; 3], dir: [f64; 3]) -> Ray {
        let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        Ray {
            origin,
            direction: [dir[0] / n, dir[1] / n, dir[2] / n],
            t_near: 0.0,
            t_far: f64::INFINITY,
        }
    }

    #[test]
    fn constant_field_gives_three() {
        let mut sess = Session::<f64>::new();
        let vm = VMRepresentation::constant(&mut sess, 4, 2, 1.0);
        let pts = [[0.0, 0.0, 0.0], [0.3, -0.7, 0.9], [-1.0, 1.0, 0.5]];
        let f = query_vm(&mut sess, &vm, &pts);
        for &v in sess.tape.value(f) {
            assert!((v - 3.0).abs() < 1e-12, "{}", v);
        }
    }

    #[test]
    fn one_hot_basis_peak_and_falloff() {
        let r = 4;
        let k = 1;
        let mut sess = Session::<f64>::new();
        let mut vx = vec![0.0; r * k];
        vx[2] = 1.0; // grid node i=2 along x
        let mut myz = vec![0.0; r * r * k];
        myz[1 * r + 3] = 1.0; // node (j=1, l=3) on (y, z)
        let v = [
            sess.tape.constant(&[r, k], vx),
            sess.tape.zeros(&[r, k]),
            sess.tape.zeros(&[r, k]),
        ];
        let m = [
            sess.tape.constant(&[r * r, k], myz),
            sess.tape.zeros(&[r * r, k]),
            sess.tape.zeros(&[r * r, k]),
        ];
        let vm = VMRepresentation { v, m, resolution: r, channels: k };
        let node = |i: usize| -1.0 + 2.0 * i as f64 / (r - 1) as f64;
        let at_node = query_vm(&mut sess, &vm, &[[node(2), node(1), node(3)]]);
        assert!((sess.tape.value(at_node)[0] - 1.0).abs() < 1e-12);
        // Halfway toward a neighbor along x the value halves.
        let half = query_vm(&mut sess, &vm, &[[node(2) + 1.0 / 3.0, node(1), node(3)]]);
        assert!((sess.tape.value(half)[0] - 0.5).abs() < 1e-9);
        // Far node is zero.
        let far = query_vm(&mut sess, &vm, &[[node(0), node(1), node(3)]]);
        assert!(sess.tape.value(far)[0].abs() < 1e-12);
    }

    /// Densely materialize the field on an S^3 grid of a fine sampling and
    /// compare query_vm against trilinear interpolation of that grid.
    fn dense_oracle(r: usize, k: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sess = Session::<f64>::new();
        let v: [Vec<f64>; 3] =
            std::array::from_fn(|_| (0..r * k).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let m: [Vec<f64>; 3] =
            std::array::from_fn(|_| (0..r * r * k).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let vt = std::array::from_fn(|i| sess.tape.constant(&[r, k], v[i].clone()));
        let mt = std::array::from_fn(|i| sess.tape.constant(&[r * r, k], m[i].clone()));
        let vm = VMRepresentation { v: vt, m: mt, resolution: r, channels: k };
        // Dense grid T[x][y][z][c] per the channel-wise outer-product sum.
        let grid = |x: usize, y: usize, z: usize, c: usize| {
            v[0][x * k + c] * m[0][(y * r + z) * k + c]
                + v[1][y * k + c] * m[1][(z * r + x) * k + c]
                + v[2][z * k + c] * m[2][(x * r + y) * k + c]
        };
        let mut max_err = 0.0f64;
        for _ in 0..100 {
            let p: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let q = query_vm(&mut sess, &vm, &[p]);
            let qv = sess.tape.value(q).to_vec();
            let g: [f64; 3] = std::array::from_fn(|a| (p[a] + 1.0) / 2.0 * (r - 1) as f64);
            let i: [usize; 3] = std::array::from_fn(|a| (g[a].floor() as usize).min(r - 2));
            let f: [f64; 3] = std::array::from_fn(|a| g[a] - i[a] as f64);
            for c in 0..k {
                let mut tri = 0.0;
                for dx in 0..2 {
                    for dy in 0..2 {
                        for dz in 0..2 {
                            let w = (if dx == 1 { f[0] } else { 1.0 - f[0] })
                                * (if dy == 1 { f[1] } else { 1.0 - f[1] })
                                * (if dz == 1 { f[2] } else { 1.0 - f[2] });
                            tri += w * grid(i[0] + dx, i[1] + dy, i[2] + dz, c);
                        }
                    }
                }
                max_err = max_err.max((qv[c] - tri).abs());
            }
        }
        max_err
    }

    #[test]
    fn query_matches_dense_grid_oracle() {
        for (r, k) in [(2, 1), (4, 2), (8, 4)] {
            let err = dense_oracle(r, k, 11 + r as u64);
            assert!(err < 1e-5, "R={} k={} err={}", r, k, err);
        }
    }

    #[test]
    #[should_panic(expected = "outside bounds")]
    fn out_of_bounds_query_panics() {
        let mut sess = Session::<f64>::new();
        let vm = VMRepresentation::constant(&mut sess, 4, 1, 1.0);
        query_vm(&mut sess, &vm, &[[1.5, 0.0, 0.0]]);
    }

    #[test]
    fn density_examples() {
        let mut sess = Session::<f64>::new();
        let f = sess.tape.constant(&[2, 2], vec![-1.0, -1.0, 1.0, 2.0]);
        let d = density(&mut sess, f);
        assert_eq!(sess.tape.value(d), &[0.0, 3.0]);
    }

    #[test]
    fn color_zero_weights_is_half_gray() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = RendererMlp::new(&mut store, "mlp", 4, 8, &mut rng);
        let _ = &mut mlp;
        for p in store.entries.iter_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut sess = Session::new();
        let f = sess.tape.constant(&[2, 4], vec![0.3; 8]);
        let rgb = mlp.forward(&store, &mut sess, f, &[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
        for &v in sess.tape.value(rgb) {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn color_range_and_gradcheck() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = RendererMlp::new(&mut store, "mlp", 4, 8, &mut rng);
        for p in store.entries.iter_mut() {
            p.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
        let mut sess = Session::new();
        let f = sess.tape.constant(&[3, 4], (0..12).map(|i| (i as f64).sin()).collect());
        let rgb = mlp.forward(&store, &mut sess, f, &[[0.0, 0.0, 1.0]; 3]);
        for &v in sess.tape.value(rgb) {
            assert!(v > 0.0 && v < 1.0);
        }
        let store2 = store.clone();
        let err = gradcheck(
            |tape, ids| {
                let mut sess = Session::new();
                std::mem::swap(&mut sess.tape, tape);
                let rgb = mlp.forward(&store2, &mut sess, ids[0], &[[0.0, 0.0, 1.0]; 3]);
                let sq = sess.tape.mul(rgb, rgb);
                let loss = sess.tape.sum_all(sq);
                std::mem::swap(&mut sess.tape, tape);
                loss
            },
            &[(vec![3, 4], (0..12).map(|i| (i as f64 * 0.4).cos()).collect())],
            1e-5,
        );
        assert!(err <= 1e-4, "color gradcheck {}", err);
    }

    #[test]
    fn midpoint_samples() {
        let ray = unit_ray([0.0, 0.0, -2.0], [0.0, 0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_ray(&ray, 4, false, &mut rng).unwrap();
        // Box intersection gives t in [1, 3]; midpoints 1.25, 1.75, 2.25, 2.75.
        let expect = [1.25, 1.75, 2.25, 2.75];
        for (a, e) in b.t.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{} vs {}", a, e);
        }
        // Last width is closed by the far parameter: 3.0 - 2.75 = 0.25.
        let expect_d = [0.5, 0.5, 0.5, 0.25];
        for (d, e) in b.deltas.iter().zip(expect_d) {
            assert!((d - e).abs() < 1e-12, "{} vs {}", d, e);
        }
    }

    #[test]
    fn stratified_samples_stay_in_bins_and_replay() {
        let ray = unit_ray([0.0, 0.0, -2.0], [0.0, 0.0, 1.0]);
        let b1 = sample_ray(&ray, 8, true, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b2 = sample_ray(&ray, 8, true, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(b1.t, b2.t);
        let width = 2.0 / 8.0;
        for (i, &t) in b1.t.iter().enumerate() {
            let lo = 1.0 + i as f64 * width;
            assert!(t >= lo && t < lo + width, "sample {} out of bin", t);
        }
        for w in b1.t.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn miss_returns_none() {
        let ray = unit_ray([0.0, 5.0, -2.0], [0.0, 0.0, 1.0]);
        assert!(sample_ray(&ray, 4, false, &mut ChaCha8Rng::seed_from_u64(0)).is_none());
    }

    #[test]
    fn composite_hand_example() {
        let mut sess = Session::<f64>::new();
        let sigma = sess.tape.constant(&[1, 2], vec![1.0, 1.0]);
        let delta = sess.tape.constant(&[1, 2], vec![1.0, 1.0]);
        let c_r = sess.tape.constant(&[1, 2], vec![1.0, 0.0]);
        let c_g = sess.tape.constant(&[1, 2], vec![0.0, 1.0]);
        let c_b = sess.tape.zeros(&[1, 2]);
        let out = composite(&mut sess, sigma, [c_r, c_g, c_b], delta);
        let w = sess.tape.value(out.weights);
        assert!((w[0] - 0.6321).abs() < 1e-4, "{}", w[0]);
        assert!((w[1] - 0.2325).abs() < 1e-4, "{}", w[1]);
        let rgb: Vec<f64> = out.rgb.iter().map(|&c| sess.tape.value(c)[0]).collect();
        assert!((rgb[0] - 0.6321).abs() < 1e-4);
        assert!((rgb[1] - 0.2325).abs() < 1e-4);
        assert_eq!(rgb[2], 0.0);
    }

    #[test]
    fn composite_zero_sigma_and_opaque_limit() {
        let mut sess = Session::<f64>::new();
        let zero = sess.tape.zeros(&[1, 3]);
        let delta = sess.tape.constant(&[1, 3], vec![0.5; 3]);
        let ones = sess.tape.constant(&[1, 3], vec![1.0; 3]);
        let out = composite(&mut sess, zero, [ones, ones, ones], delta);
        assert!(sess.tape.value(out.weights).iter().all(|&w| w == 0.0));
        assert!(sess.tape.value(out.transmittance).iter().all(|&t| t == 1.0));
        assert!(out.rgb.iter().all(|&c| sess.tape.value(c)[0] == 0.0));

        let big = sess.tape.constant(&[1, 2], vec![1e6, 1.0]);
        let d2 = sess.tape.constant(&[1, 2], vec![1.0, 1.0]);
        let c_r = sess.tape.constant(&[1, 2], vec![0.8, 0.1]);
        let out2 = composite(&mut sess, big, [c_r, c_r, c_r], d2);
        let w = sess.tape.value(out2.weights);
        assert!((w[0] - 1.0).abs() < 1e-9);
        assert!((sess.tape.value(out2.rgb[0])[0] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn weight_sum_identity_and_monotone_transmittance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sess = Session::<f64>::new();
        let n = 16;
        let rays = 5;
        let s: Vec<f64> = (0..rays * n).map(|_| rng.gen_range(0.0..3.0)).collect();
        let d: Vec<f64> = (0..rays * n).map(|_| rng.gen_range(0.01..0.4)).collect();
        let sigma = sess.tape.constant(&[rays, n], s.clone());
        let delta = sess.tape.constant(&[rays, n], d.clone());
        let c = sess.tape.constant(&[rays, n], vec![0.5; rays * n]);
        let out = composite(&mut sess, sigma, [c, c, c], delta);
        let w = sess.tape.value(out.weights);
        let t = sess.tape.value(out.transmittance);
        for r in 0..rays {
            let wsum: f64 = w[r * n..(r + 1) * n].iter().sum();
            let total: f64 = (0..n).map(|i| s[r * n + i] * d[r * n + i]).sum();
            assert!((wsum - (1.0 - (-total).exp())).abs() < 1e-6);
            assert_eq!(t[r * n], 1.0);
            for i in 1..n {
                assert!(t[r * n + i] <= t[r * n + i - 1] + 1e-15);
                assert!(w[r * n + i] >= 0.0);
            }
        }
    }

    #[test]
    fn homogeneous_medium_closed_form() {
        // Constant sigma and color over length L telescopes exactly to
        // c * (1 - exp(-sigma L)) for any sample count.
        for n in [2usize, 48, 96] {
            let mut sess = Session::<f64>::new();
            let sigma_v = 0.7;
            let l = 2.0;
            let sigma = sess.tape.constant(&[1, n], vec![sigma_v; n]);
            let delta = sess.tape.constant(&[1, n], vec![l / n as f64; n]);
            let c = sess.tape.constant(&[1, n], vec![0.4; n]);
            let out = composite(&mut sess, sigma, [c, c, c], delta);
            let expect = 0.4 * (1.0 - (-sigma_v * l).exp());
            let got = sess.tape.value(out.rgb[0])[0];
            assert!((got - expect).abs() < 1e-6, "N={} {} vs {}", n, got, expect);
        }
    }

    #[test]
    fn composite_gradcheck() {
        let err = gradcheck(
            |tape, ids| {
                let mut sess = Session::new();
                std::mem::swap(&mut sess.tape, tape);
                let relu_s = sess.tape.relu(ids[0]);
                let cs = sess.tape.sigmoid(ids[1]);
                let delta = sess.tape.constant(&[2, 4], vec![0.3; 8]);
                let out = composite(&mut sess, relu_s, [cs, cs, cs], delta);
                let sum_r = sess.tape.sum_all(out.rgb[0]);
                let sum_a = sess.tape.sum_all(out.accumulation);
                let loss = sess.tape.add(sum_r, sum_a);
                std::mem::swap(&mut sess.tape, tape);
                loss
            },
            &[
                (vec![2, 4], (0..8).map(|i| 0.5 + (i as f64 * 0.7).sin()).collect()),
                (vec![2, 4], (0..8).map(|i| (i as f64 * 0.3).cos()).collect()),
            ],
            1e-5,
        );
        assert!(err <= 1e-4, "composite gradcheck {}", err);
    }

    fn test_pose(w: usize, h: usize) -> CameraPose {
        CameraPose::look_at([0.0, 0.0, -2.5], [0.0, 0.0, 0.0], 1.2, (w, h))
    }

    #[test]
    fn empty_field_renders_background() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = RendererMlp::new(&mut store, "mlp", 2, 8, &mut rng);
        let vm = VmData {
            v: std::array::from_fn(|_| vec![0.0; 6 * 2]),
            m: std::array::from_fn(|_| vec![0.0; 36 * 2]),
            resolution: 6,
            channels: 2,
        };
        let pose = test_pose(16, 12);
        let opts =
            RenderOptions { n_samples: 8, stratified: false, background: [0.2, 0.4, 0.6] };
        let (rgb, _depth, acc) = render_image(&store, &vm, &mlp, &pose, &opts);
        for p in 0..16 * 12 {
            assert!((rgb[p * 3] - 0.2).abs() < 1e-12);
            assert!((rgb[p * 3 + 1] - 0.4).abs() < 1e-12);
            assert!((rgb[p * 3 + 2] - 0.6).abs() < 1e-12);
            assert!(acc[p].abs() < 1e-12);
        }
    }

    /// Dense solid slab built directly in the VM factors: V_x selects a band
    /// of x nodes, M_yz constant. Its rendered silhouette from a head-on
    /// camera must match the analytic projection of the slab.
    #[test]
    fn slab_silhouette_matches_projection() {
        let r = 16;
        let k = 1;
        let mut v_x = vec![0.0; r];
        // Slab occupying x in [-0.2, 0.2]: nodes with |x_i| <= 0.2.
        for i in 0..r {
            let x = -1.0 + 2.0 * i as f64 / (r - 1) as f64;
            if x.abs() <= 0.2 {
                v_x[i] = 50.0; // dense
            }
        }
        let vm = VmData::<f64> {
            v: [v_x, vec![0.0; r], vec![0.0; r]],
            m: [vec![1.0; r * r], vec![0.0; r * r], vec![0.0; r * r]],
            resolution: r,
            channels: k,
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = RendererMlp::new(&mut store, "mlp", k, 8, &mut rng);
        let (w, h) = (48usize, 48usize);
        // Camera on +z looking back along -z; x spans the image horizontally.
        let pose = CameraPose::look_at([0.0, 0.0, 3.0], [0.0, 0.0, 0.0], 1.5, (w, h));
        let opts =
            RenderOptions { n_samples: 64, stratified: false, background: [0.0, 0.0, 0.0] };
        let (_rgb, _depth, acc) = render_image(&store, &vm, &mlp, &pose, &opts);
        // Analytic: pixel u is opaque iff its ray passes through |x| <= ~0.2
        // at some depth; for a head-on camera rays hit the slab iff the
        // direction x/z slope reaches the slab within the box. Project the
        // slab edges: x = ±0.2 at z = 0 maps to u = cx ± F*0.2/3.
        let f_pixels = 1.5 * w as f64;
        let mid_row = h / 2;
        for u in 0..w {
            let x_slope = (u as f64 + 0.5 - w as f64 / 2.0) / f_pixels;
            // Ray: origin (0,0,3), dir ∝ (x_slope, y_slope, -1). Crosses the
            // slab if |x| <= 0.2 + interpolation widening for some z in [-1,1].
            let widen = 2.0 / (r - 1) as f64; // one cell of trilinear falloff
            let x_at = |z: f64| x_slope * (3.0 - z);
            let hits = (-10..=10)
                .map(|i| i as f64 / 10.0)
                .any(|z| x_at(z).abs() <= 0.2 + widen);
            let solid = acc[mid_row * w + u] > 0.5;
            let misses = (-10..=10)
                .map(|i| i as f64 / 10.0)
                .all(|z| x_at(z).abs() > 0.2 + widen);
            if hits && x_at(1.0).abs() <= 0.2 {
                assert!(solid, "pixel {} should be opaque (acc {})", u, acc[mid_row * w + u]);
            }
            if misses {
                assert!(!solid, "pixel {} should be empty (acc {})", u, acc[mid_row * w + u]);
            }
        }
    }

    #[test]
    fn doubling_samples_changes_smooth_scene_little() {
        let r = 8;
        let k = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vm = VmData::<f64> {
            v: std::array::from_fn(|_| (0..r * k).map(|_| rng.gen_range(0.0..0.4)).collect()),
            m: std::array::from_fn(|_| (0..r * r * k).map(|_| rng.gen_range(0.0..0.4)).collect()),
            resolution: r,
            channels: k,
        };
        let mut store = ParamStore::<f64>::new();
        let mlp = RendererMlp::new(&mut store, "mlp", k, 8, &mut rng);
        let pose = test_pose(24, 24);
        let render = |n: usize| {
            let opts =
                RenderOptions { n_samples: n, stratified: false, background: [1.0, 1.0, 1.0] };
            render_image(&store, &vm, &mlp, &pose, &opts).0
        };
        let a = render(48);
        let b = render(96);
        let mae: f64 =
            a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        assert!(mae < 1e-2, "quadrature refinement MAE {}", mae);
    }
}

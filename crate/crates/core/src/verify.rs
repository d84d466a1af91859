//! Numeric verification suites: every check recomputes an independent
//! oracle at 64-bit and reports its worst error against the implementation.
//! Used by the CLI `verify` command.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{
    add3, axis_angle, conditioned_input_center, generate_ray, generate_rays, matmul3, matvec,
    norm3, project, relativize_pose, sub3, CameraPose, IDENTITY,
};
use crate::error::{Error, Result};
use crate::loss::distortion_loss;
use crate::model::{ModelConfig, NvistModel};
use crate::render::{
    composite, query_vm, render_rays, RenderOptions, VMRepresentation, VmData, FIELD_BOUND,
};
use crate::scene::BACKGROUND;
use crate::tensor::{gradcheck, gradcheck_params, ParamStore, Session, Tape, TensorId};

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn pass(&self) -> bool {
        self.max_err <= self.tolerance
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<CheckReport>,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(CheckReport::pass)
    }
}

pub const SUITES: [&str; 4] = ["gradcheck", "vm", "compositing", "pose"];

pub fn run_suite(name: &str) -> Result<SuiteReport> {
    let checks = match name {
        "gradcheck" => gradcheck_suite(),
        "vm" => vm_suite(),
        "compositing" => compositing_suite(),
        "pose" => pose_suite(),
        other => {
            return Err(Error::Config(format!(
                "unknown verification suite '{}' (have: {})",
                other,
                SUITES.join(", ")
            )))
        }
    };
    Ok(SuiteReport { suite: name.to_string(), checks })
}

pub fn run_all() -> Vec<SuiteReport> {
    SUITES.iter().map(|s| run_suite(s).expect("built-in suite")).collect()
}

fn check(name: &str, max_err: f64, tolerance: f64) -> CheckReport {
    CheckReport { name: name.to_string(), max_err, tolerance }
}

// --- gradcheck -----------------------------------------------------------

/// Image -> encoder -> decoder -> renderer -> photometric + distortion
/// loss at the smallest meaningful dimensions.
pub fn pipeline_loss(store: &ParamStore<f64>, sess: &mut Session<f64>, model: &NvistModel) -> TensorId {
    let cfg = ModelConfig::gradcheck_toy();
    let (w, h) = (cfg.encoder.image_width, cfg.encoder.image_height);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let img: Vec<f64> = (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect();

    let input_pose = CameraPose::look_at([0.4, -0.3, -2.0], [0.0, 0.0, 0.0], 1.0, (w, h));
    let target_pose = CameraPose::look_at([-0.5, 0.2, -1.9], [0.0, 0.0, 0.0], 1.0, (w, h));
    let z = norm3(input_pose.center);
    let rel = relativize_pose(&input_pose, &target_pose, z).expect("valid poses");
    let cond = crate::camera::encode_conditioning(input_pose.focal, z).expect("valid conditioning");

    let image = sess.tape.constant(&[img.len()], img);
    let (f, c) = model.encoder.encode(store, sess, image);
    let vm = model.decoder.decode(store, sess, f, c, &cond);
    let pixels = [(3, 3), (4, 4), (3, 4), (2, 3)];
    let rays = generate_rays(&rel, &pixels);
    let opts = RenderOptions { n_samples: 4, stratified: false, background: BACKGROUND };
    let out = render_rays(store, sess, &vm, &model.renderer, &rays, &opts, &mut rng);
    assert!(!out.hit.is_empty(), "verification rays must hit the field bounds");

    let target: Vec<f64> = (0..out.hit.len() * 3).map(|i| 0.15 + 0.07 * i as f64).collect();
    let mut loss = None;
    for (ch, &t) in out.rgb.iter().enumerate() {
        let tgt: Vec<f64> = target.iter().skip(ch).step_by(3).copied().collect();
        let tv = sess.tape.constant(&[out.hit.len()], tgt);
        let neg = sess.tape.neg(tv);
        let diff = sess.tape.add(t, neg);
        let sq = sess.tape.mul(diff, diff);
        let s = sess.tape.sum_all(sq);
        loss = Some(match loss {
            Some(acc) => sess.tape.add(acc, s),
            None => s,
        });
    }
    let n = out.n_samples;
    let mut s_mid = Vec::new();
    let mut s_width = Vec::new();
    for (row, &(t0, t1)) in out.t_range.iter().enumerate() {
        let span = (t1 - t0).max(1e-12);
        for i in 0..n {
            s_mid.push((out.t[row * n + i] - t0) / span);
            s_width.push(out.deltas[row * n + i] / span);
        }
    }
    let dist = distortion_loss(sess, out.weights, &s_mid, &s_width);
    let dist_scaled = sess.tape.mul_scalar(dist, 0.01);
    sess.tape.add(loss.unwrap(), dist_scaled)
}

fn gradcheck_suite() -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut out = Vec::new();

    let rand_mat = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        (vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(0.2..1.2)).collect::<Vec<f64>>())
    };

    let a = rand_mat(3, 4, &mut rng);
    let b = rand_mat(4, 3, &mut rng);
    let err = gradcheck(
        |tape: &mut Tape<f64>, ids| {
            let mm = tape.matmul(ids[0], ids[1]);
            let s = tape.sum_all(mm);
            tape.mul(s, s)
        },
        &[a.clone(), b.clone()],
        1e-6,
    );
    out.push(check("matmul", err, 1e-4));

    let err = gradcheck(
        |tape: &mut Tape<f64>, ids| {
            let sm = tape.softmax(ids[0], 1);
            let lg = tape.ln(sm);
            let w = tape.mul(sm, lg);
            tape.sum_all(w)
        },
        &[a.clone()],
        1e-6,
    );
    out.push(check("softmax-entropy", err, 1e-4));

    let err = gradcheck(
        |tape: &mut Tape<f64>, ids| {
            let ex = tape.exp(ids[0]);
            let sq = tape.sqrt(ex);
            let sg = tape.sigmoid(sq);
            let sn = tape.sin(sg);
            let rc = tape.recip(sn);
            tape.sum_all(rc)
        },
        &[a.clone()],
        1e-6,
    );
    out.push(check("elementwise-chain", err, 1e-4));

    let err = gradcheck(
        |tape: &mut Tape<f64>, ids| {
            let tr = tape.transpose(ids[0]);
            let cat = tape.concat(&[tr, ids[1]], 1);
            let ga = tape.gather_rows(cat, Arc::new(vec![0, 2, 3, 1]));
            let cs = tape.cumsum_exclusive(ga, 1);
            let m = tape.mean_axis(cs, 0);
            tape.sum_all(m)
        },
        &[a.clone(), b.clone()],
        1e-6,
    );
    out.push(check("reshape-gather-cumsum", err, 1e-4));

    let cfg = ModelConfig::gradcheck_toy();
    let mut store = ParamStore::<f64>::new();
    let model = NvistModel::new(&mut store, &cfg, &mut rng);
    // The conditioning gates are zero-initialized; jitter every parameter so
    // all paths carry gradient.
    for p in store.entries.iter_mut() {
        for v in p.data.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let err = gradcheck_params(|s, sess| pipeline_loss(s, sess, &model), &store, 1e-5);
    out.push(check("full-pipeline", err, 1e-4));
    out
}

// --- vm ------------------------------------------------------------------

/// Densely materialize the factored field on the full R^3 grid.
pub fn dense_grid(vm: &VmData<f64>) -> Vec<f64> {
    let (r, k) = (vm.resolution, vm.channels);
    let mut g = vec![0.0; r * r * r * k];
    for x in 0..r {
        for y in 0..r {
            for z in 0..r {
                let coords = [x, y, z];
                for axis in 0..3 {
                    let b1 = coords[(axis + 1) % 3];
                    let b2 = coords[(axis + 2) % 3];
                    for c in 0..k {
                        g[((x * r + y) * r + z) * k + c] += vm.v[axis][coords[axis] * k + c]
                            * vm.m[axis][(b1 * r + b2) * k + c];
                    }
                }
            }
        }
    }
    g
}

/// Trilinear interpolation on the dense grid at a world position.
pub fn trilinear(grid: &[f64], r: usize, k: usize, p: [f64; 3]) -> Vec<f64> {
    let gc: Vec<f64> =
        p.iter().map(|&x| (x + FIELD_BOUND) / (2.0 * FIELD_BOUND) * (r - 1) as f64).collect();
    let i0: Vec<usize> = gc.iter().map(|&c| (c.floor() as usize).min(r - 2)).collect();
    let f: Vec<f64> = gc.iter().zip(&i0).map(|(&c, &i)| c - i as f64).collect();
    let mut out = vec![0.0; k];
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if corner >> a & 1 == 1 {
                idx[a] = i0[a] + 1;
                w *= f[a];
            } else {
                idx[a] = i0[a];
                w *= 1.0 - f[a];
            }
        }
        let base = ((idx[0] * r + idx[1]) * r + idx[2]) * k;
        for c in 0..k {
            out[c] += w * grid[base + c];
        }
    }
    out
}

fn vm_suite() -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut out = Vec::new();
    for &r in &[2usize, 4, 8] {
        for &k in &[1usize, 2, 4] {
            let data = VmData {
                v: std::array::from_fn(|_| (0..r * k).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                m: std::array::from_fn(|_| {
                    (0..r * r * k).map(|_| rng.gen_range(-1.0..1.0)).collect()
                }),
                resolution: r,
                channels: k,
            };
            let grid = dense_grid(&data);
            let points: Vec<[f64; 3]> = (0..100)
                .map(|_| std::array::from_fn(|_| rng.gen_range(-FIELD_BOUND..FIELD_BOUND)))
                .collect();
            let mut sess = Session::<f64>::new();
            let vm = VMRepresentation::from_values(&mut sess, &data);
            let q = query_vm(&mut sess, &vm, &points);
            let qv = sess.tape.value(q);
            let mut worst: f64 = 0.0;
            for (i, p) in points.iter().enumerate() {
                let oracle = trilinear(&grid, r, k, *p);
                for c in 0..k {
                    worst = worst.max((qv[i * k + c] - oracle[c]).abs());
                }
            }
            out.push(check(&format!("dense-grid-equivalence-r{r}-k{k}"), worst, 1e-5));
        }
    }
    out
}

// --- compositing ---------------------------------------------------------

fn compositing_suite() -> Vec<CheckReport> {
    let mut out = Vec::new();

    let (sigma, l) = (1.3f64, 2.0f64);
    let color = [0.2, 0.5, 0.8];
    for &n in &[2usize, 48, 96] {
        let mut sess = Session::<f64>::new();
        let s = sess.tape.constant(&[1, n], vec![sigma; n]);
        let d = sess.tape.constant(&[1, n], vec![l / n as f64; n]);
        let cols = color.map(|c| sess.tape.constant(&[1, n], vec![c; n]));
        let res = composite(&mut sess, s, cols, d);
        let mut worst: f64 = 0.0;
        for ch in 0..3 {
            let got = sess.tape.value(res.rgb[ch])[0];
            let want = color[ch] * (1.0 - (-sigma * l).exp());
            worst = worst.max((got - want).abs());
        }
        out.push(check(&format!("homogeneous-closed-form-n{n}"), worst, 1e-6));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (rays, n) = (16usize, 33usize);
    let sv: Vec<f64> = (0..rays * n).map(|_| rng.gen_range(0.0..4.0)).collect();
    let dv: Vec<f64> = (0..rays * n).map(|_| rng.gen_range(1e-3..0.2)).collect();
    let mut sess = Session::<f64>::new();
    let s = sess.tape.constant(&[rays, n], sv.clone());
    let d = sess.tape.constant(&[rays, n], dv.clone());
    let cols = [0, 1, 2].map(|_| sess.tape.constant(&[rays, n], vec![0.5; rays * n]));
    let res = composite(&mut sess, s, cols, d);
    let acc = sess.tape.value(res.accumulation);
    let w = sess.tape.value(res.weights);
    let mut worst_sum: f64 = 0.0;
    let mut worst_range: f64 = 0.0;
    for r in 0..rays {
        let opt: f64 = (0..n).map(|i| sv[r * n + i] * dv[r * n + i]).sum();
        worst_sum = worst_sum.max((acc[r] - (1.0 - (-opt).exp())).abs());
        for i in 0..n {
            let wi = w[r * n + i];
            worst_range = worst_range.max((-wi).max(wi - 1.0));
        }
    }
    out.push(check("weight-sum-identity", worst_sum, 1e-6));
    out.push(check("weights-in-unit-interval", worst_range.max(0.0), 0.0));
    out
}

// --- pose ----------------------------------------------------------------

fn pose_suite() -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut out = Vec::new();

    let input = CameraPose::look_at([0.3, 0.8, -1.9], [0.0, 0.1, 0.0], 1.1, (48, 48));
    let target = CameraPose::look_at([1.5, -0.2, 1.1], [-0.1, 0.0, 0.0], 1.1, (48, 48));
    let z = 2.0;
    let base = relativize_pose(&input, &target, z).expect("valid poses");
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let axis = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let rot = axis_angle(axis, rng.gen_range(-3.0..3.0));
        let t = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let xf = |p: &CameraPose| CameraPose {
            rotation: matmul3(&rot, &p.rotation),
            center: add3(matvec(&rot, p.center), t),
            ..p.clone()
        };
        let rel = relativize_pose(&xf(&input), &xf(&target), z).expect("valid poses");
        for (a, b) in rel.rotation.iter().zip(base.rotation.iter()) {
            worst = worst.max((a - b).abs());
        }
        worst = worst.max(norm3(sub3(rel.center, base.center)));
    }
    out.push(check("rigid-transform-invariance", worst, 1e-6));

    let self_rel = relativize_pose(&input, &input, z).expect("valid pose");
    let exact = self_rel.rotation == IDENTITY && self_rel.center == conditioned_input_center(z);
    out.push(check("self-relativization-exact", if exact { 0.0 } else { 1.0 }, 0.0));

    // Project the ray through each pixel center back into that pixel.
    let mut worst_px: f64 = 0.0;
    for v in 0..48 {
        for u in 0..48 {
            let ray = generate_ray(&input, u, v);
            let p = add3(ray.origin, crate::camera::scale3(ray.direction, 3.0));
            let (pu, pv) = project(&input, p).expect("point in front of camera");
            worst_px = worst_px
                .max((pu - (u as f64 + 0.5)).abs())
                .max((pv - (v as f64 + 0.5)).abs());
        }
    }
    out.push(check("ray-projection-roundtrip", worst_px, 1e-9));
    out
}

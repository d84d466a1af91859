//! Acceptance gate: one test per criterion, each printing a single
//! `criterion N: PASS/FAIL` line (run with `--nocapture`). Criteria 5 and 6
//! involve long training runs and are `#[ignore]`d by default; run them with
//! `cargo test --release --test acceptance -- --ignored --nocapture`.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nvist_core::camera::{
    add3, axis_angle, conditioned_input_center, generate_rays, matmul3, matvec, norm3,
    relativize_pose, sub3, CameraPose, IDENTITY,
};
use nvist_core::loss::distortion_loss;
use nvist_core::model::{count_parameters, ModelConfig, NvistModel};
use nvist_core::render::{
    composite, query_vm, render_rays, RenderOptions, VMRepresentation, VmData, FIELD_BOUND,
};
use nvist_core::scene::{generate_dataset, DatasetOptions, BACKGROUND};
use nvist_core::tensor::{gradcheck, gradcheck_params, ParamStore, Session, Tape};
use nvist_core::train::{evaluate, load_checkpoint, save_checkpoint, train, Dataset, Harness, TrainConfig};

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    println!("criterion {n} ({name}): {} — {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

/// Process CPU time. The long criteria budget compute, not wall time: on a
/// shared core, wall time measures the neighbours as much as the program.
fn cpu_seconds() -> f64 {
    let stat = std::fs::read_to_string("/proc/self/stat").unwrap();
    let f: Vec<&str> = stat.split_whitespace().collect();
    let ticks: u64 = f[13].parse::<u64>().unwrap() + f[14].parse::<u64>().unwrap();
    ticks as f64 / 100.0
}

// --- criterion 1: gradient correctness -----------------------------------

/// Image -> encoder -> decoder -> renderer -> photometric + distortion loss,
/// at the smallest meaningful dimensions, differentiated w.r.t. every
/// trainable parameter.
fn pipeline_loss(
    store: &ParamStore<f64>,
    sess: &mut Session<f64>,
    model: &NvistModel,
) -> nvist_core::tensor::TensorId {
    let cfg = ModelConfig::gradcheck_toy();
    let (w, h) = (cfg.encoder.image_width, cfg.encoder.image_height);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let img: Vec<f64> = (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect();

    let input_pose = CameraPose::look_at([0.4, -0.3, -2.0], [0.0, 0.0, 0.0], 1.0, (w, h));
    let target_pose = CameraPose::look_at([-0.5, 0.2, -1.9], [0.0, 0.0, 0.0], 1.0, (w, h));
    let z = norm3(input_pose.center);
    let rel = relativize_pose(&input_pose, &target_pose, z).unwrap();
    let cond = nvist_core::camera::encode_conditioning(input_pose.focal, z).unwrap();

    let image = sess.tape.constant(&[img.len()], img);
    let (f, c) = model.encoder.encode(store, sess, image);
    let vm = model.decoder.decode(store, sess, f, c, &cond);
    let pixels = [(3, 3), (4, 4), (3, 4), (2, 3)];
    let rays = generate_rays(&rel, &pixels);
    let opts = RenderOptions { n_samples: 4, stratified: false, background: BACKGROUND };
    let out = render_rays(store, sess, &vm, &model.renderer, &rays, &opts, &mut rng);
    assert!(!out.hit.is_empty(), "gradcheck rays must hit the field bounds");

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

#[test]
fn criterion_1_gradient_correctness() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // Elementwise, reduction, reshaping, and attention-adjacent ops chained
    // through one scalar map.
    let op_err = {
        let mut data = Vec::new();
        for _ in 0..12 {
            data.push(rng.gen_range(0.2..1.2));
        }
        let a = (vec![3, 4], data.clone());
        let b = (vec![4, 3], data.iter().map(|v| v * 0.7 + 0.1).collect());
        gradcheck(
            |tape: &mut Tape<f64>, ids| {
                let mm = tape.matmul(ids[0], ids[1]);
                let sm = tape.softmax(mm, 1);
                let tr = tape.transpose(sm);
                let rs = tape.reshape(tr, &[1, 9]);
                let ex = tape.exp(rs);
                let ln = tape.ln(ex);
                let sg = tape.sigmoid(ln);
                let cs = tape.cumsum_exclusive(sg, 1);
                let ga = tape.gather_rows(ids[0], Arc::new(vec![0, 2, 1]));
                let gs = tape.sum_all(ga);
                let total = tape.sum_all(cs);
                tape.add(total, gs)
            },
            &[a, b],
            1e-6,
        )
    };

    // Full pipeline at toy dims. The decoder's conditioning gates are
    // zero-initialized, so jitter every parameter first to make all paths
    // carry gradient.
    let cfg = ModelConfig::gradcheck_toy();
    let mut store = ParamStore::<f64>::new();
    let model = NvistModel::new(&mut store, &cfg, &mut rng);
    for p in store.entries.iter_mut() {
        for v in p.data.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let pipe_err = gradcheck_params(|s, sess| pipeline_loss(s, sess, &model), &store, 1e-5);

    let secs = t0.elapsed().as_secs_f64();
    let pass = op_err <= 1e-4 && pipe_err <= 1e-4 && secs <= 300.0;
    report(
        1,
        "gradient correctness",
        pass,
        &format!("op-chain max rel err {op_err:.2e}, pipeline max rel err {pipe_err:.2e}, {secs:.0}s (budget 300s), tolerance 1e-4"),
    );
}

// --- criterion 2: VM oracle equivalence ----------------------------------

/// Densely materialize the factored field on the full R^3 grid, then
/// trilinearly interpolate it — an oracle independent of query_vm's
/// axis-separable interpolation path.
fn dense_grid(vm: &VmData<f64>) -> Vec<f64> {
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

fn trilinear(grid: &[f64], r: usize, k: usize, p: [f64; 3]) -> Vec<f64> {
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

#[test]
fn criterion_2_vm_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
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
            for (i, p) in points.iter().enumerate() {
                let oracle = trilinear(&grid, r, k, *p);
                for c in 0..k {
                    worst = worst.max((qv[i * k + c] - oracle[c]).abs());
                }
            }
        }
    }
    report(
        2,
        "VM / dense-grid equivalence",
        worst <= 1e-5,
        &format!("max abs err {worst:.2e} over R in {{2,4,8}}, k in {{1,2,4}}, 100 points each, tolerance 1e-5"),
    );
}

// --- criterion 3: quadrature identities ----------------------------------

#[test]
fn criterion_3_quadrature_identities() {
    // Homogeneous medium: constant sigma and color over length L matches
    // c * (1 - exp(-sigma L)) for any sample count.
    let (sigma, l) = (1.3f64, 2.0f64);
    let color = [0.2, 0.5, 0.8];
    let mut worst_h: f64 = 0.0;
    for &n in &[2usize, 48, 96] {
        let mut sess = Session::<f64>::new();
        let s = sess.tape.constant(&[1, n], vec![sigma; n]);
        let d = sess.tape.constant(&[1, n], vec![l / n as f64; n]);
        let cols = color.map(|c| sess.tape.constant(&[1, n], vec![c; n]));
        let out = composite(&mut sess, s, cols, d);
        for ch in 0..3 {
            let got = sess.tape.value(out.rgb[ch])[0];
            let want = color[ch] * (1.0 - (-sigma * l).exp());
            worst_h = worst_h.max((got - want).abs());
        }
    }

    // Weight-sum identity on random inhomogeneous rays.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (rays, n) = (16usize, 33usize);
    let sv: Vec<f64> = (0..rays * n).map(|_| rng.gen_range(0.0..4.0)).collect();
    let dv: Vec<f64> = (0..rays * n).map(|_| rng.gen_range(1e-3..0.2)).collect();
    let mut sess = Session::<f64>::new();
    let s = sess.tape.constant(&[rays, n], sv.clone());
    let d = sess.tape.constant(&[rays, n], dv.clone());
    let cols = [0, 1, 2].map(|_| sess.tape.constant(&[rays, n], vec![0.5; rays * n]));
    let out = composite(&mut sess, s, cols, d);
    let acc = sess.tape.value(out.accumulation);
    let mut worst_w: f64 = 0.0;
    for r in 0..rays {
        let opt: f64 = (0..n).map(|i| sv[r * n + i] * dv[r * n + i]).sum();
        worst_w = worst_w.max((acc[r] - (1.0 - (-opt).exp())).abs());
    }

    report(
        3,
        "rendering quadrature identities",
        worst_h <= 1e-6 && worst_w <= 1e-6,
        &format!("homogeneous closed-form err {worst_h:.2e} (N in {{2,48,96}}), weight-sum err {worst_w:.2e}, tolerance 1e-6"),
    );
}

// --- criterion 4: token / parameter arithmetic ---------------------------

#[test]
fn criterion_4_token_and_parameter_arithmetic() {
    let cfg = ModelConfig::paper();
    let ft = cfg.encoder.feature_token_count();
    let ot = cfg.decoder.output_token_count();
    let mh = cfg.decoder.matrix_head_width();
    let vh = cfg.decoder.vector_head_width();
    let counts = count_parameters(&cfg);
    let enc_ok = (counts.encoder as f64 - 85e6).abs() / 85e6 <= 0.10;
    let dec_ok = (counts.decoder as f64 - 131e6).abs() / 131e6 <= 0.10;
    let pass = ft == 576 && ot == 816 && mh == 288 && vh == 96 && enc_ok && dec_ok;
    report(
        4,
        "token/parameter arithmetic",
        pass,
        &format!(
            "feature tokens {ft} (want 576), output tokens {ot} (want 816), head widths {mh}/{vh} (want 288/96), encoder {}M / decoder {}M params (want 85M/131M within 10%)",
            counts.encoder / 1_000_000,
            counts.decoder / 1_000_000
        ),
    );
}

// --- criterion 5: overfit capacity (long; run with --ignored) ------------

#[test]
#[ignore = "trains for 2000 steps (~30 min); run explicitly"]
fn criterion_5_overfit_capacity() {
    // Threshold frozen from the recorded baseline run of exactly this
    // configuration. Context for the magnitude: fitting a single scene's VM
    // factors directly (no encoder/decoder, ground-truth poses, 1200 steps)
    // tops out near 22 dB at this field resolution, and the conditional
    // model must additionally infer orientation from the input view — every
    // (scene, input view) pair is a distinct field in the input camera's
    // frame. 2000 steps recover a coarse but clearly scene- and
    // pose-dependent reconstruction, not a sharp overfit.
    let threshold = 13.5;
    let t0 = Instant::now();
    let c0 = cpu_seconds();
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let opts = DatasetOptions { n_scenes: 2, holdout_stride: 0, ..DatasetOptions::default() };
    generate_dataset(&data_dir, &opts).unwrap();
    let data = Dataset::load(&data_dir).unwrap();

    let cfg = TrainConfig {
        total_steps: 2000,
        pixels_per_step: 320,
        n_samples: 32,
        seed: 1,
        ..TrainConfig::default()
    };
    let h: Harness<f32> = train(&data, &cfg, &dir.path().join("run"), false, None).unwrap();
    let rep = evaluate(&h, &data, &[0, 1], 48).unwrap();
    let cpu = cpu_seconds() - c0;
    let pass = rep.mean_psnr >= threshold && cpu <= 1800.0;
    report(
        5,
        "2-scene overfit capacity",
        pass,
        &format!(
            "train-view PSNR {:.2} dB (threshold {threshold}), SSIM {:.3}, cpu {:.0}s (budget 1800s, wall {:.0}s)",
            rep.mean_psnr, rep.mean_ssim, cpu, t0.elapsed().as_secs_f64()
        ),
    );
}

// --- criterion 6: generalization smoke (long; run with --ignored) --------

#[test]
#[ignore = "two 20K-step training runs (hours); run explicitly"]
fn criterion_6_generalization_direction() {
    let t0 = Instant::now();
    let c0 = cpu_seconds();
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    generate_dataset(&data_dir, &DatasetOptions::default()).unwrap();
    let data = Dataset::load(&data_dir).unwrap();
    let holdout = data.manifest.test_indices();

    // 256 pixels / 24 samples per step keep the two 20K-step runs inside the
    // compute budget on one core (about 0.66 cpu-seconds per step); rays are
    // resampled every step so coverage is unaffected.
    let cfg = TrainConfig {
        total_steps: 20_000,
        pixels_per_step: 256,
        n_samples: 24,
        seed: 7,
        checkpoint_stride: 2000,
        ..TrainConfig::default()
    };
    let full: Harness<f32> = train(&data, &cfg, &dir.path().join("full"), false, None).unwrap();
    let full_rep = evaluate(&full, &data, &holdout, 48).unwrap();

    let frozen_cfg = TrainConfig { freeze_encoder: true, ..cfg.clone() };
    let frozen: Harness<f32> =
        train(&data, &frozen_cfg, &dir.path().join("frozen"), false, None).unwrap();
    let frozen_rep = evaluate(&frozen, &data, &holdout, 48).unwrap();

    let cpu = cpu_seconds() - c0;
    let margin = full_rep.mean_psnr - full_rep.baseline_psnr;
    let pass = margin >= 5.0 && full_rep.mean_psnr > frozen_rep.mean_psnr && cpu <= 8.0 * 3600.0;
    report(
        6,
        "held-out generalization direction",
        pass,
        &format!(
            "held-out PSNR {:.2} dB vs background baseline {:.2} (margin {:.2}, need >= 5), frozen-encoder ablation {:.2} dB, cpu {:.1}h (budget 8h, wall {:.1}h)",
            full_rep.mean_psnr,
            full_rep.baseline_psnr,
            margin,
            frozen_rep.mean_psnr,
            cpu / 3600.0,
            t0.elapsed().as_secs_f64() / 3600.0
        ),
    );
}

// --- criterion 7: pose-model properties ----------------------------------

#[test]
fn criterion_7_pose_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let input = CameraPose::look_at([0.3, 0.8, -1.9], [0.0, 0.1, 0.0], 1.1, (48, 48));
    let target = CameraPose::look_at([1.5, -0.2, 1.1], [-0.1, 0.0, 0.0], 1.1, (48, 48));
    let z = 2.0;
    let base = relativize_pose(&input, &target, z).unwrap();
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
        let rel = relativize_pose(&xf(&input), &xf(&target), z).unwrap();
        for (a, b) in rel.rotation.iter().zip(base.rotation.iter()) {
            worst = worst.max((a - b).abs());
        }
        worst = worst.max(norm3(sub3(rel.center, base.center)));
    }

    let self_rel = relativize_pose(&input, &input, z).unwrap();
    let exact = self_rel.rotation == IDENTITY && self_rel.center == conditioned_input_center(z);

    report(
        7,
        "relative-pose properties",
        worst <= 1e-6 && exact,
        &format!("rigid-transform invariance max err {worst:.2e} over 1000 transforms (tolerance 1e-6), self-relativization exact: {exact}"),
    );
}

// --- criterion 8: determinism and persistence ----------------------------

#[test]
fn criterion_8_determinism_and_persistence() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let opts = DatasetOptions { n_scenes: 2, holdout_stride: 0, ..DatasetOptions::default() };
    generate_dataset(&data_dir, &opts).unwrap();
    let data = Dataset::load(&data_dir).unwrap();

    let cfg = TrainConfig {
        total_steps: 25,
        pixels_per_step: 256,
        n_samples: 16,
        seed: 9,
        checkpoint_stride: 0,
        ..TrainConfig::default()
    };
    let h: Harness<f32> = train(&data, &cfg, &dir.path().join("a"), false, None).unwrap();
    let _ = train::<f32>(&data, &cfg, &dir.path().join("b"), false, None).unwrap();
    let csv_a = std::fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let csv_b = std::fs::read(dir.path().join("b/metrics.csv")).unwrap();
    let csv_ok = csv_a == csv_b;

    // save -> load into a fresh store -> save again must be byte-identical.
    let p1 = dir.path().join("ck1.nvst");
    let p2 = dir.path().join("ck2.nvst");
    save_checkpoint(&p1, &h.store, Some(&h.opt)).unwrap();
    let mut h2: Harness<f32> = Harness::new(&cfg);
    let step = load_checkpoint(&p1, &mut h2.store, Some(&mut h2.opt)).unwrap();
    save_checkpoint(&p2, &h2.store, Some(&h2.opt)).unwrap();
    let ck_ok = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();

    let secs = t0.elapsed().as_secs_f64();
    let pass = csv_ok && ck_ok && step == 25 && secs <= 600.0;
    report(
        8,
        "determinism and persistence",
        pass,
        &format!("identical metric CSVs: {csv_ok}, checkpoint save/load/save byte-identical: {ck_ok}, resumed step {step}, {secs:.0}s (budget 600s)"),
    );
}

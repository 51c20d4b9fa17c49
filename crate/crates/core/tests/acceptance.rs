//! Acceptance suite: one PASS/FAIL line per criterion, each with its
//! tolerance. Exits non-zero when any criterion fails.

mod common;

use std::path::Path;
use std::time::Instant;

use common::{default_basis, default_model};
use morphfit::compositor::{blend, dilate, BlendConfig};
use morphfit::fitting::{fit_image, fit_joint, FitConfig};
use morphfit::ganmath::*;
use morphfit::io;
use morphfit::linalg::CsrMatrix;
use morphfit::model::{BilinearModel, ModelParts, SemanticLabel};
use morphfit::pipeline::{self, PipelineConfig};
use morphfit::raster::*;
use morphfit::shapenet::{mlp_gradient, mlp_init, MlpParams};
use morphfit::spectral::{eigenbasis, graph_laplacian, DisplacementField};
use morphfit::synthkit::{benchmark_shape_branch, evaluate_rmse, procedural_texture, sample_coefficients, sample_scene, scene_from, BenchmarkConfig, SceneOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- model

fn random_model(n: usize, n_a: usize, n_e: usize, rng: &mut ChaCha8Rng) -> BilinearModel {
    let tensor = (0..3 * n * n_a * n_e).map(|_| rng.random_range(-5.0..5.0)).collect();
    BilinearModel::new(ModelParts {
        n_vertices: n,
        n_identity: n_a,
        n_expression: n_e,
        tensor,
        triangles: (1..n as u32 - 1).map(|i| [0, i, i + 1]).collect(),
        uv: (0..n).map(|_| [rng.random(), rng.random()]).collect(),
        semantic: vec![SemanticLabel::Other.id(); n],
        landmarks: (0..n as u32).collect(),
        neutral_expression: (0..n_e).map(|j| (j == 0) as u8 as f64).collect(),
    })
    .unwrap()
}

fn contraction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (n, n_a, n_e) = (rng.random_range(3..20), rng.random_range(1..8), rng.random_range(1..8));
        let model = random_model(n, n_a, n_e, &mut rng);
        let a: Vec<f64> = (0..n_a).map(|_| rng.random_range(-2.0..2.0)).collect();
        let e: Vec<f64> = (0..n_e).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = model.contract(&a, &e).unwrap();
        let mut want = vec![0.0; 3 * n];
        for (r, w) in want.iter_mut().enumerate() {
            for i in 0..n_a {
                for j in 0..n_e {
                    *w += model.entry(r, i, j) * a[i] * e[j];
                }
            }
        }
        let scale = want.iter().map(|x| x.abs()).fold(1e-300, f64::max);
        for (g, w) in got.positions.iter().zip(&want) {
            worst = worst.max((g - w).abs() / scale);
        }
    }
    outcome(worst <= 1e-12, format!("100 instances, max relative error {worst:.2e} (tol 1e-12)"))
}

// ---------------------------------------------------------------- fitting

fn noiseless_fits() -> Outcome {
    let model = default_model();
    let (mut lm, mut vert, mut secs) = (0.0f64, 0.0f64, 0.0f64);
    let mut failures = 0;
    for seed in 0..20 {
        let scene = sample_scene(model, &SceneOptions { seed, render_image: false, ..Default::default() }, None).unwrap();
        let t = Instant::now();
        let fit = fit_image(model, &scene.landmarks, &FitConfig::default());
        let dt = t.elapsed().as_secs_f64();
        match fit {
            Ok(fit) => {
                let shape = model.contract_coeffs(&fit.coeffs).unwrap();
                lm = lm.max(fit.landmark_rmse);
                vert = vert.max(evaluate_rmse(&shape, &scene.shape));
            }
            Err(_) => failures += 1,
        }
        secs = secs.max(dt);
    }
    outcome(
        failures == 0 && lm < 1e-3 && vert < 0.1 && secs < 2.0,
        format!("20 scenes, worst landmark RMSE {lm:.2e} px (<1e-3), vertex RMSE {vert:.2e} mm (<0.1), time {secs:.3} s (<2), {failures} errors"),
    )
}

fn joint_fitting() -> Outcome {
    let model = default_model();
    let mut wins = 0;
    let mut ratios = Vec::new();
    for seed in 0..20u64 {
        let base = SceneOptions {
            seed: 10_000 + seed,
            landmark_noise: 1.0,
            render_image: false,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
        let identity = sample_coefficients(model, &base, &mut rng).identity;
        let mut sets = Vec::new();
        for _ in 0..3 {
            let mut coeffs = sample_coefficients(model, &base, &mut rng);
            coeffs.identity = identity.clone();
            let pose = morphfit::synthkit::sample_pose(&base, &mut rng);
            sets.push(scene_from(model, coeffs, pose, &base, None, &mut rng).unwrap().landmarks);
        }
        let err = |a: &[f64]| a.iter().zip(&identity).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let joint = fit_joint(model, &sets, &FitConfig::default()).unwrap();
        let best_single = sets
            .iter()
            .map(|lm| err(&fit_image(model, lm, &FitConfig::default()).unwrap().coeffs.identity))
            .fold(f64::INFINITY, f64::min);
        let j = err(&joint.identity);
        wins += (j < best_single) as usize;
        ratios.push(j / best_single);
    }
    ratios.sort_by(f64::total_cmp);
    outcome(
        wins >= 18,
        format!("joint identity closer than best single fit on {wins}/20 seeds (need 18), median error ratio {:.3}", ratios[10]),
    )
}

// ---------------------------------------------------------------- spectral

fn cycle_laplacian(n: usize) -> CsrMatrix {
    let mut t = Vec::new();
    for i in 0..n {
        let j = (i + 1) % n;
        t.extend([(i, i, 1.0), (j, j, 1.0), (i, j, -1.0), (j, i, -1.0)]);
    }
    CsrMatrix::from_triplets(n, n, &t)
}

fn spectral() -> Outcome {
    let model = default_model();
    let basis = default_basis();
    let lap = graph_laplacian(model.n_vertices(), model.triangles()).unwrap();
    let lams = basis.eigenvalues();
    let (mut resid, mut ortho): (f64, f64) = (0.0, 0.0);
    for i in 0..basis.k() {
        let v = basis.vector(i);
        let lv = lap.mul_vec(v);
        resid = resid.max(lv.iter().zip(v).map(|(a, b)| (a - lams[i] * b).abs()).fold(0.0, f64::max));
        for j in 0..=i {
            let d: f64 = v.iter().zip(basis.vector(j)).map(|(a, b)| a * b).sum();
            ortho = ortho.max((d - (i == j) as u8 as f64).abs());
        }
    }
    // Smooth analytic fields over the mean face, mean removed.
    let mean = model.slice(0, 0);
    let fields: [fn(&[f64]) -> [f64; 3]; 3] = [
        |p| [(p[0] / 60.0).sin(), (p[1] / 70.0).cos() * 2.0, p[0] * p[1] / 8000.0],
        |p| [p[2] / 40.0, (p[0] / 90.0).cos(), ((p[0] + p[1]) / 80.0).sin()],
        |p| [(-(p[0] * p[0] + p[1] * p[1]) / 5000.0).exp(), 0.0, (p[1] / 50.0).sin()],
    ];
    let hash = model.mesh_hash();
    let mut recon: f64 = 0.0;
    for f in fields {
        let mut vectors: Vec<[f64; 3]> = mean.chunks_exact(3).map(f).collect();
        let n = vectors.len() as f64;
        for k in 0..3 {
            let m = vectors.iter().map(|v| v[k]).sum::<f64>() / n;
            vectors.iter_mut().for_each(|v| v[k] -= m);
        }
        let field = DisplacementField { vectors };
        let p = basis.project(&field, &hash).unwrap();
        let diff = DisplacementField {
            vectors: p.vectors.iter().zip(&field.vectors).map(|(a, b)| [a[0] - b[0], a[1] - b[1], a[2] - b[2]]).collect(),
        };
        recon = recon.max(diff.norm() / field.norm());
    }
    let mut cycle: f64 = 0.0;
    for n in [6, 7, 12] {
        let b = eigenbasis(&cycle_laplacian(n), n - 2, "cycle").unwrap();
        let mut want: Vec<f64> = (1..n).map(|j| 2.0 - 2.0 * (std::f64::consts::TAU * j as f64 / n as f64).cos()).collect();
        want.sort_by(f64::total_cmp);
        for (g, w) in b.eigenvalues().iter().zip(&want) {
            cycle = cycle.max((g - w).abs());
        }
    }
    outcome(
        resid < 1e-8 && ortho < 1e-8 && recon < 0.05 && cycle < 1e-10,
        format!(
            "k=100 residual {resid:.1e} (<1e-8), orthonormality {ortho:.1e} (<1e-8), reconstruction {:.2}% (<5%), cycle eigenvalues {cycle:.1e} (<1e-10)",
            100.0 * recon
        ),
    )
}

// ---------------------------------------------------------------- shape branch

fn batch_loss(p: &MlpParams, xs: &[&[f64]], ts: &[&[f64]]) -> f64 {
    mlp_gradient(p, xs, ts).unwrap().0
}

fn gradient_check() -> Outcome {
    let dims = [142, 32, 32, 30];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = mlp_init(&dims, 11).unwrap();
    for l in p.layers_mut() {
        l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
    }
    let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..142).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let ts: Vec<Vec<f64>> = (0..4).map(|_| (0..30).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let (xr, tr): (Vec<&[f64]>, Vec<&[f64]>) = (xs.iter().map(|v| v.as_slice()).collect(), ts.iter().map(|v| v.as_slice()).collect());
    let (_, g) = mlp_gradient(&p, &xr, &tr).unwrap();
    let eps = 1e-5;
    let (mut worst, mut count): (f64, usize) = (0.0, 0);
    for li in 0..p.layers().len() {
        let (rows, cols) = p.layers()[li].weights.shape();
        for r in 0..rows {
            for c in 0..=cols {
                let get = |p: &MlpParams| if c < cols { p.layers()[li].weights[(r, c)] } else { p.layers()[li].bias[r] };
                let set = |p: &mut MlpParams, v: f64| {
                    if c < cols {
                        p.layers_mut()[li].weights[(r, c)] = v
                    } else {
                        p.layers_mut()[li].bias[r] = v
                    }
                };
                let orig = get(&p);
                set(&mut p, orig + eps);
                let up = batch_loss(&p, &xr, &tr);
                set(&mut p, orig - eps);
                let down = batch_loss(&p, &xr, &tr);
                set(&mut p, orig);
                let numeric = (up - down) / (2.0 * eps);
                let analytic = if c < cols { g.weights[li][(r, c)] } else { g.bias[li][r] };
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max(rel);
                count += 1;
            }
        }
    }
    outcome(worst < 1e-4, format!("142-32-32-30 net, {count} parameters, worst relative error {worst:.1e} (tol 1e-4)"))
}

fn table_one() -> Outcome {
    let t = Instant::now();
    let cfg = BenchmarkConfig::default();
    let report = benchmark_shape_branch(default_model(), default_basis(), &cfg).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let wins = report.runs.iter().filter(|r| r.rmse_with < r.rmse_without).count();
    outcome(
        report.runs.len() == 10 && wins >= 9 && secs < 600.0,
        format!(
            "with < without on {wins}/{} seeds (need 9), mean {:.4} mm vs {:.4} mm, {secs:.1} s (<600)",
            report.runs.len(),
            report.mean_with,
            report.mean_without
        ),
    )
}

// ---------------------------------------------------------------- raster

fn oracle_inside(v: &[[f64; 2]; 3], p: [f64; 2]) -> bool {
    let q = [p[0] + 1e-7, p[1] + 1e-12];
    let cross = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]);
    let s = [cross(v[0], v[1]), cross(v[1], v[2]), cross(v[2], v[0])];
    s.iter().all(|&x| x > 0.0) || s.iter().all(|&x| x < 0.0)
}

fn raster() -> Outcome {
    let model = default_model();
    let res = 256;
    let mut worst_median: f64 = 0.0;
    for seed in [3, 4, 5] {
        let scene = sample_scene(model, &SceneOptions { seed, ..Default::default() }, None).unwrap();
        let truth = scene.texture.as_ref().unwrap();
        let ex = extract_texture(scene.image.as_ref().unwrap(), &scene.shape, &scene.pose, model, res).unwrap();
        let interior = |x: usize, y: usize| {
            (x.saturating_sub(1)..=(x + 1).min(res - 1))
                .all(|xx| (y.saturating_sub(1)..=(y + 1).min(res - 1)).all(|yy| ex.valid.get(xx, yy) && truth.valid.get(xx, yy)))
        };
        let mut errors = Vec::new();
        for y in 0..res {
            for x in 0..res {
                if interior(x, y) {
                    (0..3).for_each(|c| errors.push((ex.image.get(x, y, c) - truth.image.get(x, y, c)).abs()));
                }
            }
        }
        errors.sort_by(f64::total_cmp);
        worst_median = worst_median.max(errors.get(errors.len() / 2).copied().unwrap_or(f64::INFINITY));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatched = 0;
    for _ in 0..50 {
        let v: [[f64; 2]; 3] = std::array::from_fn(|_| [rng.random_range(-8.0..72.0), rng.random_range(-8.0..72.0)]);
        let mut got = Vec::new();
        rasterize_triangle(v, 64, 64, |x, y, _| got.push((x, y)));
        let want: Vec<(usize, usize)> = (0..64)
            .flat_map(|y| (0..64).map(move |x| (x, y)))
            .filter(|&(x, y)| oracle_inside(&v, [x as f64 + 0.5, y as f64 + 0.5]))
            .collect();
        mismatched += (got != want) as usize;
    }
    outcome(
        worst_median < 2.0 / 255.0 && mismatched == 0,
        format!(
            "round-trip median {:.3}/255 at 256² (<2/255), coverage mismatches on 50 triangles: {mismatched}",
            worst_median * 255.0
        ),
    )
}

fn conditioning() -> Outcome {
    let model = default_model();
    let mut a = vec![0.2; model.n_identity()];
    a[0] = 1.0;
    let neutral = model.contract(&a, model.neutral_expression()).unwrap();
    let texture = procedural_texture(model, 128, 1).unwrap();
    let config = ConditioningConfig {
        resolution: 128,
        ..Default::default()
    };
    let same = conditioning_stack(model, &neutral, &neutral, &neutral, &texture, &config).unwrap();
    let doubled = conditioning_stack(model, &neutral, &neutral, &neutral.scaled(2.0), &texture, &config).unwrap();
    let diffs = ["normal_diff_x", "normal_diff_y", "normal_diff_z", "position_diff_x", "position_diff_y", "position_diff_z"];
    let (mut same_ratio, mut same_diff, mut double_ratio): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for i in 0..128 * 128 {
        if same.coverage.data[i] {
            same_ratio = same_ratio.max((same.channel("area_ratio").unwrap().data()[i] - 1.0).abs());
            for d in diffs {
                same_diff = same_diff.max(same.channel(d).unwrap().data()[i].abs());
            }
        }
        if doubled.coverage.data[i] {
            double_ratio = double_ratio.max((doubled.channel("area_ratio").unwrap().data()[i] - 4.0).abs());
        }
    }
    outcome(
        same_ratio <= 1e-6 && same_diff <= 1e-6 && double_ratio <= 1e-6 && same.coverage.count() > 0,
        format!("identity ratio dev {same_ratio:.1e}, difference channels {same_diff:.1e}, 2x scale ratio dev {double_ratio:.1e} (tol 1e-6)"),
    )
}

// ---------------------------------------------------------------- losses

fn random_output(rng: &mut ChaCha8Rng, len: usize) -> DOutput {
    DOutput((0..len).map(|_| rng.random_range(-2.0..2.0)).collect())
}

/// `(x - 1)²` summed, written out as `x² - 2x + 1`.
fn expanded_lbar(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |acc, v| acc + v * v - 2.0 * v + 1.0)
}

fn expanded_l(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |acc, v| acc + v * v)
}

fn losses() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let len = rng.random_range(1..10);
        let o = DiscriminatorOutputs {
            real_on_real: random_output(&mut rng, len),
            real_on_fake: random_output(&mut rng, len),
            pair_matched_real: random_output(&mut rng, len),
            pair_matched_fake: random_output(&mut rng, len),
            pair_mismatched_real: random_output(&mut rng, len),
            iden_real_real: random_output(&mut rng, len),
            iden_real_fake: random_output(&mut rng, len),
            iden_real_other: random_output(&mut rng, len),
        };
        let real = expanded_lbar(&o.real_on_real.0) + expanded_l(&o.real_on_fake.0);
        let pair = expanded_lbar(&o.pair_matched_real.0) * 2.0 + expanded_l(&o.pair_matched_fake.0) + expanded_l(&o.pair_mismatched_real.0);
        let iden = expanded_lbar(&o.iden_real_real.0) * 2.0 + expanded_l(&o.iden_real_fake.0) + expanded_l(&o.iden_real_other.0);
        let b = loss_breakdown(&o).unwrap();
        for (got, want) in [(b.real, real), (b.pair, pair), (b.iden, iden), (b.gan, real + pair + iden), (loss_gan(&o).unwrap(), real + pair + iden)] {
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
        }
    }
    let perfect = loss_gan(&DiscriminatorOutputs::perfect(16)).unwrap();
    let objective = generator_objective(1.0, 1.0, Some(1.0), &LossWeights::default());
    outcome(
        worst <= 1e-12 && perfect == 0.0 && objective == 21.0,
        format!("100 random inputs, max relative error {worst:.1e} (tol 1e-12), perfect = {perfect}, objective(1,1,1) = {objective}"),
    )
}

// ---------------------------------------------------------------- compositor

fn window_dilate(mask: &Mask, k: usize) -> Mask {
    let (lo, hi) = (-((k / 2) as isize), (k - 1 - k / 2) as isize);
    let mut out = Mask::new(mask.width, mask.height);
    for y in 0..mask.height as isize {
        for x in 0..mask.width as isize {
            let mut hit = false;
            for dy in lo..=hi {
                for dx in lo..=hi {
                    let (xx, yy) = (x + dx, y + dy);
                    if xx >= 0 && yy >= 0 && (xx as usize) < mask.width && (yy as usize) < mask.height {
                        hit |= mask.get(xx as usize, yy as usize);
                    }
                }
            }
            out.set(x as usize, y as usize, hit);
        }
    }
    out
}

fn compositor() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut dilation_ok = true;
    let mut outside_ok = true;
    for _ in 0..20 {
        let (w, h) = (rng.random_range(8..60), rng.random_range(8..60));
        let mut mask = Mask::new(w, h);
        let density = rng.random_range(0.0..0.05);
        for i in 0..w * h {
            mask.data[i] = rng.random_bool(density);
        }
        let d = dilate(&mask, 12);
        dilation_ok &= d == window_dilate(&mask, 12);

        let image = |rng: &mut ChaCha8Rng| {
            let mut img = Image::new(w, h, 3);
            img.data_mut().iter_mut().for_each(|v| *v = rng.random());
            img
        };
        let (input, rendered) = (image(&mut rng), image(&mut rng));
        let mut distance = Image::new(w, h, 1);
        distance.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.0..5.0));
        let out = blend(&rendered, &input, &mask, &distance, &BlendConfig::default()).unwrap();
        for i in 0..w * h {
            if !d.data[i] {
                outside_ok &= out.image.data()[3 * i..3 * i + 3]
                    .iter()
                    .zip(&input.data()[3 * i..3 * i + 3])
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            }
        }
    }
    let cfg = BlendConfig::default();
    let a0 = cfg.alpha(0.0);
    let a2 = cfg.alpha(2.0);
    let samples: Vec<f64> = (0..=400).map(|i| cfg.alpha(i as f64 * 0.025)).collect();
    let monotone = samples.windows(2).all(|w| w[1] <= w[0]) && samples.iter().all(|&a| a > 0.0 && a <= 1.0);
    let a2_err = (a2 - (-1.0f64).exp()).abs();
    outcome(
        dilation_ok && outside_ok && a0 == 1.0 && monotone && a2_err < 1e-15,
        format!(
            "kernel-12 dilation bit-exact: {dilation_ok}, alpha(0) = {a0}, monotone: {monotone}, |alpha(2) - 1/e| = {a2_err:.1e}, outside pixels identical: {outside_ok}"
        ),
    )
}

// ---------------------------------------------------------------- determinism

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let model = default_model();
    let cfg = PipelineConfig::default();
    let scene = sample_scene(model, &SceneOptions { seed: 77, ..Default::default() }, None).unwrap();
    let image = io::decode_png(&io::encode_png(scene.image.as_ref().unwrap()).unwrap()).unwrap();
    let mut e = scene.coeffs.expression.clone();
    e[4] = 0.7;
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let fit = pipeline::run_fit(model, &image, &scene.landmarks, None, &cfg).unwrap();
        pipeline::write_fit_outputs(&dir.path().join("fit"), model, &fit).unwrap();
        let source = pipeline::prepare_source(model, &fit.record, &image, &cfg).unwrap();
        let out = pipeline::run_transfer(model, &source, &e, None, None, &cfg).unwrap();
        pipeline::write_transfer_outputs(&dir.path().join("transfer"), model, &out, &cfg).unwrap();
        snapshot(dir.path())
    };
    let (a, b) = (run(), run());
    let files = a.len();
    outcome(a == b && files > 0, format!("fit and transfer outputs of two runs: {files} files, identical: {}", a == b))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("bilinear contraction", contraction),
        ("noiseless synthetic fitting", noiseless_fits),
        ("joint three-image fitting", joint_fitting),
        ("spectral basis", spectral),
        ("shape-branch gradient check", gradient_check),
        ("shape-branch benchmark", table_one),
        ("raster round trip and coverage", raster),
        ("conditioning identities", conditioning),
        ("loss arithmetic", losses),
        ("compositor", compositor),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let o = check();
        failed += !o.pass as usize;
        println!("{} {name}: {} [{:.1} s]", if o.pass { "PASS" } else { "FAIL" }, o.detail, t.elapsed().as_secs_f64());
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

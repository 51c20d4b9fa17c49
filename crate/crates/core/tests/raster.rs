mod common;

use common::{default_model, mesh_model, small_model};
use morphfit::fitting::CameraPose;
use morphfit::model::{SemanticLabel, Shape};
use morphfit::raster::*;
use morphfit::synthkit::{procedural_texture, sample_scene, SceneOptions};
use nalgebra::{Matrix3, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Point-in-triangle with ties broken by nudging the sample point an
/// infinitesimal step right and then down.
fn oracle_inside(v: &[[f64; 2]; 3], p: [f64; 2]) -> bool {
    let q = [p[0] + 1e-7, p[1] + 1e-12];
    let cross = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]);
    let s = [cross(v[0], v[1]), cross(v[1], v[2]), cross(v[2], v[0])];
    s.iter().all(|&x| x > 0.0) || s.iter().all(|&x| x < 0.0)
}

fn covered(v: [[f64; 2]; 3], w: usize, h: usize) -> Vec<(usize, usize, [f64; 3])> {
    let mut out = Vec::new();
    rasterize_triangle(v, w, h, |x, y, b| out.push((x, y, b)));
    out
}

#[test]
fn random_triangle_coverage_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let v: [[f64; 2]; 3] = std::array::from_fn(|_| [rng.random_range(-8.0..72.0), rng.random_range(-8.0..72.0)]);
        let got = covered(v, 64, 64);
        let mut expected = Vec::new();
        for y in 0..64 {
            for x in 0..64 {
                if oracle_inside(&v, [x as f64 + 0.5, y as f64 + 0.5]) {
                    expected.push((x, y));
                }
            }
        }
        let got_xy: Vec<(usize, usize)> = got.iter().map(|&(x, y, _)| (x, y)).collect();
        assert_eq!(got_xy, expected);
        for (x, y, b) in got {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            for c in 0..2 {
                let r: f64 = (0..3).map(|k| b[k] * v[k][c]).sum();
                assert!((r - p[c]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn half_square_triangle_coverage() {
    let v = [[0.0, 0.0], [64.0, 0.0], [0.0, 64.0]];
    let got = covered(v, 64, 64).len();
    let mut expected = 0;
    for y in 0..64 {
        for x in 0..64 {
            expected += oracle_inside(&v, [x as f64 + 0.5, y as f64 + 0.5]) as usize;
        }
    }
    assert_eq!(got, expected);
    // The diagonal passes through 64 pixel centers; the tie rule decides them.
    assert!(got == 2016 || got == 2080);
}

#[test]
fn shared_edges_cover_each_pixel_once() {
    let uv = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
    for (tris, res) in [(vec![[0u32, 1, 2], [0, 2, 3]], 64), (vec![[0, 1, 3], [1, 2, 3]], 37)] {
        let layout = UvLayout::from_parts(&uv, &tris, res).unwrap();
        assert_eq!(layout.coverage().count(), res * res);
    }
    // A fan of many thin triangles around the center.
    let mut fan_uv = vec![[0.5, 0.5]];
    let n = 40;
    for k in 0..n {
        let t = std::f64::consts::TAU * k as f64 / n as f64;
        fan_uv.push([0.5 + 0.45 * t.cos(), 0.5 + 0.45 * t.sin()]);
    }
    let fan: Vec<[u32; 3]> = (0..n).map(|k| [0, 1 + k as u32, 1 + ((k + 1) % n) as u32]).collect();
    let layout = UvLayout::from_parts(&fan_uv, &fan, 128).unwrap();
    let mut expected = 0;
    for y in 0..128 {
        for x in 0..128 {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let hits = fan
                .iter()
                .filter(|t| oracle_inside(&t.map(|v| [fan_uv[v as usize][0] * 128.0, fan_uv[v as usize][1] * 128.0]), p))
                .count();
            assert!(hits <= 1);
            expected += hits;
        }
    }
    assert_eq!(layout.coverage().count(), expected);
}

#[test]
fn overlapping_uv_is_rejected() {
    let uv = vec![[0.1, 0.1], [0.9, 0.1], [0.1, 0.9], [0.9, 0.9]];
    let tris = vec![[0, 1, 2], [0, 1, 3], [1, 3, 2]];
    match UvLayout::from_parts(&uv, &tris, 32) {
        Err(RasterError::OverlappingUv { pairs }) => {
            assert!(pairs.contains(&(0, 1)));
        }
        other => panic!("expected overlap error, got {other:?}"),
    }
}

#[test]
fn affine_and_constant_attributes_interpolate_exactly() {
    let model = default_model();
    let res = 128;
    let affine: Vec<f64> = model.uv().iter().map(|p| 2.0 * p[0] - 3.0 * p[1] + 1.0).collect();
    let (img, mask) = rasterize_uv(model, &affine, 1, res).unwrap();
    let constant = vec![0.7; model.n_vertices()];
    let (cimg, cmask) = rasterize_uv(model, &constant, 1, res).unwrap();
    assert_eq!(mask, cmask);
    assert!(mask.count() > res * res / 2);
    for y in 0..res {
        for x in 0..res {
            if !mask.get(x, y) {
                assert_eq!(img.get(x, y, 0), 0.0);
                continue;
            }
            let u = (x as f64 + 0.5) / res as f64;
            let v = (y as f64 + 0.5) / res as f64;
            assert!((img.get(x, y, 0) - (2.0 * u - 3.0 * v + 1.0)).abs() < 1e-10);
            assert!((cimg.get(x, y, 0) - 0.7).abs() < 1e-12);
        }
    }
    assert!(matches!(rasterize_uv(model, &affine[1..], 1, res), Err(RasterError::Sizing { .. })));
    assert!(matches!(rasterize_uv(model, &affine, 1, 0), Err(RasterError::InvalidResolution)));
}

#[test]
fn coverage_is_resolution_consistent() {
    let model = default_model();
    for res in [32, 64, 128] {
        let a = UvLayout::new(model, res).unwrap().coverage().count() as f64 / (res * res) as f64;
        let b = UvLayout::new(model, 2 * res).unwrap().coverage().count() as f64 / (4 * res * res) as f64;
        assert!((a - b).abs() < 2.0 / res as f64, "{res}: {a} vs {b}");
    }
}

fn identity_pose() -> CameraPose {
    CameraPose::new(Matrix3::identity(), 1.0, Vector2::zeros()).unwrap()
}

/// Flips triangles so they face the camera under `identity_pose`.
fn facing(vertices: &[[f64; 3]], tris: Vec<[u32; 3]>) -> Vec<[u32; 3]> {
    tris.into_iter()
        .map(|t| {
            let c = t.map(|v| [vertices[v as usize][0], vertices[v as usize][1]]);
            if front_facing(&c) { t } else { [t[0], t[2], t[1]] }
        })
        .collect()
}

#[test]
fn nearer_triangle_wins_the_depth_test() {
    for (red_z, blue_z) in [(-5.0, 5.0), (5.0, -5.0)] {
        let vertices = [
            [10.0, 10.0, red_z],
            [50.0, 10.0, red_z],
            [10.0, 50.0, red_z],
            [20.0, 20.0, blue_z],
            [60.0, 20.0, blue_z],
            [20.0, 60.0, blue_z],
        ];
        let uv = vec![[0.1, 0.1], [0.3, 0.1], [0.1, 0.3], [0.7, 0.1], [0.9, 0.1], [0.7, 0.3]];
        let tris = facing(&vertices, vec![[0, 1, 2], [3, 4, 5]]);
        let model = mesh_model(&vertices, tris, uv, vec![0; 6]);
        let mut tex = Image::new(32, 32, 3);
        for y in 0..32 {
            for x in 0..32 {
                tex.pixel_mut(x, y).copy_from_slice(if x < 16 { &[1.0, 0.0, 0.0] } else { &[0.0, 0.0, 1.0] });
            }
        }
        let mut valid = Mask::new(32, 32);
        valid.data.iter_mut().for_each(|v| *v = true);
        let texture = Texture { image: tex, valid };
        let shape = Shape::from_vertices(&vertices);
        let out = render(&model, &shape, &texture, &identity_pose(), 64, 64, None).unwrap();
        let red_tri = [[10.0, 10.0], [50.0, 10.0], [10.0, 50.0]];
        let blue_tri = [[20.0, 20.0], [60.0, 20.0], [20.0, 60.0]];
        let mut overlap = 0;
        for y in 0..64 {
            for x in 0..64 {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                if oracle_inside(&red_tri, p) && oracle_inside(&blue_tri, p) {
                    overlap += 1;
                    let want = if red_z < blue_z { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
                    assert_eq!(out.image.pixel(x, y), &want);
                }
            }
        }
        assert!(overlap > 100);
    }
}

fn square_model(size: f64) -> (morphfit::model::BilinearModel, Shape) {
    let vertices = [[0.0, 0.0, 0.0], [size, 0.0, 0.0], [size, size, 0.0], [0.0, size, 0.0]];
    let uv = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
    let tris = facing(&vertices, vec![[0, 1, 2], [0, 2, 3]]);
    (mesh_model(&vertices, tris, uv, vec![0; 4]), Shape::from_vertices(&vertices))
}

#[test]
fn checkerboard_renders_like_direct_lookup() {
    let (model, shape) = square_model(64.0);
    let mut tex = Image::new(64, 64, 3);
    for y in 0..64 {
        for x in 0..64 {
            let c = if (x / 8 + y / 8) % 2 == 0 { 0.9 } else { 0.1 };
            tex.pixel_mut(x, y).copy_from_slice(&[c, 1.0 - c, 0.5]);
        }
    }
    let mut valid = Mask::new(64, 64);
    valid.data.iter_mut().for_each(|v| *v = true);
    let texture = Texture { image: tex.clone(), valid };
    let out = render(&model, &shape, &texture, &identity_pose(), 64, 64, None).unwrap();
    assert_eq!(out.coverage.count(), 64 * 64);
    for y in 0..64 {
        for x in 0..64 {
            for c in 0..3 {
                assert!((out.image.get(x, y, c) - tex.get(x, y, c)).abs() < 2.0 / 255.0);
            }
        }
    }
}

#[test]
fn invalid_texture_renders_nothing() {
    let (model, shape) = square_model(64.0);
    let texture = Texture {
        image: Image::filled(16, 16, &[1.0, 1.0, 1.0]),
        valid: Mask::new(16, 16),
    };
    let bg = Image::filled(64, 64, &[0.2, 0.3, 0.4]);
    let out = render(&model, &shape, &texture, &identity_pose(), 64, 64, Some(&bg)).unwrap();
    assert_eq!(out.coverage.count(), 0);
    assert_eq!(out.image, bg);
}

#[test]
fn render_then_extract_round_trips() {
    let model = default_model();
    for seed in [3, 4] {
        let scene = sample_scene(model, &SceneOptions { seed, ..SceneOptions::default() }, None).unwrap();
        let truth = scene.texture.as_ref().unwrap();
        let image = scene.image.as_ref().unwrap();
        let ex = extract_texture(image, &scene.shape, &scene.pose, model, 256).unwrap();
        let res = 256;
        let interior = |x: usize, y: usize| {
            (x.saturating_sub(1)..=(x + 1).min(res - 1))
                .all(|xx| (y.saturating_sub(1)..=(y + 1).min(res - 1)).all(|yy| ex.valid.get(xx, yy) && truth.valid.get(xx, yy)))
        };
        let mut errors = Vec::new();
        for y in 0..res {
            for x in 0..res {
                if interior(x, y) {
                    for c in 0..3 {
                        errors.push((ex.image.get(x, y, c) - truth.image.get(x, y, c)).abs());
                    }
                }
            }
        }
        assert!(errors.len() > 3 * 5000, "too few texels: {}", errors.len() / 3);
        errors.sort_by(f64::total_cmp);
        let median = errors[errors.len() / 2];
        assert!(median < 2.0 / 255.0, "median {median}");
    }
}

#[test]
fn gray_image_gives_gray_texture() {
    let model = small_model();
    let scene = sample_scene(model, &SceneOptions { seed: 5, render_image: false, ..SceneOptions::default() }, None).unwrap();
    let image = Image::filled(256, 256, &[0.5, 0.5, 0.5]);
    let tex = extract_texture(&image, &scene.shape, &scene.pose, model, 128).unwrap();
    assert!(tex.valid.count() > 1000);
    for i in 0..128 * 128 {
        if tex.valid.data[i] {
            for c in 0..3 {
                assert!((tex.image.data()[3 * i + c] - 0.5).abs() < 1e-12);
            }
        } else {
            assert!(tex.image.data()[3 * i..3 * i + 3].iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn side_view_invalidates_back_facing_texels() {
    let model = default_model();
    let a = {
        let mut a = vec![0.0; model.n_identity()];
        a[0] = 1.0;
        a
    };
    let shape = model.contract(&a, model.neutral_expression()).unwrap();
    let image = Image::filled(256, 256, &[0.5, 0.5, 0.5]);
    let layout = UvLayout::new(model, 128).unwrap();
    // Sign of the camera-space normal z of each triangle.
    let facing_sign = |pose: &CameraPose| -> Vec<f64> {
        model
            .triangles()
            .iter()
            .map(|t| {
                let [p, q, r] = t.map(|v| pose.to_camera(shape.vertex(v as usize)));
                let e1 = [q[0] - p[0], q[1] - p[1]];
                let e2 = [r[0] - p[0], r[1] - p[1]];
                (e1[0] * e2[1] - e1[1] * e2[0]).signum()
            })
            .collect()
    };
    let frontal = CameraPose::from_euler(0.0, 0.0, 0.0, 0.85, [128.0, 128.0]);
    let signs = facing_sign(&frontal);
    let front = {
        let pos = signs.iter().filter(|&&s| s > 0.0).count();
        if 2 * pos > signs.len() { 1.0 } else { -1.0 }
    };
    let side = CameraPose::from_euler(0.0, std::f64::consts::FRAC_PI_2, 0.0, 0.85, [128.0, 128.0]);
    let tex = extract_texture(&image, &shape, &side, model, 128).unwrap();
    let signs = facing_sign(&side);
    let (mut back, mut covered) = (0, 0);
    for i in 0..128 * 128 {
        let Some(t) = layout.owner(i) else { continue };
        covered += 1;
        if signs[t] != front {
            back += 1;
            assert!(!tex.valid.data[i], "back-facing texel {i} marked valid");
        }
    }
    assert!(back * 4 > covered, "{back} of {covered}");
    assert!(tex.valid.count() * 5 > covered);
}

#[test]
fn identical_shapes_give_neutral_conditioning() {
    let model = small_model();
    let mut a = vec![0.3; model.n_identity()];
    a[0] = 1.0;
    let neutral = model.contract(&a, model.neutral_expression()).unwrap();
    let texture = procedural_texture(model, 64, 1).unwrap();
    let config = ConditioningConfig {
        resolution: 64,
        seed: 9,
        include_semantic: true,
        ..ConditioningConfig::default()
    };
    let stack = conditioning_stack(model, &neutral, &neutral, &neutral, &texture, &config).unwrap();
    assert_eq!(stack.planes.channels(), 16);
    assert_eq!(stack.channel_names[..15], CONDITIONING_CHANNELS.map(String::from));
    assert_eq!(stack.channel_names[15], SEMANTIC_CHANNEL);
    let ratio = stack.channel("area_ratio").unwrap();
    for i in 0..64 * 64 {
        if !stack.coverage.data[i] {
            continue;
        }
        assert!((ratio.data()[i] - 1.0).abs() < 1e-6);
        for name in ["normal_diff_x", "normal_diff_y", "normal_diff_z", "position_diff_x", "position_diff_y", "position_diff_z"] {
            assert!(stack.channel(name).unwrap().data()[i].abs() < 1e-6);
        }
    }
    assert_eq!(stack.channel("noise").unwrap(), noise_plane(9, 64));
}

#[test]
fn doubled_target_quadruples_area_ratio() {
    let model = small_model();
    let mut a = vec![0.0; model.n_identity()];
    a[0] = 1.0;
    let neutral = model.contract(&a, model.neutral_expression()).unwrap();
    let texture = procedural_texture(model, 64, 1).unwrap();
    let config = ConditioningConfig {
        resolution: 64,
        ..ConditioningConfig::default()
    };
    let stack = conditioning_stack(model, &neutral, &neutral, &neutral.scaled(2.0), &texture, &config).unwrap();
    let ratio = stack.channel("area_ratio").unwrap();
    let pos = stack.position_difference_mm();
    let expected_pos = UvLayout::new(model, 64).unwrap().interpolate(&neutral.positions, 3);
    for i in 0..64 * 64 {
        if stack.coverage.data[i] {
            assert!((ratio.data()[i] - 4.0).abs() < 1e-6);
            for c in 0..3 {
                assert!((pos.data()[3 * i + c] - expected_pos.data()[3 * i + c]).abs() < 1e-9);
            }
        }
    }
}

fn one_ring_areas(model: &morphfit::model::BilinearModel, shape: &Shape) -> Vec<f64> {
    let mut area = vec![0.0; model.n_vertices()];
    for t in model.triangles() {
        let [p, q, r] = t.map(|v| shape.vertex(v as usize));
        let e1 = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
        let e2 = [r[0] - p[0], r[1] - p[1], r[2] - p[2]];
        let c = [e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]];
        let a = 0.5 * (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        for &v in t {
            area[v as usize] += a;
        }
    }
    area
}

#[test]
fn contracting_bump_lowers_area_ratio() {
    let model = default_model();
    let mut a = vec![0.0; model.n_identity()];
    a[0] = 1.0;
    let neutral = model.contract(&a, model.neutral_expression()).unwrap();
    let center_vertex = model.landmarks()[10] as usize;
    let c = neutral.vertex(center_vertex);
    let radius = 25.0;
    let target = Shape::from_vertices(
        &neutral
            .vertices()
            .map(|x| {
                let d = [x[0] - c[0], x[1] - c[1], x[2] - c[2]];
                let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                let f = if r < radius { 0.6 + 0.4 * r / radius } else { 1.0 };
                [c[0] + f * d[0], c[1] + f * d[1], c[2] + f * d[2]]
            })
            .collect::<Vec<_>>(),
    );
    let texture = procedural_texture(model, 128, 1).unwrap();
    let config = ConditioningConfig {
        resolution: 128,
        ..ConditioningConfig::default()
    };
    let stack = conditioning_stack(model, &neutral, &neutral, &target, &texture, &config).unwrap();
    let n_area = one_ring_areas(model, &neutral);
    let t_area = one_ring_areas(model, &target);
    let ratio: Vec<f64> = t_area.iter().zip(&n_area).map(|(t, n)| t / n).collect();
    assert!(ratio[center_vertex] < 1.0);
    let expected = UvLayout::new(model, 128).unwrap().interpolate(&ratio, 1);
    let got = stack.channel("area_ratio").unwrap();
    for i in 0..128 * 128 {
        if stack.coverage.data[i] {
            assert!((got.data()[i] - expected.data()[i]).abs() < 1e-9);
            assert!(got.data()[i] > 0.0);
        }
    }
    assert!(got.data().iter().zip(&stack.coverage.data).any(|(&r, &c)| c && r < 0.9));
}

#[test]
fn noise_plane_is_a_function_of_seed() {
    assert_eq!(noise_plane(4, 32), noise_plane(4, 32));
    assert_ne!(noise_plane(4, 32), noise_plane(5, 32));
    assert!(noise_plane(4, 32).data().iter().all(|x| (0.0..1.0).contains(x)));
}

#[test]
fn conditioning_rejects_degenerate_neutral() {
    let model = small_model();
    let neutral = model.contract(&vec![0.0; model.n_identity()], model.neutral_expression()).unwrap();
    let texture = procedural_texture(model, 32, 1).unwrap();
    let config = ConditioningConfig {
        resolution: 32,
        ..ConditioningConfig::default()
    };
    let err = conditioning_stack(model, &neutral, &neutral, &neutral, &texture, &config).unwrap_err();
    assert!(matches!(err, RasterError::DegenerateNeutralArea { .. } | RasterError::Model(_)), "{err:?}");
}

#[test]
fn semantic_map_cases() {
    let (model, _) = square_model(1.0);
    let map = semantic_map(&model, 16).unwrap();
    assert!(map.labels.iter().all(|&l| l == SemanticLabel::Other.id()));

    let vertices = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0], [2.0, 1.0, 0.0]];
    let uv = vec![[0.0, 0.0], [0.5, 0.0], [0.5, 1.0], [0.0, 1.0], [1.0, 1.0]];
    let lips = SemanticLabel::Lips.id();
    let model = mesh_model(&vertices, vec![[0, 1, 2], [0, 2, 3], [1, 4, 2]], uv, vec![0, lips, lips, 0, lips]);
    let map = semantic_map(&model, 32).unwrap();
    let layout = UvLayout::new(&model, 32).unwrap();
    for i in 0..32 * 32 {
        match layout.owner(i) {
            Some(2) => assert_eq!(map.labels[i], lips),
            Some(0) => assert_eq!(map.labels[i], lips),
            Some(1) => assert_eq!(map.labels[i], 0),
            _ => {}
        }
    }
    assert_eq!(triangle_label([1, 2, 3]), 1);
    assert_eq!(triangle_label([4, 2, 4]), 4);
}

#[test]
fn synthetic_label_areas_match_brute_force() {
    let model = default_model();
    let res = 96;
    let map = semantic_map(model, res).unwrap();
    let mut areas = [0usize; SemanticLabel::COUNT];
    let tris: Vec<([[f64; 2]; 3], u8)> = model
        .triangles()
        .iter()
        .map(|t| {
            let corners = t.map(|v| {
                let p = model.uv()[v as usize];
                [p[0] * res as f64, p[1] * res as f64]
            });
            let labels = t.map(|v| model.semantic()[v as usize]);
            // Majority, ties to the lowest id.
            let mut best = (0, u8::MAX);
            for l in labels {
                let n = labels.iter().filter(|&&m| m == l).count();
                if n > best.0 || (n == best.0 && l < best.1) {
                    best = (n, l);
                }
            }
            (corners, best.1)
        })
        .collect();
    for y in 0..res {
        for x in 0..res {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            if let Some((_, l)) = tris.iter().find(|(c, _)| oracle_inside(c, p)) {
                areas[*l as usize] += 1;
            }
        }
    }
    assert_eq!(map.label_areas(), areas);
    assert!(areas.iter().skip(1).all(|&a| a > 0), "{areas:?}");
}

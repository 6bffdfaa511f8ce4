use lumen_core::scenegen::*;
use lumen_core::LumenError;
use proptest::prelude::*;

fn scene(seed: u64, index: u64, cfg: &SceneConfig) -> SceneSpec {
    sample_scene(&mut scene_rng(seed, index), cfg).unwrap()
}

#[test]
fn ten_thousand_scenes_respect_every_constraint() {
    let cfg = SceneConfig::sid2();
    let mut quadrants = [0usize; 4];
    let mut counts = [0usize; 3];
    let n = 10_000;
    for i in 0..n {
        let s = scene(2024, i, &cfg);
        assert!(validate_scene(&s, &cfg).is_empty(), "scene {i}: {:?}", validate_scene(&s, &cfg));
        let l = s.light.pose;
        assert!(l.tilt % 5.0 == 0.0 && (30.0..=90.0).contains(&l.tilt));
        assert!(l.pan.fract() == 0.0 && (0.0..360.0).contains(&l.pan));
        assert!((20.0..=50.0).contains(&l.r));
        quadrants[(l.pan / 90.0) as usize] += 1;
        counts[s.objects.len() - 1] += 1;
        for o in &s.objects {
            // bounding sphere clear of the central exclusion sphere
            assert!(o.center().norm() - o.bounding_radius() > cfg.exclusion_radius);
            assert!(o.lowest_z().abs() <= 1e-9);
        }
        let gt = gt_from_scene(&s);
        assert_eq!(gt.delta_pan, lumen_core::lightmath::wrap_delta(-l.pan));
    }
    for q in quadrants {
        let f = q as f64 / n as f64;
        assert!((f - 0.25).abs() <= 0.02, "quadrants {quadrants:?}");
    }
    for c in counts {
        let f = c as f64 / n as f64;
        assert!((f - 1.0 / 3.0).abs() <= 0.02, "object counts {counts:?}");
    }
}

#[test]
fn single_object_mode() {
    let cfg = SceneConfig::sid1();
    assert!((0..500).all(|i| scene(5, i, &cfg).objects.len() == 1));
}

#[test]
fn same_stream_same_scene() {
    let cfg = SceneConfig::default();
    let a = serde_json::to_string(&scene(9, 3, &cfg)).unwrap();
    let b = serde_json::to_string(&scene(9, 3, &cfg)).unwrap();
    assert_eq!(a, b);
    assert_ne!(scene(9, 3, &cfg), scene(9, 4, &cfg));
}

#[test]
fn gt_examples() {
    let mut s = scene(1, 0, &SceneConfig::default());
    s.light.pose.pan = 0.0;
    assert_eq!(gt_from_scene(&s).delta_pan, 0.0);
    s.light.pose.pan = 90.0;
    assert_eq!(gt_from_scene(&s).delta_pan, -90.0);
    s.camera.pose.tilt = 10.0;
    s.light.pose.tilt = 90.0;
    assert_eq!(gt_from_scene(&s).delta_tilt, -80.0);
}

#[test]
fn impossible_exclusion_zone_fails_placement() {
    let cfg = SceneConfig { exclusion_radius: 50.0, ..SceneConfig::sid2() };
    let err = sample_scene(&mut scene_rng(0, 0), &cfg).unwrap_err();
    assert!(matches!(err, LumenError::Placement { attempts: 1000 }), "{err}");
}

fn has(v: &[String], what: &str) -> bool {
    v.iter().any(|x| x == what)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sampled_scenes_validate(seed in any::<u64>(), index in any::<u64>(), sid1 in any::<bool>()) {
        let cfg = if sid1 { SceneConfig::sid1() } else { SceneConfig::sid2() };
        let s = scene(seed, index, &cfg);
        prop_assert!(validate_scene(&s, &cfg).is_empty());
        for (i, a) in s.objects.iter().enumerate() {
            for b in &s.objects[i + 1..] {
                prop_assert!((a.center() - b.center()).norm() > a.bounding_radius() + b.bounding_radius());
            }
        }
    }

    #[test]
    fn broken_scenes_name_the_constraint(
        seed in any::<u64>(),
        r in prop_oneof![0.0f64..19.99, 50.01f64..100.0],
        tilt_off in 0.1f64..4.9,
        cam_tilt in prop_oneof![0.0f64..9.99, 70.01f64..89.0],
    ) {
        let cfg = SceneConfig::sid2();
        let base = scene(seed, 0, &cfg);

        let mut s = base.clone();
        s.light.pose.r = r;
        prop_assert!(has(&validate_scene(&s, &cfg), "light radius range"));

        let mut s = base.clone();
        s.light.pose.tilt = 30.0 + tilt_off;
        prop_assert!(has(&validate_scene(&s, &cfg), "light tilt grid"));

        let mut s = base.clone();
        s.camera.pose.tilt = cam_tilt;
        prop_assert!(has(&validate_scene(&s, &cfg), "camera tilt range"));

        let mut s = base.clone();
        while s.objects.len() < 4 {
            s.objects.push(s.objects[0].clone());
        }
        prop_assert!(has(&validate_scene(&s, &cfg), "object count"));

        let mut s = base;
        s.objects[0].position[2] += 0.01;
        prop_assert!(has(&validate_scene(&s, &cfg), "floor contact"));
    }
}

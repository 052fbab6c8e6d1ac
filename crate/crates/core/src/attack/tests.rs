use super::*;
use crate::dataset::generate_dataset;
use crate::model::{fit_heads, init_model_for};
use crate::scene::{find_situation, CollectionConfig, SimulationConfig, Task};

fn split(task: Task, situation: &str, n: usize, patches: &[PatchTexture]) -> Dataset {
    let mut cfg = CollectionConfig::new(task, situation);
    cfg.num_samples = n;
    cfg.seed = Some(5);
    cfg.resolution = Some((160, 80));
    generate_dataset(&cfg, &SimulationConfig::default(), &cfg.profile(), patches).unwrap()
}

fn fitted(ds: &Dataset) -> SurrogateModel {
    let profile = crate::scene::TaskProfile {
        width: ds.manifest.image_width,
        height: ds.manifest.image_height,
        ..crate::scene::TaskProfile::for_task(ds.task())
    };
    let mut m = init_model_for(&profile, 3);
    fit_heads(&mut m, &ds.samples, 1e-3).unwrap();
    m
}

fn small_opts(steps: usize) -> AttackOptions {
    AttackOptions {
        steps,
        batch: 3,
        eval_every: 2,
        patch_dims: (20, 40),
        ..AttackOptions::default()
    }
}

#[test]
fn random_patch_is_seeded_uniform() {
    let a = random_patch(4, (150, 300));
    assert_eq!(a, random_patch(4, (150, 300)));
    assert_ne!(a, random_patch(5, (150, 300)));
    assert!(a.texels.iter().all(|t| (0.0..=1.0).contains(t)));
    assert!((0.45..=0.55).contains(&a.mean()));
}

#[test]
fn zero_step_size_returns_the_initialization() {
    let ds = split(Task::MonocularDepth, "billboard02", 3, &[]);
    let m = fitted(&ds);
    let opts = AttackOptions {
        step_size: 0.0,
        ..small_opts(1)
    };
    let r = optimize_patch(&m, &ds, &find_situation("billboard02").unwrap(), &opts).unwrap();
    assert_eq!(r.patches, vec![PatchTexture::filled(20, 40, [0.5; 3])]);
    assert_eq!(r.best_loss, r.initial_loss);
}

#[test]
fn patch_gradient_matches_finite_differences() {
    for (task, situation) in [
        (Task::SemanticSegmentation, "billboard02"),
        (Task::Detection2D, "truck"),
        (Task::StereoDetection3D, "billboard05"),
    ] {
        let ds = split(task, situation, 4, &[]);
        let m = fitted(&ds);
        let ids: Vec<u32> = ds.samples[0].surfaces().iter().map(|s| s.surface_id).collect();
        let patches: Vec<_> = (0..ids.len()).map(|k| random_patch(k as u64, (20, 40))).collect();
        let mut checked = 0;
        for s in &ds.samples {
            let obj = PatchObjective::new(&m, s, &ids).unwrap();
            if !obj.is_active() {
                continue;
            }
            let (_, g) = obj.loss_and_patch_grad(&patches).unwrap();
            let mut rng = CounterRng::new(1, "fd", checked);
            for _ in 0..10 {
                let k = rng.below(ids.len());
                let touched: Vec<usize> = (0..g[k].len()).filter(|&t| g[k][t] != 0.0).collect();
                if touched.is_empty() {
                    continue;
                }
                let t = touched[rng.below(touched.len())];
                let at = |d: f64| {
                    let mut p = patches.clone();
                    p[k].texels[t] += d;
                    obj.loss(&p).unwrap()
                };
                let h = 1e-4;
                let fd = (at(h) - at(-h)) / (2.0 * h);
                let err = (fd - g[k][t]).abs() / fd.abs().max(g[k][t].abs()).max(1e-9);
                assert!(err < 1e-5, "{task} {}: texel {t}: fd {fd:e} vs {:e}", s.name, g[k][t]);
            }
            checked += 1;
        }
        assert!(checked > 0, "{task}: no sample shows the surface");
    }
}

#[test]
fn optimization_is_deterministic_and_monotone() {
    let ds = split(Task::SemanticSegmentation, "billboard02", 5, &[]);
    let m = fitted(&ds);
    let situation = find_situation("billboard02").unwrap();
    let opts = small_opts(6);
    let a = optimize_patch(&m, &ds, &situation, &opts).unwrap();
    let b = optimize_patch(&m, &ds, &situation, &opts).unwrap();
    assert_eq!(a, b);
    assert!(a.best_loss >= a.initial_loss);
    assert!(a.best_loss > a.initial_loss, "no progress: {:?}", a.history);
    assert_eq!(a.history.iter().map(|h| h.0).collect::<Vec<_>>(), vec![0, 2, 4, 6]);
    assert!(a.patches[0].texels.iter().all(|t| (0.0..=1.0).contains(t)));
    let max = a.history.iter().map(|h| h.1).fold(f64::MIN, f64::max);
    assert_eq!(a.best_loss, max);
}

#[test]
fn double_patch_textures_update_independently() {
    let ds = split(Task::SemanticSegmentation, "billboard06", 5, &[]);
    let m = fitted(&ds);
    let situation = find_situation("billboard06").unwrap();
    let r = optimize_patch(&m, &ds, &situation, &small_opts(4)).unwrap();
    assert_eq!(r.surfaces, vec![0, 1]);
    assert_eq!(r.patches.len(), 2);
    assert_ne!(r.patches[0], r.patches[1]);

    // Zeroing one texture's gradient leaves the other's step untouched.
    let opts = AttackOptions::default();
    let g0: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) * 0.1).collect();
    let g1: Vec<f64> = (0..9).map(|i| i as f64).collect();
    let step = |grads: [&[f64]; 2]| {
        let mut out = Vec::new();
        for g in grads {
            let mut p = PatchTexture::filled(1, 3, [0.5; 3]);
            let mut v = vec![0.0; 9];
            ascent_step(&mut p, &mut v, g, &opts);
            out.push(p);
        }
        out
    };
    let both = step([&g0, &g1]);
    let only = step([&g0, &[0.0; 9]]);
    assert_eq!(both[0], only[0]);
    assert_eq!(only[1], PatchTexture::filled(1, 3, [0.5; 3]));
}

#[test]
fn precondition_errors() {
    let situation = find_situation("billboard02").unwrap();
    let clean = split(Task::MonocularDepth, "billboard02", 2, &[]);
    let m = fitted(&clean);
    let patched = split(Task::MonocularDepth, "billboard02", 2, &[random_patch(1, (20, 40))]);
    assert!(matches!(
        optimize_patch(&m, &patched, &situation, &small_opts(1)),
        Err(Error::Lifecycle(_))
    ));
    let mut empty = clean.clone();
    empty.samples.clear();
    assert!(matches!(optimize_patch(&m, &empty, &situation, &small_opts(1)), Err(Error::EmptySplit)));
    let other = find_situation("billboard03").unwrap();
    assert!(matches!(
        optimize_patch(&m, &clean, &other, &small_opts(1)),
        Err(Error::SituationMismatch { .. })
    ));
    assert!(optimize_patch(&m, &clean, &situation, &small_opts(0)).is_err());
}

#[test]
fn sidecar_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let png = tmp.path().join("patch.png");
    let p = random_patch(2, (20, 40));
    let side = PatchSidecar {
        situation: "billboard02".into(),
        surface_id: 0,
        task: Task::MonocularDepth,
        model_fingerprint: "abc".into(),
        options: AttackOptions::default(),
        initial_loss: 1.0,
        best_loss: 2.0,
        best_step: 100,
        patch_fingerprint: String::new(),
    };
    save_patch(&png, &p, side.clone()).unwrap();
    let back = load_sidecar(&png).unwrap();
    assert_eq!(back.patch_fingerprint, load_patch_png(&png).unwrap().fingerprint());
    assert_eq!(PatchSidecar { patch_fingerprint: String::new(), ..back }, side);
}

#[test]
fn report_deltas_match_standalone_metrics() {
    for task in [Task::SemanticSegmentation, Task::Detection2D] {
        let clean = split(task, "billboard02", 3, &[]);
        let m = fitted(&clean);
        let random = split(task, "billboard02", 3, &[random_patch(8, (20, 40))]);
        let r = attack_report(&m, &clean, &random, &clean).unwrap();
        assert_eq!(r.delta_adv, 0.0);
        assert_eq!(r.adv, r.clean);
        let standalone = evaluate_split(&m, &random, None).unwrap();
        assert_eq!(r.random, standalone.report.value);
        assert_eq!(r.delta_random, standalone.report.value - r.clean);
        assert_eq!(r.random_loss, standalone.mean_loss);
        assert_eq!(r.metric, crate::metrics::metric_name(task));
        let other = split(Task::MonocularDepth, "billboard02", 3, &[]);
        assert!(matches!(attack_report(&m, &clean, &other, &clean), Err(Error::TaskMismatch { .. })));
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spikefield_core::dataio::{
    decode_checkpoint, encode_checkpoint, generate_procedural_scene, Checkpoint, SceneSpec,
};
use spikefield_core::rays::{apply_mask, compute_alpha, compute_transmittance, leftover_transmittance, sample_along_ray};
use spikefield_core::render::{composite, survivor_weights, train_loop, ModelConfig, RaySet, Trainer};
use spikefield_core::{RenderConfig, Scene, TrainConfig};

fn small_cube_sphere() -> SceneSpec {
    SceneSpec {
        width: 20,
        height: 20,
        train_views: 3,
        test_views: 1,
        ..SceneSpec::cube_sphere()
    }
}

#[test]
fn ground_truth_matches_engine_compositing() {
    let spec = small_cube_sphere();
    let data = generate_procedural_scene(&spec, 5).unwrap();
    let step = spec.reference_step();
    let mut worst = 0.0f64;
    for view in data.train.iter().chain(&data.test) {
        for (i, ray) in view.camera.all_rays().iter().enumerate() {
            let s = sample_along_ray(ray, &spec.aabb, step).unwrap();
            let fields: Vec<_> = s.positions.iter().map(|p| spec.field(*p)).collect();
            let alphas: Vec<f64> = fields.iter().zip(&s.deltas).map(|((sigma, _), d)| compute_alpha(*sigma, *d)).collect();
            let trans = compute_transmittance(&alphas).unwrap();
            let masked = apply_mask(&s, &alphas, &trans, 0.0, 0.0).unwrap();
            let colors: Vec<f64> = masked.indices.iter().flat_map(|&k| fields[k].1).collect();
            let rgb = composite(&colors, &survivor_weights(&masked), spec.background, leftover_transmittance(&alphas));
            let px = view.image.pixel(i);
            for k in 0..3 {
                worst = worst.max((rgb[k].clamp(0.0, 1.0) - px[k]).abs());
            }
        }
    }
    assert!(worst <= 2.0 / 255.0, "worst deviation {worst}");
}

fn short_run(seed: u64, iterations: usize) -> (Trainer, Vec<f64>) {
    let spec = small_cube_sphere();
    let data = generate_procedural_scene(&spec, 1).unwrap();
    let model = ModelConfig { aabb: spec.aabb, grid_dims: [12; 3], hidden: vec![16], ..ModelConfig::default() };
    let scene = Scene::new(&model, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut trainer = Trainer::new(scene, seed);
    let train = TrainConfig { iterations, batch_rays: 128, eval_every: 0, seed, ..TrainConfig::default() };
    let hist = train_loop(&mut trainer, &RaySet::from_views(&data.train), &data.test, &RenderConfig::default(), &train, |_| Ok(())).unwrap();
    (trainer, hist.iter().map(|r| r.loss).collect())
}

#[test]
fn fixed_seed_gives_identical_loss_curves() {
    let (a, la) = short_run(9, 25);
    let (b, lb) = short_run(9, 25);
    assert_eq!(la.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), lb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.scene, b.scene);
    let (_, lc) = short_run(10, 25);
    assert_ne!(la, lc);
    assert!(la.last().unwrap() < la.first().unwrap());
}

#[test]
fn checkpoint_of_trained_scene_round_trips() {
    let (t, _) = short_run(4, 5);
    let ck = Checkpoint {
        config: "{}".into(),
        scene: t.scene.clone(),
        iteration: t.iteration as u64,
        rng: t.rng.clone(),
    };
    let back = decode_checkpoint(&encode_checkpoint(&ck)).unwrap();
    assert_eq!(back, ck);
    let resumed = Trainer::resume(back.scene, back.iteration as usize, back.rng);
    assert_eq!(resumed.iteration, 5);
}

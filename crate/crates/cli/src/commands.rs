use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use spikefield_core::dataio::{
    generate_procedural_scene, load_checkpoint, load_dataset, save_checkpoint, write_dataset, Checkpoint, Dataset,
    SceneSpec,
};
use spikefield_core::metrics::{count_ops_ann, psnr, ssim, EnergyReport};
use spikefield_core::pack::{self, write_pack_report, PackReportRow};
use spikefield_core::render::{
    forward_chunk, render_image, render_rays, train_loop, MetricsRow, RaySet, Scene, Trainer, View,
};
use spikefield_core::snn::smlp_forward;
use spikefield_core::{Encoder, Error, PackingMode};

use crate::config::{CliError, RunConfig};
use crate::{EncoderArg, EvalArgs, MakeSceneArgs, PackingArg, RenderFlags, Split, Toggle, TrainArgs};

pub const CHECKPOINT_FILE: &str = "ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

/// Config file (or `base`) with command-line overrides applied.
fn resolve(flags: &RenderFlags, base: RunConfig) -> Result<RunConfig, CliError> {
    let mut cfg = match &flags.config {
        Some(path) => RunConfig::load(path)?,
        None => base,
    };
    let r = &mut cfg.render;
    let current_steps = match r.encoder {
        Encoder::Aligned => None,
        Encoder::Direct(t) | Encoder::Poisson(t) => Some(t),
    };
    let steps = flags.time_steps.or(current_steps).unwrap_or(1);
    r.encoder = match (flags.encoder, r.encoder) {
        (Some(EncoderArg::Aligned), _) => Encoder::Aligned,
        (Some(EncoderArg::Direct), _) | (None, Encoder::Direct(_)) => Encoder::Direct(steps),
        (Some(EncoderArg::Poisson), _) | (None, Encoder::Poisson(_)) => Encoder::Poisson(steps),
        (None, Encoder::Aligned) => Encoder::Aligned,
    };
    if flags.time_steps.is_some() && r.encoder == Encoder::Aligned {
        return Err(CliError::Config("--time-steps needs --encoder direct or poisson".into()));
    }
    if let Some(flip) = flags.flip {
        r.flip = flip == Toggle::On;
    }
    if let Some(p) = flags.packing {
        r.packing = match p {
            PackingArg::Tp => PackingMode::Tp,
            PackingArg::Tcp => PackingMode::Tcp,
        };
    }
    if let Some(c) = flags.chunk_size {
        r.chunk_size = c;
    }
    if let Some(seed) = flags.seed {
        r.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report is serializable") + "\n"
}

fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("iteration,loss,psnr\n");
    for r in rows {
        let p = r.psnr.map(|p| format!("{p:.6}")).unwrap_or_default();
        s += &format!("{},{:.8e},{p}\n", r.iteration, r.loss);
    }
    s
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = resolve(&a.render, RunConfig::default())?;
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    if let Some(n) = a.batch_rays {
        cfg.train.batch_rays = n;
    }
    cfg.validate()?;
    let data = load_dataset(&a.data, cfg.render.background)?;
    if let Some(spec) = &data.scene {
        cfg.model.aabb = spec.aabb;
    }
    let mut trainer = match &a.ckpt {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            Trainer::resume(ck.scene, ck.iteration as usize, ck.rng)
        }
        None => {
            let scene = Scene::new(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
            Trainer::new(scene, cfg.train.seed)
        }
    };
    let snapshot = cfg.to_json();
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let set = RaySet::from_views(&data.train);
    let start = Instant::now();
    let history = train_loop(&mut trainer, &set, &data.test, &cfg.render, &cfg.train, |t| {
        save_checkpoint(
            &ckpt_path,
            &Checkpoint {
                config: snapshot.clone(),
                scene: t.scene.clone(),
                iteration: t.iteration as u64,
                rng: t.rng.clone(),
            },
        )
    })?;
    if history.is_empty() {
        save_checkpoint(
            &ckpt_path,
            &Checkpoint {
                config: snapshot.clone(),
                scene: trainer.scene.clone(),
                iteration: trainer.iteration as u64,
                rng: trainer.rng.clone(),
            },
        )?;
    }
    write_text(&a.out.join(METRICS_FILE), &metrics_csv(&history))?;
    write_text(&a.out.join("config.json"), &(snapshot + "\n"))?;
    if let Some(last) = history.last() {
        let p = last.psnr.map(|p| format!(", held-out PSNR {p:.2} dB")).unwrap_or_default();
        println!(
            "trained {} iterations in {:.1}s: loss {:.3e}{p}",
            history.len(),
            start.elapsed().as_secs_f64(),
            last.loss
        );
    }
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

/// Checkpoint, effective config and the views of the requested split.
fn open_run(a: &EvalArgs) -> Result<(Checkpoint, RunConfig, Vec<View>), CliError> {
    let ck = load_checkpoint(&a.ckpt)?;
    let base = RunConfig::from_json(&ck.config).unwrap_or_default();
    let cfg = resolve(&a.render, base)?;
    let Dataset { train, test, .. } = load_dataset(&a.data, cfg.render.background)?;
    let views = match a.split {
        Split::Train => train,
        Split::Test => test,
    };
    if views.is_empty() {
        return Err(CliError::Runtime(Error::InvalidValue(format!(
            "{} has no {:?} views",
            a.data.display(),
            a.split
        ))));
    }
    Ok((ck, cfg, views))
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Test => "test",
    }
}

pub fn render(a: &EvalArgs) -> Result<(), CliError> {
    let (ck, cfg, views) = open_run(a)?;
    let dir = a.out.join(split_name(a.split));
    for (i, v) in views.iter().enumerate() {
        let img = render_image(&ck.scene, &v.camera, &cfg.render)?;
        spikefield_core::dataio::write_png(&dir.join(format!("r_{i}.png")), &img)?;
    }
    println!("rendered {} views to {}", views.len(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct ViewScore {
    index: usize,
    psnr: f64,
    ssim: f64,
}

#[derive(Serialize)]
struct EvalReport {
    split: &'static str,
    psnr: f64,
    ssim: f64,
    views: Vec<ViewScore>,
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let (ck, cfg, views) = open_run(a)?;
    let mut scores = Vec::with_capacity(views.len());
    for (index, v) in views.iter().enumerate() {
        let img = render_image(&ck.scene, &v.camera, &cfg.render)?;
        scores.push(ViewScore {
            index,
            psnr: psnr(&img, &v.image)?,
            ssim: ssim(&img, &v.image)?,
        });
    }
    let n = scores.len() as f64;
    let report = EvalReport {
        split: split_name(a.split),
        psnr: scores.iter().map(|s| s.psnr).sum::<f64>() / n,
        ssim: scores.iter().map(|s| s.ssim).sum::<f64>() / n,
        views: scores,
    };
    let json = to_json(&report);
    write_text(&a.out.join("eval.json"), &json)?;
    print!("{json}");
    Ok(())
}

pub fn energy(a: &EvalArgs) -> Result<(), CliError> {
    let (ck, cfg, views) = open_run(a)?;
    let set = RaySet::from_views(&views);
    let out = render_rays(&ck.scene, &set.rays, &cfg.render)?;
    let ann = count_ops_ann(&ck.scene.mlp, out.queries as u64);
    let mut report = EnergyReport::new(&out.ops, &ann, &cfg.energy);
    report.scene = a.data.display().to_string();
    report.config = serde_json::to_string(&cfg.render).expect("render config is serializable");
    let json = to_json(&report);
    write_text(&a.out.join("energy.json"), &json)?;
    print!("{json}");
    Ok(())
}

pub fn pack_bench(a: &EvalArgs) -> Result<(), CliError> {
    let (ck, cfg, views) = open_run(a)?;
    let set = RaySet::from_views(&views);
    let width = ck.scene.input_width();
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.render.seed);
    for chunk in set.rays.chunks(cfg.render.chunk_size) {
        let trace = forward_chunk(&ck.scene, chunk, &cfg.render, &mut rng)?;
        let masked = trace.masked();
        let inputs: Vec<Vec<f64>> = trace.rays.iter().map(|r| r.inputs.clone()).collect();
        for mode in [PackingMode::Tp, PackingMode::Tcp] {
            let start = Instant::now();
            let mut batch = pack::pack(mode, &masked, &inputs, width, cfg.render.sort)?;
            if cfg.render.flip {
                batch = pack::temporal_flip(&batch);
            }
            smlp_forward(&ck.scene.mlp, &batch.data, &batch.occupancy, cfg.render.spike_fn)?;
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            let stats = pack::occupancy_stats(&batch);
            rows.push(PackReportRow {
                mode,
                rays: batch.rows(),
                steps: batch.steps(),
                valid_slots: stats.valid_slots,
                total_slots: stats.total_slots,
                density: stats.density,
                wall_ms,
            });
        }
    }
    let mut csv = Vec::new();
    write_pack_report(&mut csv, &rows).map_err(|e| io_err(&a.out, e))?;
    let csv = String::from_utf8(csv).expect("report is ASCII");
    write_text(&a.out.join("pack_bench.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn make_scene(a: &MakeSceneArgs) -> Result<(), CliError> {
    let mut spec = SceneSpec::preset(&a.preset)?;
    if let Some(s) = a.size {
        spec.width = s;
        spec.height = s;
    }
    let data = generate_procedural_scene(&spec, a.seed)?;
    write_dataset(&a.out, &data)?;
    println!(
        "wrote {} train and {} test views to {}",
        data.train.len(),
        data.test.len(),
        a.out.display()
    );
    Ok(())
}

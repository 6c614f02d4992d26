//! Datasets, procedural scenes, PNG I/O and checkpoints.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{Aabb, DensityActivation, DensityGrid, FeatureGrid};
use crate::rays::{compute_alpha, compute_transmittance, leftover_transmittance, sample_along_ray, Camera};
use crate::render::{ImageBuffer, Scene, View};
use crate::snn::{Layer, LifConfig, Neuron, SpikingMlp, SurrogateConfig, SurrogateForm};
use crate::{Error, Result, Vec3};

pub const TRAIN_MANIFEST: &str = "transforms_train.json";
pub const TEST_MANIFEST: &str = "transforms_test.json";
/// Scene description written next to generated datasets.
pub const SCENE_FILE: &str = "scene.json";

/// Rotation tolerance accepted from manifests.
const MANIFEST_ROTATION_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub file_path: String,
    pub transform_matrix: [[f64; 4]; 4],
}

/// The standard `transforms_*.json` layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub camera_angle_x: f64,
    pub frames: Vec<Frame>,
}

/// `0.5 * width / tan(0.5 * camera_angle_x)`.
pub fn focal_from_fov(width: u32, camera_angle_x: f64) -> f64 {
    0.5 * width as f64 / (0.5 * camera_angle_x).tan()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Loads a manifest and its images, compositing alpha over `background`.
pub fn load_manifest(path: &Path, background: [f64; 3]) -> Result<(DatasetManifest, Vec<View>)> {
    let manifest: DatasetManifest = read_json(path)?;
    let bad = |reason: String| Error::Manifest {
        path: path.to_path_buf(),
        reason,
    };
    if manifest.frames.is_empty() {
        return Err(bad("no frames".into()));
    }
    if !(manifest.camera_angle_x > 0.0 && manifest.camera_angle_x < std::f64::consts::PI) {
        return Err(bad(format!("camera_angle_x {} out of (0, pi)", manifest.camera_angle_x)));
    }
    let root = path.parent().unwrap_or(Path::new("."));
    let mut views = Vec::with_capacity(manifest.frames.len());
    for (i, frame) in manifest.frames.iter().enumerate() {
        let m = &frame.transform_matrix;
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(bad(format!("frame {i}: non-finite transform")));
        }
        let image = read_png(&resolve_image(root, &frame.file_path), background)?;
        let camera = Camera {
            width: image.width,
            height: image.height,
            focal: focal_from_fov(image.width, manifest.camera_angle_x),
            principal_point: [image.width as f64 / 2.0, image.height as f64 / 2.0],
            pose: [m[0], m[1], m[2]],
        };
        camera.validate(MANIFEST_ROTATION_TOL).map_err(|e| bad(format!("frame {i}: {e}")))?;
        views.push(View { camera, image });
    }
    Ok((manifest, views))
}

/// Frame paths may omit the `.png` extension.
fn resolve_image(root: &Path, file_path: &str) -> PathBuf {
    let p = root.join(file_path);
    if p.extension().is_none() {
        p.with_extension("png")
    } else {
        p
    }
}

/// Train and test views of a dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<View>,
    pub test: Vec<View>,
    /// Present when the directory was generated from a [`SceneSpec`].
    pub scene: Option<SceneSpec>,
}

/// Reads `transforms_train.json`, `transforms_test.json` (optional) and `scene.json` (optional).
pub fn load_dataset(dir: &Path, background: [f64; 3]) -> Result<Dataset> {
    let (_, train) = load_manifest(&dir.join(TRAIN_MANIFEST), background)?;
    let test_path = dir.join(TEST_MANIFEST);
    let test = if test_path.exists() {
        load_manifest(&test_path, background)?.1
    } else {
        Vec::new()
    };
    let scene_path = dir.join(SCENE_FILE);
    let scene = if scene_path.exists() {
        let s: SceneSpec = read_json(&scene_path)?;
        s.validate()?;
        Some(s)
    } else {
        None
    };
    Ok(Dataset { train, test, scene })
}

/// Decodes a PNG to RGB in `[0, 1]`, alpha composited over `background`.
pub fn read_png(path: &Path, background: [f64; 3]) -> Result<ImageBuffer> {
    let img = image::open(path)
        .map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            source => Error::Image {
                path: path.to_path_buf(),
                source,
            },
        })?
        .to_rgba8();
    let (width, height) = img.dimensions();
    let mut data = Vec::with_capacity(width as usize * height as usize * 3);
    for px in img.pixels() {
        let a = px[3] as f64 / 255.0;
        for k in 0..3 {
            data.push(px[k] as f64 / 255.0 * a + background[k] * (1.0 - a));
        }
    }
    Ok(ImageBuffer { width, height, data })
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    let buf = image::RgbImage::from_raw(img.width, img.height, bytes)
        .ok_or_else(|| Error::Shape(format!("{} values for {}x{} image", img.data.len(), img.width, img.height)))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extent: Vec3 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    pub density: f64,
    pub color: [f64; 3],
}

impl Primitive {
    pub fn contains(&self, p: Vec3) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        match self.shape {
            Shape::Sphere { radius } => d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= radius * radius,
            Shape::Box { half_extent: h } => (0..3).all(|k| d[k].abs() <= h[k]),
        }
    }

    fn half_extent(&self) -> Vec3 {
        match self.shape {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Box { half_extent } => half_extent,
        }
    }
}

/// Analytic scene plus the camera rig used to photograph it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub aabb: Aabb,
    pub width: u32,
    pub height: u32,
    pub train_views: usize,
    pub test_views: usize,
    pub camera_angle_x: f64,
    /// Distance of the cameras from the box centre.
    pub camera_radius: f64,
    pub background: [f64; 3],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            primitives: Vec::new(),
            aabb: Aabb::cube(1.0),
            width: 64,
            height: 64,
            train_views: 8,
            test_views: 2,
            camera_angle_x: 0.9,
            camera_radius: 4.0,
            background: [1.0; 3],
        }
    }
}

impl SceneSpec {
    /// A box and a sphere of distinct colours in `[-1, 1]^3`.
    pub fn cube_sphere() -> Self {
        Self {
            primitives: vec![
                Primitive {
                    shape: Shape::Box { half_extent: [0.35, 0.35, 0.35] },
                    center: [-0.35, -0.3, -0.25],
                    density: 60.0,
                    color: [0.85, 0.2, 0.15],
                },
                Primitive {
                    shape: Shape::Sphere { radius: 0.4 },
                    center: [0.35, 0.35, 0.1],
                    density: 60.0,
                    color: [0.15, 0.35, 0.85],
                },
            ],
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cube-sphere" => Ok(Self::cube_sphere()),
            "empty" => Ok(Self::default()),
            other => Err(Error::Config(format!("unknown scene preset `{other}` (expected cube-sphere or empty)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        Aabb::new(self.aabb.min, self.aabb.max)?;
        for (i, p) in self.primitives.iter().enumerate() {
            if !(p.density > 0.0) {
                return Err(Error::Config(format!("primitive {i}: density must be > 0")));
            }
            let h = p.half_extent();
            let inside = (0..3).all(|k| {
                h[k] > 0.0 && p.center[k] - h[k] >= self.aabb.min[k] && p.center[k] + h[k] <= self.aabb.max[k]
            });
            if !inside {
                return Err(Error::Config(format!("primitive {i} is not inside the bounding box")));
            }
        }
        if self.width == 0 || self.height == 0 || self.train_views == 0 {
            return Err(Error::Config("scene needs a non-empty image size and at least one train view".into()));
        }
        if !(self.camera_angle_x > 0.0 && self.camera_angle_x < std::f64::consts::PI) {
            return Err(Error::Config("camera_angle_x must lie in (0, pi)".into()));
        }
        let reach = 0.5 * self.aabb.diagonal();
        if !(self.camera_radius > reach) {
            return Err(Error::Config(format!("camera_radius must exceed {reach}")));
        }
        Ok(())
    }

    /// Summed density and density-weighted colour at `p`.
    pub fn field(&self, p: Vec3) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut rgb = [0.0; 3];
        for prim in self.primitives.iter().filter(|q| q.contains(p)) {
            sigma += prim.density;
            for k in 0..3 {
                rgb[k] += prim.density * prim.color[k];
            }
        }
        if sigma > 0.0 {
            rgb = rgb.map(|c| c / sigma);
        }
        (sigma, rgb)
    }

    /// March step of the ground-truth renderer.
    pub fn reference_step(&self) -> f64 {
        1e-3 * self.aabb.diagonal()
    }

    fn camera(&self, azimuth: f64, elevation: f64) -> Result<Camera> {
        let c = self.aabb.center();
        let r = self.camera_radius;
        let eye = [
            c[0] + r * elevation.cos() * azimuth.cos(),
            c[1] + r * elevation.cos() * azimuth.sin(),
            c[2] + r * elevation.sin(),
        ];
        let focal = focal_from_fov(self.width, self.camera_angle_x);
        Camera::look_at(self.width, self.height, focal, eye, c, [0.0, 0.0, 1.0])
    }

    /// Cameras spread in azimuth with jittered elevation; test views sit between train views.
    pub fn cameras(&self, seed: u64) -> Result<(Vec<Camera>, Vec<Camera>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tau = std::f64::consts::TAU;
        let mut rig = |n: usize, offset: f64| -> Result<Vec<Camera>> {
            (0..n)
                .map(|i| {
                    let az = tau * (i as f64 + offset + rng.gen_range(-0.1..0.1)) / n as f64;
                    let el = rng.gen_range(0.25..0.7);
                    self.camera(az, el)
                })
                .collect()
        };
        let train = rig(self.train_views, 0.0)?;
        let test = rig(self.test_views, 0.37)?;
        Ok((train, test))
    }
}

/// Ground truth by dense ray marching of the analytic field, composited over
/// the background exactly as the renderer does.
pub fn render_analytic(spec: &SceneSpec, camera: &Camera, step: f64) -> Result<ImageBuffer> {
    let pixels: Vec<[f64; 3]> = camera
        .all_rays()
        .par_iter()
        .map(|ray| {
            let s = sample_along_ray(ray, &spec.aabb, step)?;
            let mut alphas = Vec::with_capacity(s.count());
            let mut colors = Vec::with_capacity(s.count());
            for (p, &d) in s.positions.iter().zip(&s.deltas) {
                let (sigma, c) = spec.field(*p);
                alphas.push(compute_alpha(sigma, d));
                colors.push(c);
            }
            let trans = compute_transmittance(&alphas)?;
            let left = leftover_transmittance(&alphas);
            let mut out = spec.background.map(|b| left * b);
            for ((t, a), c) in trans.iter().zip(&alphas).zip(&colors) {
                for k in 0..3 {
                    out[k] += t * a * c[k];
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    ImageBuffer::from_pixels(camera.width, camera.height, &pixels)
}

/// Generated dataset before it is written to disk.
#[derive(Clone, Debug)]
pub struct ProceduralDataset {
    pub spec: SceneSpec,
    pub train: Vec<View>,
    pub test: Vec<View>,
}

/// Renders every view of `spec`; images are quantized to 8 bits so they match what gets written.
pub fn generate_procedural_scene(spec: &SceneSpec, seed: u64) -> Result<ProceduralDataset> {
    spec.validate()?;
    let (train_cams, test_cams) = spec.cameras(seed)?;
    let step = spec.reference_step();
    let shoot = |cams: Vec<Camera>| -> Result<Vec<View>> {
        cams.into_iter()
            .map(|camera| {
                let mut image = render_analytic(spec, &camera, step)?;
                image.data.iter_mut().for_each(|v| *v = to_u8(*v) as f64 / 255.0);
                Ok(View { camera, image })
            })
            .collect()
    };
    Ok(ProceduralDataset {
        spec: spec.clone(),
        train: shoot(train_cams)?,
        test: shoot(test_cams)?,
    })
}

fn manifest_for(split: &str, views: &[View], camera_angle_x: f64) -> DatasetManifest {
    DatasetManifest {
        camera_angle_x,
        frames: views
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let p = v.camera.pose;
                Frame {
                    file_path: format!("./{split}/r_{i}"),
                    transform_matrix: [p[0], p[1], p[2], [0.0, 0.0, 0.0, 1.0]],
                }
            })
            .collect(),
    }
}

/// Writes PNGs, both manifests and `scene.json` under `dir`.
pub fn write_dataset(dir: &Path, data: &ProceduralDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (split, views, file) in [("train", &data.train, TRAIN_MANIFEST), ("test", &data.test, TEST_MANIFEST)] {
        for (i, v) in views.iter().enumerate() {
            write_png(&dir.join(split).join(format!("r_{i}.png")), &v.image)?;
        }
        write_json(&dir.join(file), &manifest_for(split, views, data.spec.camera_angle_x))?;
    }
    write_json(&dir.join(SCENE_FILE), &data.spec)
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SPKN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or render.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// JSON snapshot of the configuration that produced the scene.
    pub config: String,
    pub scene: Scene,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.scene == other.scene && self.iteration == other.iteration && self.rng == other.rng
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.len(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }
    fn vec3(&mut self, v: Vec3) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn dims(&mut self, d: [usize; 3]) {
        d.iter().for_each(|&x| self.len(x));
    }
    fn aabb(&mut self, a: &Aabb) {
        self.vec3(a.min);
        self.vec3(a.max);
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::Truncated);
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Truncated)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        if n.checked_mul(8).is_none_or(|b| b > self.0.len()) {
            return Err(Error::Truncated);
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn vec3(&mut self) -> Result<Vec3> {
        Ok([self.f64()?, self.f64()?, self.f64()?])
    }
    fn dims(&mut self) -> Result<[usize; 3]> {
        Ok([self.len()?, self.len()?, self.len()?])
    }
    fn aabb(&mut self) -> Result<Aabb> {
        let min = self.vec3()?;
        let max = self.vec3()?;
        Aabb::new(min, max)
    }
}

fn corrupt(what: &str) -> Error {
    Error::InvalidValue(format!("corrupt checkpoint: {what}"))
}

/// Little-endian `SPKN` container.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.len(ck.config.len());
    w.0.extend_from_slice(ck.config.as_bytes());

    let d = &ck.scene.density;
    w.dims(d.dims);
    w.aabb(&d.aabb);
    match d.activation {
        DensityActivation::Relu => {
            w.u8(0);
            w.f64(0.0);
        }
        DensityActivation::ShiftedSoftplus { shift } => {
            w.u8(1);
            w.f64(shift);
        }
    }
    w.f64s(&d.values);

    let f = &ck.scene.features;
    w.dims(f.dims);
    w.len(f.channels);
    w.aabb(&f.aabb);
    w.f64s(&f.values);
    w.len(ck.scene.view_freqs);

    let mlp = &ck.scene.mlp;
    w.f64(mlp.surrogate.alpha_sg);
    w.u8(match mlp.surrogate.form {
        SurrogateForm::Sigmoid => 0,
        SurrogateForm::SigmoidDerivative => 1,
    });
    w.u8(mlp.detach_reset as u8);
    w.len(mlp.layers.len());
    for layer in &mlp.layers {
        w.len(layer.in_width);
        w.len(layer.out_width);
        match layer.neuron {
            None => w.u8(0),
            Some(Neuron::Lif(c)) => {
                w.u8(1);
                w.f64(c.tau);
                w.f64(c.v_th);
                w.f64(c.v_reset);
            }
            Some(Neuron::Relu) => w.u8(2),
            Some(Neuron::Identity) => w.u8(3),
        }
        w.f64s(&layer.weights);
        w.f64s(&layer.bias);
    }

    w.u64(ck.iteration);
    w.0.extend_from_slice(&ck.rng.get_seed());
    w.u64(ck.rng.get_stream());
    w.0.extend_from_slice(&ck.rng.get_word_pos().to_le_bytes());
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader(bytes);
    if r.take(4).map_err(|_| Error::BadMagic)? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let n = r.len()?;
    let config = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| corrupt("config is not UTF-8"))?;

    let dims = r.dims()?;
    let aabb = r.aabb()?;
    let tag = r.u8()?;
    let shift = r.f64()?;
    let activation = match tag {
        0 => DensityActivation::Relu,
        1 => DensityActivation::ShiftedSoftplus { shift },
        _ => return Err(corrupt("density activation tag")),
    };
    let density = DensityGrid::from_values(dims, r.f64s()?, aabb, activation)?;

    let dims = r.dims()?;
    let channels = r.len()?;
    let aabb = r.aabb()?;
    let features = FeatureGrid::from_values(dims, channels, r.f64s()?, aabb)?;
    let view_freqs = r.len()?;

    let alpha_sg = r.f64()?;
    let form = match r.u8()? {
        0 => SurrogateForm::Sigmoid,
        1 => SurrogateForm::SigmoidDerivative,
        _ => return Err(corrupt("surrogate tag")),
    };
    let detach_reset = match r.u8()? {
        0 => false,
        1 => true,
        _ => return Err(corrupt("detach flag")),
    };
    let n_layers = r.len()?;
    let mut layers = Vec::new();
    for _ in 0..n_layers {
        let in_width = r.len()?;
        let out_width = r.len()?;
        let neuron = match r.u8()? {
            0 => None,
            1 => Some(Neuron::Lif(LifConfig {
                tau: r.f64()?,
                v_th: r.f64()?,
                v_reset: r.f64()?,
            })),
            2 => Some(Neuron::Relu),
            3 => Some(Neuron::Identity),
            _ => return Err(corrupt("neuron tag")),
        };
        let weights = r.f64s()?;
        let bias = r.f64s()?;
        layers.push(Layer {
            in_width,
            out_width,
            weights,
            bias,
            neuron,
        });
    }
    let mlp = SpikingMlp {
        layers,
        surrogate: SurrogateConfig { alpha_sg, form },
        detach_reset,
    };
    let scene = Scene {
        density,
        features,
        mlp,
        view_freqs,
    };
    scene.validate()?;

    let iteration = r.u64()?;
    let mut rng = ChaCha8Rng::from_seed(r.array::<32>()?);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(u128::from_le_bytes(r.array::<16>()?));
    if !r.0.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(Checkpoint {
        config,
        scene,
        iteration,
        rng,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{ModelConfig, NeuronKind};
    use approx::assert_relative_eq;
    use rand::RngCore;

    fn small_spec(primitives: Vec<Primitive>) -> SceneSpec {
        SceneSpec {
            primitives,
            width: 16,
            height: 16,
            train_views: 2,
            test_views: 1,
            ..SceneSpec::default()
        }
    }

    fn random_checkpoint(seed: u64) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig {
            grid_dims: [5, 4, 3],
            feature_channels: 2,
            hidden: vec![4, 3],
            view_freqs: 1,
            ..ModelConfig::default()
        };
        let mut scene = Scene::new(&cfg, &mut rng).unwrap();
        scene.density.values.iter_mut().for_each(|v| *v = rng.gen_range(-3.0..3.0));
        scene.mlp.layers[1].neuron = Some(Neuron::Relu);
        let mut state = ChaCha8Rng::seed_from_u64(seed + 1);
        state.next_u64();
        Checkpoint {
            config: "{\"k\": 1}".into(),
            scene,
            iteration: 1234,
            rng: state,
        }
    }

    #[test]
    fn focal_examples() {
        assert_relative_eq!(focal_from_fov(800, std::f64::consts::FRAC_PI_2), 400.0, epsilon = 1e-9);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let ck = random_checkpoint(3);
        let back = decode_checkpoint(&encode_checkpoint(&ck)).unwrap();
        assert_eq!(back, ck);
        let mut a = ck.rng.clone();
        let mut b = back.rng.clone();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn checkpoint_errors_are_distinct() {
        let bytes = encode_checkpoint(&random_checkpoint(4));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic)));
        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_checkpoint(&newer), Err(Error::UnsupportedVersion { found: 2, expected: 1 })));
        for cut in [bytes.len() - 1, bytes.len() / 2, 9] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Truncated)), "cut {cut}");
        }
        assert!(matches!(decode_checkpoint(&bytes[..2]), Err(Error::BadMagic)));
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ck = random_checkpoint(5);
        let path = dir.path().join("run").join("ckpt");
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
        let fresh = Scene::new(&ModelConfig { neuron: NeuronKind::Identity, ..ModelConfig::default() }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let ck2 = Checkpoint { scene: fresh, ..ck };
        save_checkpoint(&path, &ck2).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck2);
    }

    #[test]
    fn empty_scene_is_background() {
        let spec = small_spec(Vec::new());
        let data = generate_procedural_scene(&spec, 1).unwrap();
        for v in data.train.iter().chain(&data.test) {
            assert!(v.image.data.iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn red_sphere_centre_pixel() {
        let spec = small_spec(vec![Primitive {
            shape: Shape::Sphere { radius: 0.5 },
            center: [0.0; 3],
            density: 200.0,
            color: [1.0, 0.0, 0.0],
        }]);
        let data = generate_procedural_scene(&spec, 2).unwrap();
        for v in &data.train {
            let c = v.image.get(8, 8);
            assert!((c[0] - 1.0).abs() <= 1.0 / 255.0 && c[1] <= 1.0 / 255.0 && c[2] <= 1.0 / 255.0, "{c:?}");
        }
    }

    #[test]
    fn dataset_files_are_deterministic_and_loadable() {
        let spec = small_spec(SceneSpec::cube_sphere().primitives);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(a.path(), &generate_procedural_scene(&spec, 7).unwrap()).unwrap();
        write_dataset(b.path(), &generate_procedural_scene(&spec, 7).unwrap()).unwrap();
        for rel in ["transforms_train.json", "transforms_test.json", "scene.json", "train/r_1.png", "test/r_0.png"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
        }
        let ds = load_dataset(a.path(), [1.0; 3]).unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (2, 1));
        assert_eq!(ds.scene.unwrap(), spec);
        let gen = generate_procedural_scene(&spec, 7).unwrap();
        assert_eq!(ds.train[1].image, gen.train[1].image);
        assert_relative_eq!(ds.train[0].camera.focal, gen.train[0].camera.focal, epsilon = 1e-9);
    }

    #[test]
    fn missing_image_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = r#"{"camera_angle_x": 0.69, "frames": [{"file_path": "./train/r_0", "rotation": 0.0,
            "transform_matrix": [[1,0,0,0],[0,1,0,0],[0,0,1,4],[0,0,0,1]]}]}"#;
        let path = dir.path().join(TRAIN_MANIFEST);
        fs::write(&path, manifest).unwrap();
        let err = load_manifest(&path, [1.0; 3]).unwrap_err().to_string();
        assert!(err.contains("r_0.png"), "{err}");
    }

    #[test]
    fn manifest_rejects_skewed_rotation() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), &ImageBuffer::filled(2, 2, [0.5; 3])).unwrap();
        let manifest = r#"{"camera_angle_x": 0.69, "frames": [{"file_path": "a.png",
            "transform_matrix": [[1,0.01,0,0],[0,1,0,0],[0,0,1,4],[0,0,0,1]]}]}"#;
        let path = dir.path().join("m.json");
        fs::write(&path, manifest).unwrap();
        assert!(matches!(load_manifest(&path, [1.0; 3]), Err(Error::Manifest { .. })));
        fs::write(&path, "{ not json").unwrap();
        assert!(matches!(load_manifest(&path, [1.0; 3]), Err(Error::Json { .. })));
    }

    #[test]
    fn alpha_is_composited_over_background() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgba.png");
        image::RgbaImage::from_raw(1, 1, vec![255, 0, 0, 0]).unwrap().save(&path).unwrap();
        let img = read_png(&path, [0.0, 1.0, 0.0]).unwrap();
        assert_eq!(img.data, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn spec_validation() {
        let mut spec = SceneSpec::cube_sphere();
        spec.validate().unwrap();
        spec.primitives[0].density = 0.0;
        assert!(spec.validate().is_err());
        let mut spec = SceneSpec::cube_sphere();
        spec.primitives[1].center = [0.9, 0.0, 0.0];
        assert!(spec.validate().is_err());
        assert!(SceneSpec::preset("teapot").is_err());
    }
}

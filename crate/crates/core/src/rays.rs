//! Pinhole cameras, ray sampling and the discrete volume-rendering weights.

use crate::grid::Aabb;
use crate::{Error, Result, Vec3};

/// Smallest interval length a sample may carry.
pub const MIN_DELTA: f64 = 1e-9;

/// Pinhole camera. `pose` is camera-to-world `[R | t]`; the camera looks
/// along its local -z with +y up.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub principal_point: [f64; 2],
    pub pose: [[f64; 4]; 3],
}

impl Camera {
    pub fn new(width: u32, height: u32, focal: f64, pose: [[f64; 4]; 3]) -> Result<Self> {
        let cam = Self {
            width,
            height,
            focal,
            principal_point: [width as f64 / 2.0, height as f64 / 2.0],
            pose,
        };
        cam.validate(1e-4)?;
        Ok(cam)
    }

    pub(crate) fn validate(&self, tol: f64) -> Result<()> {
        if !(self.focal > 0.0) || !self.focal.is_finite() {
            return Err(Error::InvalidValue(format!("focal {} must be > 0", self.focal)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidValue("camera with empty image".into()));
        }
        check_rotation(&self.pose, tol)
    }

    pub fn origin(&self) -> Vec3 {
        [self.pose[0][3], self.pose[1][3], self.pose[2][3]]
    }

    /// Camera looking from `eye` at `target`.
    pub fn look_at(width: u32, height: u32, focal: f64, eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let back = normalize(sub(eye, target));
        let right = normalize(cross(up, back));
        let true_up = cross(back, right);
        let pose = [
            [right[0], true_up[0], back[0], eye[0]],
            [right[1], true_up[1], back[1], eye[1]],
            [right[2], true_up[2], back[2], eye[2]],
        ];
        Self::new(width, height, focal, pose)
    }

    pub fn ray(&self, x: u32, y: u32) -> Result<Ray> {
        if x >= self.width || y >= self.height {
            return Err(Error::PixelOutOfBounds {
                x,
                y,
                width: self.width,
                height: self.height,
            });
        }
        let d_cam = [
            (x as f64 + 0.5 - self.principal_point[0]) / self.focal,
            -(y as f64 + 0.5 - self.principal_point[1]) / self.focal,
            -1.0,
        ];
        let r = &self.pose;
        let d = [
            r[0][0] * d_cam[0] + r[0][1] * d_cam[1] + r[0][2] * d_cam[2],
            r[1][0] * d_cam[0] + r[1][1] * d_cam[1] + r[1][2] * d_cam[2],
            r[2][0] * d_cam[0] + r[2][1] * d_cam[1] + r[2][2] * d_cam[2],
        ];
        Ok(Ray {
            origin: self.origin(),
            direction: normalize(d),
            pixel_index: y as usize * self.width as usize + x as usize,
        })
    }

    /// Rays for every pixel in row-major order.
    pub fn all_rays(&self) -> Vec<Ray> {
        let mut rays = Vec::with_capacity(self.width as usize * self.height as usize);
        for y in 0..self.height {
            for x in 0..self.width {
                rays.push(self.ray(x, y).expect("pixel in range"));
            }
        }
        rays
    }
}

pub(crate) fn check_rotation(pose: &[[f64; 4]; 3], tol: f64) -> Result<()> {
    if pose.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("non-finite pose".into()));
    }
    for a in 0..3 {
        for b in 0..3 {
            let dot: f64 = (0..3).map(|r| pose[r][a] * pose[r][b]).sum();
            let want = if a == b { 1.0 } else { 0.0 };
            if (dot - want).abs() > tol {
                return Err(Error::InvalidValue(format!(
                    "pose rotation not orthonormal (column dot {a}.{b} = {dot:.6})"
                )));
            }
        }
    }
    Ok(())
}

/// One ray per requested `(x, y)` pixel.
pub fn generate_rays(camera: &Camera, pixels: &[(u32, u32)]) -> Result<Vec<Ray>> {
    pixels.iter().map(|&(x, y)| camera.ray(x, y)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub pixel_index: usize,
}

impl Ray {
    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }

    /// Parametric entry and exit distances through `aabb`, clipped to `t >= 0`.
    pub fn intersect(&self, aabb: &Aabb) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let d = self.direction[a];
            if d.abs() < 1e-300 {
                if self.origin[a] < aabb.min[a] || self.origin[a] > aabb.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let mut ta = (aabb.min[a] - self.origin[a]) * inv;
            let mut tb = (aabb.max[a] - self.origin[a]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 < t1).then_some((t0, t1))
    }
}

/// Uniformly spaced samples of one ray inside the scene box.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub ray: Ray,
    pub positions: Vec<Vec3>,
    pub deltas: Vec<f64>,
}

impl RaySamples {
    pub fn count(&self) -> usize {
        self.positions.len()
    }
}

/// Samples at `t_near + (k + 0.5) * step` while inside the box.
pub fn sample_along_ray(ray: &Ray, aabb: &Aabb, step_size: f64) -> Result<RaySamples> {
    if !(step_size > 0.0) {
        return Err(Error::InvalidValue(format!("step size {step_size} must be > 0")));
    }
    let mut out = RaySamples {
        ray: *ray,
        positions: Vec::new(),
        deltas: Vec::new(),
    };
    let Some((t_near, t_far)) = ray.intersect(aabb) else {
        return Ok(out);
    };
    let mut k = 0usize;
    loop {
        let t = t_near + (k as f64 + 0.5) * step_size;
        if t >= t_far {
            break;
        }
        let mut p = ray.at(t);
        for a in 0..3 {
            p[a] = p[a].clamp(aabb.min[a], aabb.max[a]);
        }
        out.positions.push(p);
        out.deltas.push(step_size);
        k += 1;
    }
    if let Some(last) = out.deltas.last_mut() {
        let t_last = t_near + (k as f64 - 0.5) * step_size;
        *last = (t_far - t_last).min(step_size).max(MIN_DELTA);
    }
    Ok(out)
}

/// `1 - exp(-sigma * delta)`.
#[inline]
pub fn compute_alpha(sigma: f64, delta: f64) -> f64 {
    -(-sigma * delta).exp_m1()
}

/// `T_i = prod_{j < i} (1 - alpha_j)`.
pub fn compute_transmittance(alphas: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(alphas.len());
    let mut t = 1.0;
    for &a in alphas {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::InvalidValue(format!("alpha {a} outside [0, 1]")));
        }
        out.push(t);
        t *= 1.0 - a;
    }
    Ok(out)
}

/// Transmittance left after every sample, `prod_i (1 - alpha_i)`.
pub fn leftover_transmittance(alphas: &[f64]) -> f64 {
    alphas.iter().map(|a| 1.0 - a).product()
}

/// Indices `i` with `T_i > lambda1` and `alpha_i > lambda2`.
pub fn mask_indices(alphas: &[f64], transmittance: &[f64], lambda1: f64, lambda2: f64) -> Vec<usize> {
    alphas
        .iter()
        .zip(transmittance)
        .enumerate()
        .filter(|(_, (&a, &t))| t > lambda1 && a > lambda2)
        .map(|(i, _)| i)
        .collect()
}

/// Samples of one ray that survived masking.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskedRay {
    /// Number of samples before masking.
    pub sample_count: usize,
    /// Original sample indices, strictly increasing.
    pub indices: Vec<usize>,
    pub positions: Vec<Vec3>,
    pub alphas: Vec<f64>,
    pub transmittance: Vec<f64>,
}

impl MaskedRay {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Survivor sets for a batch of rays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskedSamples {
    pub rays: Vec<MaskedRay>,
}

impl MaskedSamples {
    pub fn ray_count(&self) -> usize {
        self.rays.len()
    }

    pub fn survivor_count(&self) -> usize {
        self.rays.iter().map(MaskedRay::len).sum()
    }
}

pub fn apply_mask(
    samples: &RaySamples,
    alphas: &[f64],
    transmittance: &[f64],
    lambda1: f64,
    lambda2: f64,
) -> Result<MaskedRay> {
    if alphas.len() != samples.count() || transmittance.len() != samples.count() {
        return Err(Error::Shape(format!(
            "{} samples with {} alphas and {} transmittances",
            samples.count(),
            alphas.len(),
            transmittance.len()
        )));
    }
    let indices = mask_indices(alphas, transmittance, lambda1, lambda2);
    Ok(MaskedRay {
        sample_count: samples.count(),
        positions: indices.iter().map(|&i| samples.positions[i]).collect(),
        alphas: indices.iter().map(|&i| alphas[i]).collect(),
        transmittance: indices.iter().map(|&i| transmittance[i]).collect(),
        indices,
    })
}

#[inline]
pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub(crate) fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[inline]
pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

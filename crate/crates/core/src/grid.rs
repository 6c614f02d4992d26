//! Dense voxel grids holding raw density and per-node feature vectors.
//!
//! Nodes sit on cell corners and span the bounding box inclusively, so a grid
//! with `dims = [n, n, n]` has `n - 1` cells per axis. Values are stored flat
//! with x varying fastest; feature grids keep the channel vector of a node
//! contiguous.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec3};

/// Points this far outside the box (relative to its extent) are snapped back.
const BOUNDARY_SLACK: f64 = 1e-9;

/// Axis-aligned scene bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|a| !(min[a] < max[a]) || !min[a].is_finite() || !max[a].is_finite()) {
            return Err(Error::InvalidValue(format!(
                "aabb min {min:?} must be below max {max:?} on every axis"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn extent(&self) -> Vec3 {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn center(&self) -> Vec3 {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    pub fn diagonal(&self) -> f64 {
        let e = self.extent();
        (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// Maps a world point to continuous grid coordinates in `[0, dim - 1]`.
pub fn world_to_grid(p: Vec3, aabb: &Aabb, dims: [usize; 3]) -> Result<Vec3> {
    let mut g = [0.0; 3];
    for a in 0..3 {
        let extent = aabb.max[a] - aabb.min[a];
        let u = (p[a] - aabb.min[a]) / extent;
        if !(-BOUNDARY_SLACK..=1.0 + BOUNDARY_SLACK).contains(&u) {
            return Err(Error::OutsideGrid(p));
        }
        g[a] = u.clamp(0.0, 1.0) * (dims[a] - 1) as f64;
    }
    Ok(g)
}

/// The 8 nodes enclosing a point and their trilinear weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil {
    pub nodes: [usize; 8],
    pub weights: [f64; 8],
}

impl Stencil {
    pub fn new(p: Vec3, aabb: &Aabb, dims: [usize; 3]) -> Result<Self> {
        let g = world_to_grid(p, aabb, dims)?;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            if dims[a] < 2 {
                continue;
            }
            let i = (g[a].floor() as usize).min(dims[a] - 2);
            base[a] = i;
            frac[a] = g[a] - i as f64;
        }
        // Degenerate single-node axes reuse the same node on both sides.
        let step = [
            usize::from(dims[0] > 1),
            usize::from(dims[1] > 1),
            usize::from(dims[2] > 1),
        ];
        let mut nodes = [0usize; 8];
        let mut weights = [0.0; 8];
        for corner in 0..8 {
            let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            let x = base[0] + dx * step[0];
            let y = base[1] + dy * step[1];
            let z = base[2] + dz * step[2];
            nodes[corner] = x + dims[0] * (y + dims[1] * z);
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            weights[corner] = wx * wy * wz;
        }
        Ok(Self { nodes, weights })
    }
}

#[inline]
fn node_count(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Shape(format!("grid dims must be positive, got {dims:?}")));
    }
    Ok(())
}

/// Activation turning raw grid density into extinction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityActivation {
    Relu,
    ShiftedSoftplus { shift: f64 },
}

impl Default for DensityActivation {
    fn default() -> Self {
        DensityActivation::ShiftedSoftplus { shift: -10.0 }
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `act(raw)`; never overflows for finite input.
pub fn activate_density(raw: f64, activation: DensityActivation) -> f64 {
    match activation {
        DensityActivation::Relu => raw.max(0.0),
        DensityActivation::ShiftedSoftplus { shift } => softplus(raw + shift),
    }
}

/// `d act / d raw`.
pub fn activate_density_grad(raw: f64, activation: DensityActivation) -> f64 {
    match activation {
        DensityActivation::Relu => {
            if raw > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        DensityActivation::ShiftedSoftplus { shift } => sigmoid(raw + shift),
    }
}

/// Raw (pre-activation) density values on grid nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub dims: [usize; 3],
    pub values: Vec<f64>,
    pub aabb: Aabb,
    pub activation: DensityActivation,
}

impl DensityGrid {
    pub fn zeros(dims: [usize; 3], aabb: Aabb, activation: DensityActivation) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            dims,
            values: vec![0.0; node_count(dims)],
            aabb,
            activation,
        })
    }

    pub fn from_values(
        dims: [usize; 3],
        values: Vec<f64>,
        aabb: Aabb,
        activation: DensityActivation,
    ) -> Result<Self> {
        check_dims(dims)?;
        if values.len() != node_count(dims) {
            return Err(Error::Shape(format!(
                "{} density values for dims {dims:?}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite density value".into()));
        }
        Ok(Self {
            dims,
            values,
            aabb,
            activation,
        })
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn stencil(&self, p: Vec3) -> Result<Stencil> {
        Stencil::new(p, &self.aabb, self.dims)
    }

    /// Trilinearly interpolated raw density.
    pub fn interp(&self, p: Vec3) -> Result<f64> {
        Ok(self.interp_stencil(&self.stencil(p)?))
    }

    #[inline]
    pub fn interp_stencil(&self, s: &Stencil) -> f64 {
        s.nodes
            .iter()
            .zip(&s.weights)
            .map(|(&n, &w)| w * self.values[n])
            .sum()
    }

    /// Activated density `act(interp(p))`.
    pub fn density(&self, p: Vec3) -> Result<f64> {
        Ok(activate_density(self.interp(p)?, self.activation))
    }

    /// Edge length of one cell along x.
    pub fn voxel_size(&self) -> f64 {
        let e = self.aabb.extent();
        (0..3)
            .filter(|&a| self.dims[a] > 1)
            .map(|a| e[a] / (self.dims[a] - 1) as f64)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn gradient(&self) -> GridGradient {
        GridGradient::zeros(self.dims, 1)
    }
}

/// Feature vectors on grid nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub dims: [usize; 3],
    pub channels: usize,
    pub values: Vec<f64>,
    pub aabb: Aabb,
}

impl FeatureGrid {
    pub fn zeros(dims: [usize; 3], channels: usize, aabb: Aabb) -> Result<Self> {
        check_dims(dims)?;
        if channels == 0 {
            return Err(Error::Shape("feature grid needs at least one channel".into()));
        }
        Ok(Self {
            dims,
            channels,
            values: vec![0.0; node_count(dims) * channels],
            aabb,
        })
    }

    /// Uniform init in `[-scale, scale]`.
    pub fn random<R: Rng>(
        dims: [usize; 3],
        channels: usize,
        aabb: Aabb,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut g = Self::zeros(dims, channels, aabb)?;
        for v in &mut g.values {
            *v = rng.gen_range(-scale..=scale);
        }
        Ok(g)
    }

    pub fn from_values(
        dims: [usize; 3],
        channels: usize,
        values: Vec<f64>,
        aabb: Aabb,
    ) -> Result<Self> {
        check_dims(dims)?;
        if channels == 0 || values.len() != node_count(dims) * channels {
            return Err(Error::Shape(format!(
                "{} feature values for dims {dims:?} x {channels} channels",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite feature value".into()));
        }
        Ok(Self {
            dims,
            channels,
            values,
            aabb,
        })
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> &[f64] {
        let n = i + self.dims[0] * (j + self.dims[1] * k);
        &self.values[n * self.channels..(n + 1) * self.channels]
    }

    pub fn node_mut(&mut self, i: usize, j: usize, k: usize) -> &mut [f64] {
        let n = i + self.dims[0] * (j + self.dims[1] * k);
        &mut self.values[n * self.channels..(n + 1) * self.channels]
    }

    pub fn stencil(&self, p: Vec3) -> Result<Stencil> {
        Stencil::new(p, &self.aabb, self.dims)
    }

    pub fn interp(&self, p: Vec3) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.channels];
        self.interp_into(&self.stencil(p)?, &mut out);
        Ok(out)
    }

    /// Writes the interpolated feature into `out[..channels]`.
    #[inline]
    pub fn interp_into(&self, s: &Stencil, out: &mut [f64]) {
        let c = self.channels;
        out[..c].iter_mut().for_each(|o| *o = 0.0);
        for (&n, &w) in s.nodes.iter().zip(&s.weights) {
            let node = &self.values[n * c..(n + 1) * c];
            for (o, v) in out[..c].iter_mut().zip(node) {
                *o += w * v;
            }
        }
    }

    pub fn gradient(&self) -> GridGradient {
        GridGradient::zeros(self.dims, self.channels)
    }
}

/// Accumulated partial derivatives mirroring a density or feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridGradient {
    pub dims: [usize; 3],
    pub channels: usize,
    pub values: Vec<f64>,
}

impl GridGradient {
    pub fn zeros(dims: [usize; 3], channels: usize) -> Self {
        Self {
            dims,
            channels,
            values: vec![0.0; node_count(dims) * channels],
        }
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Adds `upstream * weight` onto each enclosing node.
    #[inline]
    pub fn scatter(&mut self, s: &Stencil, upstream: &[f64]) -> Result<()> {
        let c = self.channels;
        if upstream.len() != c {
            return Err(Error::Shape(format!(
                "upstream gradient of length {} for {c}-channel grid",
                upstream.len()
            )));
        }
        for (&n, &w) in s.nodes.iter().zip(&s.weights) {
            if w == 0.0 {
                continue;
            }
            let node = &mut self.values[n * c..(n + 1) * c];
            for (g, u) in node.iter_mut().zip(upstream) {
                *g += w * u;
            }
        }
        Ok(())
    }

    /// Adds another gradient of the same shape.
    pub fn merge(&mut self, other: &GridGradient) -> Result<()> {
        if self.dims != other.dims || self.channels != other.channels {
            return Err(Error::Shape("merging gradients of different shapes".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }
}

/// Reverse-mode interpolation: scatters `upstream` at `p` onto `grad`.
pub fn interp_backward(
    grid_dims: [usize; 3],
    aabb: &Aabb,
    p: Vec3,
    upstream: &[f64],
    grad: &mut GridGradient,
) -> Result<()> {
    if grad.dims != grid_dims {
        return Err(Error::Shape(format!(
            "gradient dims {:?} do not match grid dims {grid_dims:?}",
            grad.dims
        )));
    }
    let s = Stencil::new(p, aabb, grid_dims)?;
    grad.scatter(&s, upstream)
}

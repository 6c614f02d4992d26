//! Time-ray alignment: survivor samples of each ray become consecutive time
//! steps of one batch row.
//!
//! Masking leaves rays with different survivor counts. Two layouts make the
//! batch regular:
//!
//! * TP keeps every sample at its original index along the ray and fills
//!   masked slots with zeros, which the LIF layers still integrate.
//! * TCP drops masked samples entirely and left-aligns the survivors, so the
//!   row length is the survivor count and padding only trails.
//!
//! Every occupied slot remembers the `(ray, sample)` it came from, which lets
//! [`unpack_scatter`] undo sorting and flipping.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::rays::MaskedSamples;
use crate::tensor::Tensor3;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PackingMode {
    Tp,
    #[default]
    Tcp,
}

impl fmt::Display for PackingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PackingMode::Tp => "tp",
            PackingMode::Tcp => "tcp",
        })
    }
}

/// Origin of an occupied slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleRef {
    /// Original ray index.
    pub ray: usize,
    /// Sample index along the ray before masking.
    pub sample: usize,
    /// Position among the ray's survivors.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedBatch {
    pub mode: PackingMode,
    /// `[row, time, channel]`; exactly zero wherever `occupancy` is false.
    pub data: Tensor3,
    /// `[row, time]`.
    pub occupancy: Vec<bool>,
    /// Packed row -> original ray.
    pub ray_permutation: Vec<usize>,
    /// `[row, time]`, `Some` exactly on occupied slots.
    pub scatter_map: Vec<Option<SampleRef>>,
    /// Slots of each row that belong to its ray (raw sample count for TP,
    /// survivor count for TCP). Flipping reverses this prefix.
    pub row_extent: Vec<usize>,
    pub flipped: bool,
}

impl PackedBatch {
    pub fn rows(&self) -> usize {
        self.data.dims()[0]
    }

    /// Packed temporal length `T`.
    pub fn steps(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn valid_slots(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    /// Places per-survivor vectors (`per_ray[ray]` is `survivors x width`) into a
    /// tensor laid out like this batch.
    pub fn gather(&self, per_ray: &[Vec<f64>], width: usize) -> Result<Tensor3> {
        let rows = self.rows();
        let steps = self.steps();
        if per_ray.len() != rows {
            return Err(Error::Shape(format!("{} rays for a batch of {rows}", per_ray.len())));
        }
        let mut out = Tensor3::zeros([rows, steps, width]);
        for (slot, sref) in self.scatter_map.iter().enumerate() {
            let Some(sref) = sref else { continue };
            let src = per_ray[sref.ray]
                .get(sref.rank * width..(sref.rank + 1) * width)
                .ok_or_else(|| Error::Shape(format!("ray {} lacks survivor {}", sref.ray, sref.rank)))?;
            out.at_mut(slot / steps, slot % steps).copy_from_slice(src);
        }
        Ok(out)
    }
}

fn check_features(masked: &MaskedSamples, features: &[Vec<f64>], channels: usize) -> Result<()> {
    if features.len() != masked.rays.len() {
        return Err(Error::Shape(format!(
            "{} feature lists for {} rays",
            features.len(),
            masked.rays.len()
        )));
    }
    for (r, (m, f)) in masked.rays.iter().zip(features).enumerate() {
        if f.len() != m.len() * channels {
            return Err(Error::Shape(format!(
                "ray {r}: {} feature values for {} survivors x {channels} channels",
                f.len(),
                m.len()
            )));
        }
    }
    Ok(())
}

fn build(
    mode: PackingMode,
    masked: &MaskedSamples,
    features: &[Vec<f64>],
    channels: usize,
    order: Vec<usize>,
    steps: usize,
) -> Result<PackedBatch> {
    let rows = order.len();
    let mut occupancy = vec![false; rows * steps];
    let mut scatter_map = vec![None; rows * steps];
    let mut row_extent = Vec::with_capacity(rows);
    for (row, &ray) in order.iter().enumerate() {
        let m = &masked.rays[ray];
        row_extent.push(match mode {
            PackingMode::Tp => m.sample_count,
            PackingMode::Tcp => m.len(),
        });
        for (rank, &sample) in m.indices.iter().enumerate() {
            let t = match mode {
                PackingMode::Tp => sample,
                PackingMode::Tcp => rank,
            };
            occupancy[row * steps + t] = true;
            scatter_map[row * steps + t] = Some(SampleRef { ray, sample, rank });
        }
    }
    let mut batch = PackedBatch {
        mode,
        data: Tensor3::zeros([rows, steps, channels]),
        occupancy,
        ray_permutation: order,
        scatter_map,
        row_extent,
        flipped: false,
    };
    batch.data = batch.gather(features, channels)?;
    Ok(batch)
}

/// Temporal padding: survivors stay at their original sample index.
pub fn pack_tp(masked: &MaskedSamples, features: &[Vec<f64>], channels: usize) -> Result<PackedBatch> {
    check_features(masked, features, channels)?;
    for (r, m) in masked.rays.iter().enumerate() {
        if m.indices.last().is_some_and(|&i| i >= m.sample_count) {
            return Err(Error::Shape(format!("ray {r}: survivor index beyond sample count")));
        }
    }
    let steps = masked.rays.iter().map(|m| m.sample_count).max().unwrap_or(0);
    let order = (0..masked.rays.len()).collect();
    build(PackingMode::Tp, masked, features, channels, order, steps)
}

/// Temporal condensing and padding: survivors are left-aligned. With `sort`,
/// rows are ordered by descending survivor count (stable on ray index).
pub fn pack_tcp(masked: &MaskedSamples, features: &[Vec<f64>], channels: usize, sort: bool) -> Result<PackedBatch> {
    check_features(masked, features, channels)?;
    let steps = masked.rays.iter().map(|m| m.len()).max().unwrap_or(0);
    let mut order: Vec<usize> = (0..masked.rays.len()).collect();
    if sort {
        order.sort_by_key(|&r| std::cmp::Reverse(masked.rays[r].len()));
    }
    build(PackingMode::Tcp, masked, features, channels, order, steps)
}

pub fn pack(
    mode: PackingMode,
    masked: &MaskedSamples,
    features: &[Vec<f64>],
    channels: usize,
    sort: bool,
) -> Result<PackedBatch> {
    match mode {
        PackingMode::Tp => pack_tp(masked, features, channels),
        PackingMode::Tcp => pack_tcp(masked, features, channels, sort),
    }
}

/// Reverses the time order of every row within its extent.
pub fn temporal_flip(batch: &PackedBatch) -> PackedBatch {
    let mut out = batch.clone();
    let steps = batch.steps();
    for (row, &extent) in batch.row_extent.iter().enumerate() {
        for t in 0..extent {
            let src = row * steps + t;
            let dst = row * steps + (extent - 1 - t);
            out.occupancy[dst] = batch.occupancy[src];
            out.scatter_map[dst] = batch.scatter_map[src];
            out.data.at_mut(row, extent - 1 - t).copy_from_slice(batch.data.at(row, t));
        }
    }
    out.flipped = !batch.flipped;
    out
}

/// Routes each occupied slot of `outputs` back to its ray. Returns, per
/// original ray, the survivor outputs in increasing sample order
/// (`survivors x width`, flattened).
pub fn unpack_scatter(outputs: &Tensor3, batch: &PackedBatch) -> Result<Vec<Vec<f64>>> {
    let [rows, steps, width] = outputs.dims();
    if rows != batch.rows() || steps != batch.steps() {
        return Err(Error::Shape(format!(
            "outputs {:?} for a {}x{} batch",
            outputs.dims(),
            batch.rows(),
            batch.steps()
        )));
    }
    let mut counts = vec![0usize; rows];
    for sref in batch.scatter_map.iter().flatten() {
        counts[sref.ray] += 1;
    }
    let mut out: Vec<Vec<f64>> = counts.iter().map(|&n| vec![0.0; n * width]).collect();
    for (slot, sref) in batch.scatter_map.iter().enumerate() {
        let Some(sref) = sref else { continue };
        out[sref.ray][sref.rank * width..(sref.rank + 1) * width]
            .copy_from_slice(outputs.at(slot / steps, slot % steps));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyStats {
    pub valid_slots: usize,
    pub total_slots: usize,
    /// `valid / total`, 0 for an empty batch.
    pub density: f64,
    /// Occupied slots per packed row.
    pub row_lengths: Vec<usize>,
}

pub fn occupancy_stats(batch: &PackedBatch) -> OccupancyStats {
    let steps = batch.steps();
    let total = batch.occupancy.len();
    let valid = batch.valid_slots();
    let row_lengths = (0..batch.rows())
        .map(|r| batch.occupancy[r * steps..(r + 1) * steps].iter().filter(|&&o| o).count())
        .collect();
    OccupancyStats {
        valid_slots: valid,
        total_slots: total,
        density: if total == 0 { 0.0 } else { valid as f64 / total as f64 },
        row_lengths,
    }
}

/// One line of the packing benchmark report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PackReportRow {
    pub mode: PackingMode,
    pub rays: usize,
    #[serde(rename = "T")]
    pub steps: usize,
    pub valid_slots: usize,
    pub total_slots: usize,
    pub density: f64,
    pub wall_ms: f64,
}

pub const PACK_REPORT_HEADER: &str = "mode,rays,T,valid_slots,total_slots,density,wall_ms";

pub fn write_pack_report<W: Write>(mut w: W, rows: &[PackReportRow]) -> std::io::Result<()> {
    writeln!(w, "{PACK_REPORT_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{:.6},{:.4}",
            r.mode, r.rays, r.steps, r.valid_slots, r.total_slots, r.density, r.wall_ms
        )?;
    }
    Ok(())
}

//! Dice overlap, average perpendicular distance and good-contour rates.

mod marching;
mod report;

pub use marching::{extract_contour, largest_component, polygon_area};
pub use report::{
    aggregate_report, evaluate_case, evaluate_slice, render_columns, CaseSummary, GroundTruth,
    MetricsReport, SliceRecord, Summary,
};

use crate::data::{Grid, Point, Polygon, Spacing, CAVITY, MYOCARDIUM};
use crate::error::{Error, Result};

/// Good-contour threshold in millimetres.
pub const GOOD_APD_MM: f64 = 5.0;

/// Arc-length step, in pixels, used before distance averaging.
pub const RESAMPLE_STEP_PX: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    /// Blood pool, bounded by the endocardium.
    Cavity,
    /// Cavity plus myocardium, bounded by the epicardium.
    Epicardial,
}

impl Region {
    pub fn mask(self, classes: &Grid<u8>) -> Grid<bool> {
        classes.map(|v| match self {
            Region::Cavity => v == CAVITY,
            Region::Epicardial => v == CAVITY || v == MYOCARDIUM,
        })
    }
}

pub fn dice(a: &Grid<bool>, b: &Grid<bool>) -> Result<f64> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::invalid(format!(
            "dice: shapes {}x{} and {}x{} differ",
            a.h, a.w, b.h, b.w
        )));
    }
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        na += x as u64;
        nb += y as u64;
        both += (x && y) as u64;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

pub fn mask_to_contour(mask: &Grid<u8>, region: Region) -> Option<Polygon> {
    extract_contour(&region.mask(mask))
}

/// Subdivides every edge of the closed polygon into equal pieces no longer
/// than `step`.
pub fn resample(poly: &[Point], step: f64) -> Polygon {
    let n = poly.len();
    let mut out = Vec::new();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let len = (b.x - a.x).hypot(b.y - a.y);
        let pieces = ((len / step).ceil() as usize).max(1);
        for k in 0..pieces {
            let t = k as f64 / pieces as f64;
            out.push(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
        }
    }
    out
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.x - (a.x + t * dx)).hypot(p.y - (a.y + t * dy))
}

fn check_contour(poly: &[Point], which: &str) -> Result<()> {
    if poly.len() < 3 {
        return Err(Error::invalid(format!(
            "apd: {which} contour has {} points, need 3",
            poly.len()
        )));
    }
    Ok(())
}

/// Mean distance in mm from the resampled `pred` vertices to the `gt`
/// polyline.
pub fn apd(pred: &[Point], gt: &[Point], spacing: Spacing) -> Result<f64> {
    check_contour(pred, "predicted")?;
    check_contour(gt, "reference")?;
    spacing.validate()?;
    let mm = |p: Point| Point::new(p.x * spacing.col_mm, p.y * spacing.row_mm);
    let pv: Vec<Point> = resample(pred, RESAMPLE_STEP_PX)
        .into_iter()
        .map(mm)
        .collect();
    let gv: Vec<Point> = resample(gt, RESAMPLE_STEP_PX).into_iter().map(mm).collect();
    let m = gv.len();
    let total: f64 = pv
        .iter()
        .map(|&p| {
            (0..m)
                .map(|j| point_segment_distance(p, gv[j], gv[(j + 1) % m]))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(total / pv.len() as f64)
}

/// Mean of both directional distances.
pub fn apd_symmetric(a: &[Point], b: &[Point], spacing: Spacing) -> Result<f64> {
    Ok(0.5 * (apd(a, b, spacing)? + apd(b, a, spacing)?))
}

/// `None` when either contour is missing.
pub fn contour_apd(
    pred: Option<&[Point]>,
    gt: Option<&[Point]>,
    spacing: Spacing,
) -> Result<Option<f64>> {
    match (pred, gt) {
        (Some(p), Some(g)) => apd(p, g, spacing).map(Some),
        _ => Ok(None),
    }
}

/// Percentage of present contours with APD below `threshold_mm`; absent
/// contours count as bad. `None` for an empty list.
pub fn good_fraction(apds: &[Option<f64>], threshold_mm: f64) -> Option<f64> {
    if apds.is_empty() {
        return None;
    }
    let good = apds
        .iter()
        .filter(|a| a.is_some_and(|v| v < threshold_mm))
        .count();
    Some(100.0 * good as f64 / apds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1); zero for a single value.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std, n })
    }

    pub fn format(&self, decimals: usize) -> String {
        format!("{:.*}({:.*})", decimals, self.mean, decimals, self.std)
    }
}

//! Synthetic short-axis slices: a bright annulus around a mid-grey disc.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Grid, Point, Polygon, Sample, Spacing, BACKGROUND, CAVITY, MYOCARDIUM};
use crate::error::{Error, Result};

/// Vertices used for the analytic contours written next to each phantom.
const CONTOUR_VERTICES: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub size: usize,
    /// Inclusive range of the cavity radius in pixels.
    pub cavity_radius: [f64; 2],
    pub thickness: [f64; 2],
    /// Maximum centre offset from the image centre, per axis.
    pub center_jitter: f64,
    pub background: f64,
    pub myocardium: f64,
    pub cavity: f64,
    pub noise_sigma: f64,
    /// Subsamples per axis for partial-volume edges.
    pub supersample: usize,
    pub spacing_mm: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 128,
            cavity_radius: [10.0, 18.0],
            thickness: [5.0, 9.0],
            center_jitter: 6.0,
            background: 0.1,
            myocardium: 0.8,
            cavity: 0.45,
            noise_sigma: 0.04,
            supersample: 4,
            spacing_mm: super::DEFAULT_SPACING_MM,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Err(Error::config(field, msg));
        for (field, [lo, hi]) in [
            ("cavity_radius", self.cavity_radius),
            ("thickness", self.thickness),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return err(field, format!("need 0 < min <= max, got [{lo}, {hi}]"));
            }
        }
        if !(self.center_jitter >= 0.0) {
            return err(
                "center_jitter",
                format!("must be >= 0, got {}", self.center_jitter),
            );
        }
        let reach = self.cavity_radius[1] + self.thickness[1] + self.center_jitter + 1.0;
        if self.size < 8 || 2.0 * reach > self.size as f64 {
            return err(
                "size",
                format!(
                    "{} px cannot hold an annulus reaching {reach:.1} px from the centre",
                    self.size
                ),
            );
        }
        for (field, v) in [
            ("background", self.background),
            ("myocardium", self.myocardium),
            ("cavity", self.cavity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(field, format!("intensity must lie in [0, 1], got {v}"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return err(
                "noise_sigma",
                format!("must be finite and >= 0, got {}", self.noise_sigma),
            );
        }
        if self.supersample == 0 {
            return err("supersample", "must be positive".into());
        }
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return err(
                "spacing_mm",
                format!("must be positive, got {}", self.spacing_mm),
            );
        }
        Ok(())
    }
}

/// A generated slice together with the geometry that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub sample: Sample,
    /// Centre in pixel coordinates `(x, y)`.
    pub center: (f64, f64),
    pub cavity_radius: f64,
    pub outer_radius: f64,
    /// Noise-free intensities.
    pub clean: Grid<f32>,
    pub endo: Polygon,
    pub epi: Polygon,
}

impl Phantom {
    /// Class of a point by its distance to the centre.
    pub fn class_at(&self, x: f64, y: f64) -> u8 {
        let d = (x - self.center.0).hypot(y - self.center.1);
        if d < self.cavity_radius {
            CAVITY
        } else if d < self.outer_radius {
            MYOCARDIUM
        } else {
            BACKGROUND
        }
    }
}

fn circle(cx: f64, cy: f64, r: f64) -> Polygon {
    (0..CONTOUR_VERTICES)
        .map(|k| {
            let t = k as f64 * std::f64::consts::TAU / CONTOUR_VERTICES as f64;
            Point::new(cx + r * t.cos(), cy + r * t.sin())
        })
        .collect()
}

pub fn synth_phantoms(spec: &PhantomSpec, n: usize) -> Result<Vec<Phantom>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::config("noise_sigma", e.to_string()))?;
    let size = spec.size;
    let mid = (size as f64 - 1.0) / 2.0;
    let intensity = |class: u8| match class {
        CAVITY => spec.cavity,
        MYOCARDIUM => spec.myocardium,
        _ => spec.background,
    };

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let rc = rng.gen_range(spec.cavity_radius[0]..=spec.cavity_radius[1]);
        let t = rng.gen_range(spec.thickness[0]..=spec.thickness[1]);
        let j = spec.center_jitter;
        let cx = mid + rng.gen_range(-j..=j);
        let cy = mid + rng.gen_range(-j..=j);
        let mut ph = Phantom {
            sample: Sample {
                id: format!("phantom{i:03}"),
                image: Grid::filled(size, size, 0.0),
                mask: Grid::filled(size, size, BACKGROUND),
                spacing: Spacing::isotropic(spec.spacing_mm),
            },
            center: (cx, cy),
            cavity_radius: rc,
            outer_radius: rc + t,
            clean: Grid::filled(size, size, 0.0),
            endo: circle(cx, cy, rc),
            epi: circle(cx, cy, rc + t),
        };

        let ss = spec.supersample;
        let step = 1.0 / ss as f64;
        for r in 0..size {
            for c in 0..size {
                ph.sample.mask.set(r, c, ph.class_at(c as f64, r as f64));
                let mut acc = 0.0;
                for sy in 0..ss {
                    for sx in 0..ss {
                        let x = c as f64 - 0.5 + (sx as f64 + 0.5) * step;
                        let y = r as f64 - 0.5 + (sy as f64 + 0.5) * step;
                        acc += intensity(ph.class_at(x, y));
                    }
                }
                let clean = acc / (ss * ss) as f64;
                ph.clean.set(r, c, clean as f32);
                let noisy = (clean + noise.sample(&mut rng)).clamp(0.0, 1.0);
                ph.sample.image.set(r, c, noisy as f32);
            }
        }
        out.push(ph);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec {
            size: 64,
            cavity_radius: [8.0, 12.0],
            thickness: [4.0, 6.0],
            center_jitter: 3.0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_count_and_determinism() {
        assert!(synth_phantoms(&small(), 0).unwrap().is_empty());
        let a = synth_phantoms(&small(), 3).unwrap();
        let b = synth_phantoms(&small(), 3).unwrap();
        assert_eq!(a, b);
        let c = synth_phantoms(&PhantomSpec { seed: 9, ..small() }, 3).unwrap();
        assert_ne!(a[0].sample.image, c[0].sample.image);
    }

    #[test]
    fn mask_matches_generator_geometry() {
        for ph in synth_phantoms(&small(), 4).unwrap() {
            let (cx, cy) = ph.center;
            for r in 0..64 {
                for c in 0..64 {
                    let d = ((c as f64 - cx).powi(2) + (r as f64 - cy).powi(2)).sqrt();
                    let m = ph.sample.mask.get(r, c);
                    assert_eq!(m == CAVITY, d < ph.cavity_radius);
                    assert_eq!(
                        m == MYOCARDIUM,
                        d >= ph.cavity_radius && d < ph.outer_radius
                    );
                }
            }
            assert!(ph.sample.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn geometry_that_cannot_fit_is_rejected() {
        let spec = PhantomSpec {
            size: 32,
            ..Default::default()
        };
        match synth_phantoms(&spec, 1) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "size"),
            other => panic!("expected config error, got {other:?}"),
        }
        assert!(PhantomSpec {
            thickness: [3.0, 2.0],
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}

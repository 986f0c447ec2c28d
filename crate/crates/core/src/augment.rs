//! Offline augmentation: diagonal displacement, centre crop, and the eight
//! symmetries of the square.

use serde::{Deserialize, Serialize};

use crate::data::{Grid, Sample, BACKGROUND};
use crate::error::{Error, Result};

pub const CROP_SIZE: usize = 108;
pub const SHIFT_PX: i64 = 5;

/// Identity plus the four diagonal translations.
pub const DISPLACEMENTS: [(i64, i64); 5] = [
    (0, 0),
    (SHIFT_PX, SHIFT_PX),
    (SHIFT_PX, -SHIFT_PX),
    (-SHIFT_PX, SHIFT_PX),
    (-SHIFT_PX, -SHIFT_PX),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DihedralElement {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
    Transpose,
    AntiTranspose,
}

impl DihedralElement {
    pub const ALL: [DihedralElement; 8] = [
        DihedralElement::Identity,
        DihedralElement::Rot90,
        DihedralElement::Rot180,
        DihedralElement::Rot270,
        DihedralElement::FlipH,
        DihedralElement::FlipV,
        DihedralElement::Transpose,
        DihedralElement::AntiTranspose,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DihedralElement::Identity => "id",
            DihedralElement::Rot90 => "rot90",
            DihedralElement::Rot180 => "rot180",
            DihedralElement::Rot270 => "rot270",
            DihedralElement::FlipH => "fliph",
            DihedralElement::FlipV => "flipv",
            DihedralElement::Transpose => "transpose",
            DihedralElement::AntiTranspose => "antitranspose",
        }
    }

    /// Destination of source pixel `(r, c)` in an `n`x`n` grid. Rotations are
    /// counter-clockwise; `FlipH` mirrors columns, `FlipV` mirrors rows.
    pub fn map(self, r: usize, c: usize, n: usize) -> (usize, usize) {
        let m = n - 1;
        match self {
            DihedralElement::Identity => (r, c),
            DihedralElement::Rot90 => (m - c, r),
            DihedralElement::Rot180 => (m - r, m - c),
            DihedralElement::Rot270 => (c, m - r),
            DihedralElement::FlipH => (r, m - c),
            DihedralElement::FlipV => (m - r, c),
            DihedralElement::Transpose => (c, r),
            DihedralElement::AntiTranspose => (m - c, m - r),
        }
    }

    /// `self.compose(other)` applies `other` first, then `self`.
    pub fn compose(self, other: DihedralElement) -> DihedralElement {
        // two non-collinear probes identify an element of the group
        let n = 3;
        let probe = |e: DihedralElement| (e.map(0, 0, n), e.map(0, 1, n));
        let (a, b) = ((0, 0), (0, 1));
        let (oa, ob) = (other.map(a.0, a.1, n), other.map(b.0, b.1, n));
        let target = (self.map(oa.0, oa.1, n), self.map(ob.0, ob.1, n));
        *Self::ALL
            .iter()
            .find(|e| probe(**e) == target)
            .expect("dihedral group is closed")
    }

    pub fn inverse(self) -> DihedralElement {
        *Self::ALL
            .iter()
            .find(|e| e.compose(self) == DihedralElement::Identity)
            .expect("every element has an inverse")
    }

    pub fn apply_grid<T: Copy + Default>(self, g: &Grid<T>) -> Result<Grid<T>> {
        if g.h != g.w {
            return Err(Error::invalid(format!(
                "dihedral transform needs a square grid, got {}x{}",
                g.h, g.w
            )));
        }
        let n = g.h;
        let mut out = Grid::filled(n, n, T::default());
        for r in 0..n {
            for c in 0..n {
                let (rr, cc) = self.map(r, c, n);
                out.set(rr, cc, g.get(r, c));
            }
        }
        Ok(out)
    }
}

fn shift_grid<T: Copy>(g: &Grid<T>, dx: i64, dy: i64, fill: T) -> Grid<T> {
    Grid::from_fn(g.h, g.w, |r, c| {
        let sr = r as i64 - dy;
        let sc = c as i64 - dx;
        if sr >= 0 && sc >= 0 && (sr as usize) < g.h && (sc as usize) < g.w {
            g.get(sr as usize, sc as usize)
        } else {
            fill
        }
    })
}

/// Output pixel `(r, c)` takes input `(r - dy, c - dx)`; vacated pixels become
/// zero intensity and background.
pub fn displace(s: &Sample, dx: i64, dy: i64) -> Result<Sample> {
    if dx.unsigned_abs() as usize >= s.image.w || dy.unsigned_abs() as usize >= s.image.h {
        return Err(Error::invalid(format!(
            "sample `{}`: shift ({dx},{dy}) does not fit a {}x{} image",
            s.id, s.image.h, s.image.w
        )));
    }
    Ok(Sample {
        id: format!("{}~d{dx:+}{dy:+}", s.id),
        image: shift_grid(&s.image, dx, dy, 0.0),
        mask: shift_grid(&s.mask, dx, dy, BACKGROUND),
        spacing: s.spacing,
    })
}

fn crop_grid<T: Copy>(g: &Grid<T>, top: usize, left: usize, size: usize) -> Grid<T> {
    Grid::from_fn(size, size, |r, c| g.get(top + r, left + c))
}

/// Offset of a centred `size` window along an axis of length `len`.
pub fn crop_offset(len: usize, size: usize) -> usize {
    (len - size) / 2
}

pub fn center_crop(s: &Sample, size: usize) -> Result<Sample> {
    let (h, w) = (s.image.h, s.image.w);
    if size == 0 || size > h || size > w {
        return Err(Error::invalid(format!(
            "sample `{}`: cannot crop {h}x{w} to {size}x{size}",
            s.id
        )));
    }
    let (top, left) = (crop_offset(h, size), crop_offset(w, size));
    Ok(Sample {
        id: s.id.clone(),
        image: crop_grid(&s.image, top, left, size),
        mask: crop_grid(&s.mask, top, left, size),
        spacing: s.spacing,
    })
}

pub fn dihedral(s: &Sample, e: DihedralElement) -> Result<Sample> {
    if s.image.h != s.image.w {
        return Err(Error::invalid(format!(
            "sample `{}`: symmetry transforms need a square image, got {}x{}",
            s.id, s.image.h, s.image.w
        )));
    }
    let image = e.apply_grid(&s.image)?;
    let mask = e.apply_grid(&s.mask)?;
    let spacing = match e {
        DihedralElement::Rot90
        | DihedralElement::Rot270
        | DihedralElement::Transpose
        | DihedralElement::AntiTranspose => crate::data::Spacing {
            row_mm: s.spacing.col_mm,
            col_mm: s.spacing.row_mm,
        },
        _ => s.spacing,
    };
    Ok(Sample {
        id: format!("{}~{}", s.id, e.as_str()),
        image,
        mask,
        spacing,
    })
}

/// The 40 variants of one sample: every displacement, cropped, under every
/// dihedral element.
pub fn augment_sample(s: &Sample, size: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(DISPLACEMENTS.len() * DihedralElement::ALL.len());
    for &(dx, dy) in &DISPLACEMENTS {
        let cropped = center_crop(&displace(s, dx, dy)?, size)?;
        for e in DihedralElement::ALL {
            out.push(dihedral(&cropped, e)?);
        }
    }
    Ok(out)
}

pub fn augment_dataset(samples: &[Sample]) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(samples.len() * 40);
    for s in samples {
        out.extend(augment_sample(s, CROP_SIZE)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Spacing;
    use DihedralElement::*;

    fn ramp(h: usize, w: usize) -> Sample {
        let image = Grid::from_fn(h, w, |r, c| (r * w + c) as f32 / (h * w) as f32);
        let mask = Grid::from_fn(h, w, |r, c| ((r * 7 + c * 3) % 3) as u8);
        Sample::new("s", image, mask, Spacing::isotropic(1.0)).unwrap()
    }

    #[test]
    fn group_laws() {
        assert_eq!(FlipH.compose(FlipV), Rot180);
        assert_eq!(Rot90.compose(Rot90).compose(Rot90).compose(Rot90), Identity);
        for a in DihedralElement::ALL {
            let mut p = a;
            let mut order = 1;
            while p != Identity {
                p = p.compose(a);
                order += 1;
            }
            assert!(order <= 4);
            assert_eq!(a.compose(a.inverse()), Identity);
            for b in DihedralElement::ALL {
                // composition agrees with applying the maps in sequence
                for (r, c) in [(0, 1), (2, 0), (1, 2)] {
                    let (r1, c1) = b.map(r, c, 3);
                    assert_eq!(a.map(r1, c1, 3), a.compose(b).map(r, c, 3));
                }
            }
        }
    }

    #[test]
    fn rot90_four_times_is_identity_on_samples() {
        let s = ramp(6, 6);
        let mut t = s.clone();
        for _ in 0..4 {
            t = dihedral(&t, Rot90).unwrap();
        }
        assert_eq!((t.image, t.mask), (s.image, s.mask));
        assert!(dihedral(&ramp(4, 5), Rot90).is_err());
    }

    #[test]
    fn displacement_semantics() {
        let s = ramp(20, 20);
        let same = displace(&s, 0, 0).unwrap();
        assert_eq!((&same.image, &same.mask), (&s.image, &s.mask));
        let d = displace(&s, 5, 5).unwrap();
        for r in 0..20 {
            for c in 0..20 {
                if r >= 5 && c >= 5 {
                    assert_eq!(d.image.get(r, c), s.image.get(r - 5, c - 5));
                    assert_eq!(d.mask.get(r, c), s.mask.get(r - 5, c - 5));
                } else {
                    assert_eq!((d.image.get(r, c), d.mask.get(r, c)), (0.0, BACKGROUND));
                }
            }
        }
        let back = displace(&d, -5, -5).unwrap();
        for r in 0..15 {
            for c in 0..15 {
                assert_eq!(back.image.get(r, c), s.image.get(r, c));
            }
        }
        assert!(displace(&s, 20, 0).is_err());
        assert!(displace(&s, 0, -25).is_err());
    }

    #[test]
    fn crop_offsets() {
        assert_eq!(crop_offset(256, 108), 74);
        let s = ramp(256, 256);
        let c = center_crop(&s, 108).unwrap();
        assert_eq!((c.image.h, c.image.w), (108, 108));
        assert_eq!(c.image.get(0, 0), s.image.get(74, 74));
        assert_eq!(center_crop(&s, 256).unwrap(), s);
        assert!(center_crop(&s, 257).is_err());
    }

    #[test]
    fn forty_distinct_ids_per_sample() {
        let out = augment_dataset(&[ramp(128, 128)]).unwrap();
        assert_eq!(out.len(), 40);
        let ids: std::collections::HashSet<_> = out.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids.len(), 40);
        assert!(out.iter().all(|s| s.image.h == 108 && s.image.w == 108));
        assert!(augment_dataset(&[ramp(100, 100)]).is_err());
    }
}

//! Slices, masks and contours on disk and in memory, plus synthetic phantoms.

mod contour;
mod manifest;
mod pgm;
mod phantom;

use serde::{Deserialize, Serialize};

pub use contour::{
    contour_to_mask, load_contour_text, parse_contour_text, point_in_polygon, save_contour_text,
    Point, Polygon,
};
pub use manifest::{read_manifest, write_manifest, Defaults, Entry, LabeledSlice, Manifest, Split};
pub use pgm::{load_image_pgm, load_mask_pgm, parse_pgm, save_image_pgm, save_mask_pgm};
pub use phantom::{synth_phantoms, Phantom, PhantomSpec};

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const MYOCARDIUM: u8 = 1;
pub const CAVITY: u8 = 2;
pub const CLASSES: usize = 3;

/// Pixel size used when neither the entry nor the manifest gives one.
pub const DEFAULT_SPACING_MM: f64 = 1.25;

/// Row-major 2-D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::invalid(format!(
                "grid data length {} != {h}x{w}",
                data.len()
            )));
        }
        Ok(Grid { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: T) -> Self {
        Grid {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(f(r, c));
            }
        }
        Grid { h, w, data }
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.w + c] = v;
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            h: self.h,
            w: self.w,
            data: self.data.iter().copied().map(f).collect(),
        }
    }
}

/// Physical pixel size in millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub row_mm: f64,
    pub col_mm: f64,
}

impl Spacing {
    pub fn isotropic(mm: f64) -> Self {
        Spacing {
            row_mm: mm,
            col_mm: mm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.row_mm > 0.0
            && self.col_mm > 0.0
            && self.row_mm.is_finite()
            && self.col_mm.is_finite())
        {
            return Err(Error::invalid(format!(
                "spacing must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing::isotropic(DEFAULT_SPACING_MM)
    }
}

/// One labelled slice: image in `[0, 1]` and per-pixel class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Grid<f32>,
    pub mask: Grid<u8>,
    pub spacing: Spacing,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        image: Grid<f32>,
        mask: Grid<u8>,
        spacing: Spacing,
    ) -> Result<Self> {
        let id = id.into();
        if (image.h, image.w) != (mask.h, mask.w) {
            return Err(Error::invalid(format!(
                "sample `{id}`: image {}x{} and mask {}x{} differ",
                image.h, image.w, mask.h, mask.w
            )));
        }
        if let Some(&bad) = mask.data.iter().find(|&&v| v as usize >= CLASSES) {
            return Err(Error::invalid(format!(
                "sample `{id}`: mask value {bad} is not a class index"
            )));
        }
        spacing.validate()?;
        Ok(Sample {
            id,
            image,
            mask,
            spacing,
        })
    }
}

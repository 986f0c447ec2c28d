use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    contour_to_mask, load_contour_text, load_image_pgm, load_mask_pgm, Polygon, Sample, Spacing,
    CLASSES,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Defaults {
    /// `[row_mm, col_mm]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endo: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epi: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    /// Grouping key for per-case aggregation; defaults to the id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case: Option<String>,
}

impl Entry {
    pub fn new(id: impl Into<String>, image: impl Into<PathBuf>) -> Self {
        Entry {
            id: id.into(),
            image: image.into(),
            mask: None,
            endo: None,
            epi: None,
            spacing: None,
            split: None,
            case: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    #[serde(default)]
    defaults: Defaults,
    #[serde(default)]
    entry: Vec<Entry>,
}

/// Entries plus the directory their relative paths are resolved against.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub defaults: Defaults,
    pub entries: Vec<Entry>,
    pub base_dir: PathBuf,
}

/// A loaded entry: the training sample plus whatever contours were given.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSlice {
    pub case: String,
    pub sample: Sample,
    pub endo: Option<Polygon>,
    pub epi: Option<Polygon>,
}

impl Manifest {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Manifest {
            base_dir: base_dir.into(),
            ..Default::default()
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn spacing(&self, e: &Entry) -> Spacing {
        match e.spacing.or(self.defaults.spacing) {
            Some([row_mm, col_mm]) => Spacing { row_mm, col_mm },
            None => Spacing::default(),
        }
    }

    pub fn split_of(&self, e: &Entry) -> Split {
        e.split.or(self.defaults.split).unwrap_or(Split::Train)
    }

    pub fn case_of<'a>(&self, e: &'a Entry) -> &'a str {
        e.case.as_deref().unwrap_or(&e.id)
    }

    pub fn select(&self, split: Split) -> Vec<&Entry> {
        self.entries
            .iter()
            .filter(|e| self.split_of(e) == split)
            .collect()
    }

    /// Checks ids, label presence, spacing and file existence.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::invalid(format!("manifest: duplicate id `{}`", e.id)));
            }
            if e.mask.is_none() && e.endo.is_none() && e.epi.is_none() {
                return Err(Error::invalid(format!(
                    "manifest: entry `{}` has neither a mask nor contours",
                    e.id
                )));
            }
            self.spacing(e).validate()?;
            let files = [
                Some(&e.image),
                e.mask.as_ref(),
                e.endo.as_ref(),
                e.epi.as_ref(),
            ];
            for p in files.into_iter().flatten() {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::invalid(format!(
                        "manifest: entry `{}` references missing file {}",
                        e.id,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(&self, e: &Entry) -> Result<LabeledSlice> {
        let image = load_image_pgm(&self.resolve(&e.image))?;
        let endo = e
            .endo
            .as_ref()
            .map(|p| load_contour_text(&self.resolve(p)))
            .transpose()?;
        let epi = e
            .epi
            .as_ref()
            .map(|p| load_contour_text(&self.resolve(p)))
            .transpose()?;
        let mask = match &e.mask {
            Some(p) => load_mask_pgm(&self.resolve(p), CLASSES)?,
            None => contour_to_mask(endo.as_deref(), epi.as_deref(), image.h, image.w),
        };
        let sample = Sample::new(e.id.clone(), image, mask, self.spacing(e))?;
        Ok(LabeledSlice {
            case: self.case_of(e).to_string(),
            sample,
            endo,
            epi,
        })
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile = toml::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let m = Manifest {
        defaults: file.defaults,
        entries: file.entry,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    m.validate()?;
    Ok(m)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_manifest(m: &Manifest, path: &Path) -> Result<()> {
    let file = ManifestFile {
        defaults: m.defaults.clone(),
        entry: m.entries.clone(),
    };
    let text = toml::to_string(&file).map_err(|e| Error::invalid(format!("manifest: {e}")))?;
    let tmp = path.with_extension("toml.tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{save_contour_text, save_image_pgm, save_mask_pgm, Grid, Point};

    fn fixture(dir: &Path) -> Manifest {
        let img = Grid::from_fn(8, 8, |r, c| ((r + c) % 5) as f32 / 4.0);
        save_image_pgm(&img, &dir.join("a.pgm")).unwrap();
        save_image_pgm(&img, &dir.join("b.pgm")).unwrap();
        save_mask_pgm(&Grid::filled(8, 8, 1), 3, &dir.join("a_mask.pgm")).unwrap();
        let tri = vec![
            Point::new(1.0, 1.0),
            Point::new(6.0, 1.0),
            Point::new(1.0, 6.0),
        ];
        save_contour_text(&tri, &dir.join("b_epi.txt")).unwrap();
        let mut m = Manifest::new(dir);
        m.defaults.spacing = Some([1.5, 1.5]);
        let mut a = Entry::new("a", "a.pgm");
        a.mask = Some("a_mask.pgm".into());
        let mut b = Entry::new("b", "b.pgm");
        b.epi = Some("b_epi.txt".into());
        b.split = Some(Split::Test);
        b.spacing = Some([2.0, 1.0]);
        b.case = Some("patient1".into());
        m.entries = vec![a, b];
        m
    }

    #[test]
    fn round_trip_and_split_filter() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path());
        let path = dir.path().join("manifest.toml");
        write_manifest(&m, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, m);

        let train: Vec<_> = back
            .select(Split::Train)
            .iter()
            .map(|e| e.id.clone())
            .collect();
        let test: Vec<_> = back
            .select(Split::Test)
            .iter()
            .map(|e| e.id.clone())
            .collect();
        assert_eq!(
            (train, test),
            (vec!["a".to_string()], vec!["b".to_string()])
        );

        let a = back.load(&back.entries[0]).unwrap();
        assert_eq!(a.sample.spacing, Spacing::isotropic(1.5));
        assert_eq!(a.case, "a");
        let b = back.load(&back.entries[1]).unwrap();
        assert_eq!(
            b.sample.spacing,
            Spacing {
                row_mm: 2.0,
                col_mm: 1.0
            }
        );
        assert_eq!(b.case, "patient1");
        assert!(b.sample.mask.data.contains(&1) && b.endo.is_none());
    }

    #[test]
    fn duplicate_ids_and_missing_files_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = fixture(dir.path());
        m.entries[1].id = "a".into();
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("duplicate id `a`"), "{err}");

        let mut m = fixture(dir.path());
        m.entries[0].image = "nope.pgm".into();
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("nope.pgm"), "{err}");

        let mut m = fixture(dir.path());
        m.entries[0].mask = None;
        assert!(m.validate().is_err());
    }
}

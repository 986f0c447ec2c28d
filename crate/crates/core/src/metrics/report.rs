use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use super::{contour_apd, dice, good_fraction, mask_to_contour, MeanStd, Region};
use crate::data::{Grid, LabeledSlice, Polygon, Spacing};
use crate::error::{Error, Result};

/// Reference labels for one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub id: String,
    pub case: String,
    pub mask: Grid<u8>,
    pub endo: Option<Polygon>,
    pub epi: Option<Polygon>,
    pub spacing: Spacing,
}

impl GroundTruth {
    /// Uses the given contours and falls back to the mask boundary.
    pub fn from_slice(s: &LabeledSlice) -> Self {
        let mask = &s.sample.mask;
        GroundTruth {
            id: s.sample.id.clone(),
            case: s.case.clone(),
            mask: mask.clone(),
            endo: s
                .endo
                .clone()
                .or_else(|| mask_to_contour(mask, Region::Cavity)),
            epi: s
                .epi
                .clone()
                .or_else(|| mask_to_contour(mask, Region::Epicardial)),
            spacing: s.sample.spacing,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub id: String,
    pub case: String,
    pub spacing: Spacing,
    pub dice_endo: f64,
    pub dice_epi: f64,
    pub apd_endo_mm: Option<f64>,
    pub apd_epi_mm: Option<f64>,
    /// `None` when the reference has no such contour.
    pub good_endo: Option<bool>,
    pub good_epi: Option<bool>,
}

pub fn evaluate_slice(pred: &Grid<u8>, gt: &GroundTruth, threshold_mm: f64) -> Result<SliceRecord> {
    let region_dice = |r: Region| dice(&r.mask(pred), &r.mask(&gt.mask));
    let pred_endo = mask_to_contour(pred, Region::Cavity);
    let pred_epi = mask_to_contour(pred, Region::Epicardial);
    let apd_endo = contour_apd(pred_endo.as_deref(), gt.endo.as_deref(), gt.spacing)?;
    let apd_epi = contour_apd(pred_epi.as_deref(), gt.epi.as_deref(), gt.spacing)?;
    let good = |apd: Option<f64>, gt: &Option<Polygon>| {
        gt.as_ref().map(|_| apd.is_some_and(|a| a < threshold_mm))
    };
    Ok(SliceRecord {
        id: gt.id.clone(),
        case: gt.case.clone(),
        spacing: gt.spacing,
        dice_endo: region_dice(Region::Cavity)?,
        dice_epi: region_dice(Region::Epicardial)?,
        apd_endo_mm: apd_endo,
        apd_epi_mm: apd_epi,
        good_endo: good(apd_endo, &gt.endo),
        good_epi: good(apd_epi, &gt.epi),
    })
}

/// Matches predictions to references by slice id and scores every pair.
/// Records follow the order of `gts`.
pub fn evaluate_case(
    preds: &[(String, Grid<u8>)],
    gts: &[GroundTruth],
    threshold_mm: f64,
) -> Result<Vec<SliceRecord>> {
    let by_id: HashMap<&str, &Grid<u8>> = preds.iter().map(|(id, m)| (id.as_str(), m)).collect();
    let mut unmatched: Vec<String> = gts
        .iter()
        .filter(|g| !by_id.contains_key(g.id.as_str()))
        .map(|g| format!("{} (no prediction)", g.id))
        .collect();
    let gt_ids: std::collections::HashSet<&str> = gts.iter().map(|g| g.id.as_str()).collect();
    unmatched.extend(
        preds
            .iter()
            .filter(|(id, _)| !gt_ids.contains(id.as_str()))
            .map(|(id, _)| format!("{id} (no reference)")),
    );
    if !unmatched.is_empty() {
        return Err(Error::invalid(format!(
            "unmatched slices: {}",
            unmatched.join(", ")
        )));
    }
    gts.par_iter()
        .map(|g| evaluate_slice(by_id[g.id.as_str()], g, threshold_mm))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseSummary {
    pub case: String,
    pub slices: usize,
    pub dice_endo: Option<f64>,
    pub dice_epi: Option<f64>,
    pub apd_endo_mm: Option<f64>,
    pub apd_epi_mm: Option<f64>,
    /// Percentages.
    pub good_endo: Option<f64>,
    pub good_epi: Option<f64>,
}

/// Across-case mean(std) of every per-case column.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub cases: usize,
    pub dice_endo: Option<MeanStd>,
    pub dice_epi: Option<MeanStd>,
    pub apd_endo_mm: Option<MeanStd>,
    pub apd_epi_mm: Option<MeanStd>,
    pub good_endo: Option<MeanStd>,
    pub good_epi: Option<MeanStd>,
}

impl Summary {
    /// Report cells: Dice, APD, good contours; Endo before Epi.
    pub fn cells(&self) -> [String; 6] {
        let f = |v: &Option<MeanStd>, d: usize| v.map_or("-".to_string(), |m| m.format(d));
        [
            f(&self.dice_endo, 3),
            f(&self.dice_epi, 3),
            f(&self.apd_endo_mm, 2),
            f(&self.apd_epi_mm, 2),
            f(&self.good_endo, 2),
            f(&self.good_epi, 2),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub threshold_mm: f64,
    pub records: Vec<SliceRecord>,
    pub cases: Vec<CaseSummary>,
    pub overall: Summary,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    MeanStd::of(&v).map(|m| m.mean)
}

/// Per-case means first, then mean and sample standard deviation across
/// cases. Cases appear in order of first occurrence.
pub fn aggregate_report(records: Vec<SliceRecord>, threshold_mm: f64) -> MetricsReport {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<&SliceRecord>> = HashMap::new();
    for r in &records {
        if !groups.contains_key(&r.case) {
            order.push(r.case.clone());
        }
        groups.entry(r.case.clone()).or_default().push(r);
    }

    let cases: Vec<CaseSummary> = order
        .iter()
        .map(|case| {
            let rs = &groups[case];
            let good = |pick: fn(&SliceRecord) -> Option<bool>,
                        apd: fn(&SliceRecord) -> Option<f64>| {
                let apds: Vec<Option<f64>> = rs
                    .iter()
                    .filter(|r| pick(r).is_some())
                    .map(|r| apd(r))
                    .collect();
                good_fraction(&apds, threshold_mm)
            };
            CaseSummary {
                case: case.clone(),
                slices: rs.len(),
                dice_endo: mean(rs.iter().map(|r| r.dice_endo)),
                dice_epi: mean(rs.iter().map(|r| r.dice_epi)),
                apd_endo_mm: mean(rs.iter().filter_map(|r| r.apd_endo_mm)),
                apd_epi_mm: mean(rs.iter().filter_map(|r| r.apd_epi_mm)),
                good_endo: good(|r| r.good_endo, |r| r.apd_endo_mm),
                good_epi: good(|r| r.good_epi, |r| r.apd_epi_mm),
            }
        })
        .collect();

    let across = |pick: fn(&CaseSummary) -> Option<f64>| {
        let v: Vec<f64> = cases.iter().filter_map(pick).collect();
        MeanStd::of(&v)
    };
    let overall = Summary {
        cases: cases.len(),
        dice_endo: across(|c| c.dice_endo),
        dice_epi: across(|c| c.dice_epi),
        apd_endo_mm: across(|c| c.apd_endo_mm),
        apd_epi_mm: across(|c| c.apd_epi_mm),
        good_endo: across(|c| c.good_endo),
        good_epi: across(|c| c.good_epi),
    };
    MetricsReport {
        threshold_mm,
        records,
        cases,
        overall,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

fn opt_bool(v: Option<bool>) -> String {
    v.map_or(String::new(), |b| (b as u8).to_string())
}

/// Lays out rows as space-padded columns separated by ` | `, with a rule
/// under the first `header_rows` rows.
pub fn render_columns(rows: &[Vec<String>], header_rows: usize) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = (0..cols)
            .map(|c| {
                format!(
                    "{:<w$}",
                    row.get(c).map_or("", String::as_str),
                    w = width[c]
                )
            })
            .collect();
        out.push_str(line.join(" | ").trim_end());
        out.push('\n');
        if i + 1 == header_rows {
            let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
            out.push_str(&rule.join("-+-"));
            out.push('\n');
        }
    }
    out
}

impl MetricsReport {
    /// One row per slice, one per case, then the across-case mean and std.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "kind,id,case,row_mm,col_mm,dice_endo,dice_epi,apd_endo_mm,apd_epi_mm,good_endo,good_epi\n",
        );
        for r in &self.records {
            let _ = writeln!(
                out,
                "slice,{},{},{},{},{},{},{},{},{},{}",
                r.id,
                r.case,
                r.spacing.row_mm,
                r.spacing.col_mm,
                r.dice_endo,
                r.dice_epi,
                opt(r.apd_endo_mm),
                opt(r.apd_epi_mm),
                opt_bool(r.good_endo),
                opt_bool(r.good_epi)
            );
        }
        for c in &self.cases {
            let _ = writeln!(
                out,
                "case,,{},,,{},{},{},{},{},{}",
                c.case,
                opt(c.dice_endo),
                opt(c.dice_epi),
                opt(c.apd_endo_mm),
                opt(c.apd_epi_mm),
                opt(c.good_endo),
                opt(c.good_epi)
            );
        }
        let o = &self.overall;
        let fields = [
            o.dice_endo,
            o.dice_epi,
            o.apd_endo_mm,
            o.apd_epi_mm,
            o.good_endo,
            o.good_epi,
        ];
        for (kind, pick) in [
            ("mean", (|m: MeanStd| m.mean) as fn(MeanStd) -> f64),
            ("std", |m: MeanStd| m.std),
        ] {
            let vals: Vec<String> = fields.iter().map(|f| opt(f.map(pick))).collect();
            let _ = writeln!(out, "{kind},,,,,{}", vals.join(","));
        }
        out
    }

    /// Text table with the column structure Method | # | Dice | APD(mm) |
    /// Good Contours(%), each split into Endo and Epi.
    pub fn table(&self, method: &str) -> String {
        let s = |v: &str| v.to_string();
        let mut rows = vec![
            vec![
                s("Method"),
                s("#"),
                s("Dice"),
                s(""),
                s("APD(mm)"),
                s(""),
                s("Good Contours(%)"),
                s(""),
            ],
            vec![
                s(""),
                s(""),
                s("Endo"),
                s("Epi"),
                s("Endo"),
                s("Epi"),
                s("Endo"),
                s("Epi"),
            ],
        ];
        let mut row = vec![method.to_string(), self.overall.cases.to_string()];
        row.extend(self.overall.cells());
        rows.push(row);
        let mut out = render_columns(&rows, 2);
        let _ = writeln!(
            out,
            "values are mean(std) across cases; good contour: APD < {} mm",
            self.threshold_mm
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{contour_to_mask, Point};

    fn disc_mask(n: usize, cx: f64, cy: f64, r_endo: f64, r_epi: f64) -> Grid<u8> {
        Grid::from_fn(n, n, |r, c| {
            let d = (c as f64 - cx).hypot(r as f64 - cy);
            if d < r_endo {
                2
            } else if d < r_epi {
                1
            } else {
                0
            }
        })
    }

    fn gt(id: &str, case: &str, mask: Grid<u8>) -> GroundTruth {
        let ls = LabeledSlice {
            case: case.into(),
            sample: crate::data::Sample::new(
                id,
                Grid::filled(mask.h, mask.w, 0.0),
                mask,
                Spacing::isotropic(1.0),
            )
            .unwrap(),
            endo: None,
            epi: None,
        };
        GroundTruth::from_slice(&ls)
    }

    #[test]
    fn perfect_single_slice() {
        let m = disc_mask(40, 20.0, 20.0, 6.0, 10.0);
        let g = gt("a", "c1", m.clone());
        let recs = evaluate_case(&[("a".into(), m)], &[g], 5.0).unwrap();
        let rep = aggregate_report(recs, 5.0);
        let o = &rep.overall;
        assert_eq!(o.dice_endo.unwrap().mean, 1.0);
        assert_eq!(o.dice_epi.unwrap().mean, 1.0);
        assert_eq!(o.apd_endo_mm.unwrap().mean, 0.0);
        assert_eq!(o.good_epi.unwrap().mean, 100.0);
        assert_eq!(o.good_endo.unwrap().std, 0.0);
    }

    #[test]
    fn two_case_good_fraction() {
        let m = disc_mask(40, 20.0, 20.0, 6.0, 10.0);
        let far = disc_mask(40, 20.0, 20.0, 1.0, 2.0);
        let gts = vec![
            gt("a1", "A", m.clone()),
            gt("b1", "B", m.clone()),
            gt("b2", "B", m.clone()),
        ];
        let preds = vec![
            ("a1".to_string(), m.clone()),
            ("b1".to_string(), m.clone()),
            ("b2".to_string(), far),
        ];
        let rep = aggregate_report(evaluate_case(&preds, &gts, 5.0).unwrap(), 5.0);
        assert_eq!(rep.cases[0].good_epi, Some(100.0));
        assert_eq!(rep.cases[1].good_epi, Some(50.0));
        let g = rep.overall.good_epi.unwrap();
        assert_eq!(g.format(2), "75.00(35.36)");
    }

    #[test]
    fn absent_prediction_counts_as_bad() {
        let m = disc_mask(30, 15.0, 15.0, 4.0, 8.0);
        let empty = Grid::filled(30, 30, 0u8);
        let rec = evaluate_slice(&empty, &gt("a", "a", m), 5.0).unwrap();
        assert_eq!((rec.apd_endo_mm, rec.good_endo), (None, Some(false)));
        assert_eq!(rec.dice_epi, 0.0);
        let rep = aggregate_report(vec![rec], 5.0);
        assert!(rep.overall.apd_endo_mm.is_none());
        assert_eq!(rep.overall.good_endo.unwrap().mean, 0.0);
        assert!(rep.table("x").contains(" - "));
    }

    #[test]
    fn unmatched_ids_are_listed() {
        let m = disc_mask(20, 10.0, 10.0, 3.0, 6.0);
        let err = evaluate_case(&[("zz".into(), m.clone())], &[gt("a", "a", m)], 5.0)
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("a (no prediction)") && err.contains("zz (no reference)"),
            "{err}"
        );
    }

    #[test]
    fn table_and_csv_layout() {
        let m = disc_mask(40, 20.0, 20.0, 6.0, 10.0);
        let rep = aggregate_report(
            evaluate_case(&[("a".into(), m.clone())], &[gt("a", "a", m)], 5.0).unwrap(),
            5.0,
        );
        let t = rep.table("MS-FCN");
        let lines: Vec<&str> = t.lines().collect();
        let head: Vec<&str> = lines[0].split('|').map(str::trim).collect();
        assert_eq!(
            head,
            [
                "Method",
                "#",
                "Dice",
                "",
                "APD(mm)",
                "",
                "Good Contours(%)",
                ""
            ]
        );
        let sub: Vec<&str> = lines[1].split('|').map(str::trim).collect();
        assert_eq!(sub, ["", "", "Endo", "Epi", "Endo", "Epi", "Endo", "Epi"]);
        assert!(lines[3].starts_with("MS-FCN"));
        let csv = rep.to_csv();
        assert!(
            csv.lines()
                .any(|l| l.starts_with("slice,a,a,1,1,1,1,0,0,1,1")),
            "{csv}"
        );
        assert!(csv.lines().any(|l| l.starts_with("mean,")));
    }

    #[test]
    fn rasterised_disc_round_trip_within_one_pixel() {
        let circle: Vec<Point> = (0..256)
            .map(|k| {
                let t = k as f64 * std::f64::consts::TAU / 256.0;
                Point::new(50.3 + 30.0 * t.cos(), 49.7 + 30.0 * t.sin())
            })
            .collect();
        let mask = contour_to_mask(None, Some(&circle), 100, 100);
        let back = mask_to_contour(&mask, Region::Epicardial).unwrap();
        let s = Spacing::isotropic(1.5);
        let d = super::super::apd(&back, &circle, s).unwrap();
        assert!(d < 1.5, "{d}");
    }
}

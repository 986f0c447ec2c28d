//! Text polygons ("x y" per line) and even-odd rasterisation at pixel centres.
//!
//! Coordinates follow the image convention: `x` is the column, `y` the row,
//! and pixel `(r, c)` has its centre at `(x, y) = (c, r)`.

use std::fs;
use std::path::Path;

use super::{Grid, BACKGROUND, CAVITY, MYOCARDIUM};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// Closed polygon; the last vertex connects back to the first.
pub type Polygon = Vec<Point>;

pub fn parse_contour_text(text: &str, origin: &str) -> Result<Polygon> {
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let mut coord = |name: &str| -> Result<f64> {
            let tok = fields
                .next()
                .ok_or_else(|| Error::parse(origin, format!("line {}: missing {name}", i + 1)))?;
            let v: f64 = tok.parse().map_err(|_| {
                Error::parse(origin, format!("line {}: `{tok}` is not a number", i + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(
                    origin,
                    format!("line {}: {name} is not finite", i + 1),
                ));
            }
            Ok(v)
        };
        let x = coord("x")?;
        let y = coord("y")?;
        if let Some(extra) = fields.next() {
            return Err(Error::parse(
                origin,
                format!("line {}: unexpected token `{extra}`", i + 1),
            ));
        }
        pts.push(Point { x, y });
    }
    if pts.len() < 3 {
        return Err(Error::parse(
            origin,
            format!("contour needs at least 3 points, found {}", pts.len()),
        ));
    }
    Ok(pts)
}

pub fn load_contour_text(path: &Path) -> Result<Polygon> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_contour_text(&text, &path.display().to_string())
}

/// Writes one "x y" pair per line using the shortest exact decimal form.
pub fn save_contour_text(poly: &[Point], path: &Path) -> Result<()> {
    let mut out = String::new();
    for p in poly {
        out.push_str(&format!("{} {}\n", p.x, p.y));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Even-odd rule by horizontal ray casting.
pub fn point_in_polygon(poly: &[Point], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > y) != (b.y > y) {
            let cross = a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y);
            if x < cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Scanline parity per row: the crossings of `poly` with the line through
/// pixel centres of row `y`, sorted.
fn crossings(poly: &[Point], y: f64, out: &mut Vec<f64>) {
    out.clear();
    let n = poly.len();
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > y) != (b.y > y) {
            out.push(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y));
        }
        j = i;
    }
    out.sort_by(f64::total_cmp);
}

fn fill(mask: &mut Grid<bool>, poly: &[Point]) {
    let mut xs = Vec::new();
    for r in 0..mask.h {
        crossings(poly, r as f64, &mut xs);
        for c in 0..mask.w {
            // a pixel is inside when an odd number of crossings lie to its right
            let right = xs.len() - xs.partition_point(|&x| x <= c as f64);
            if right % 2 == 1 {
                mask.set(r, c, true);
            }
        }
    }
}

fn region(poly: Option<&[Point]>, h: usize, w: usize) -> Grid<bool> {
    let mut g = Grid::filled(h, w, false);
    if let Some(p) = poly {
        fill(&mut g, p);
    }
    g
}

/// Class map from optional endocardial and epicardial polygons.
pub fn contour_to_mask(
    endo: Option<&[Point]>,
    epi: Option<&[Point]>,
    h: usize,
    w: usize,
) -> Grid<u8> {
    let cavity = region(endo, h, w);
    let wall = region(epi, h, w);
    Grid::from_fn(h, w, |r, c| {
        if cavity.get(r, c) {
            CAVITY
        } else if wall.get(r, c) {
            MYOCARDIUM
        } else {
            BACKGROUND
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(cx: f64, cy: f64, hw: f64) -> Polygon {
        vec![
            Point::new(cx - hw, cy - hw),
            Point::new(cx + hw, cy - hw),
            Point::new(cx + hw, cy + hw),
            Point::new(cx - hw, cy + hw),
        ]
    }

    #[test]
    fn parses_triangle_with_blank_lines() {
        let p = parse_contour_text("0 0\n4 0  \n\n0 4\n\n", "t").unwrap();
        assert_eq!(
            p,
            vec![
                Point::new(0.0, 0.0),
                Point::new(4.0, 0.0),
                Point::new(0.0, 4.0)
            ]
        );
    }

    #[test]
    fn rejects_bad_tokens_and_short_contours() {
        let err = parse_contour_text("0 0\n1 x\n2 2\n", "t")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(parse_contour_text("0 0\n1 1\n", "t").is_err());
        assert!(parse_contour_text("0 0 0\n1 1\n2 2\n", "t").is_err());
    }

    #[test]
    fn text_round_trip_keeps_full_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        let poly = vec![
            Point::new(0.1 + 0.2, 1.0 / 3.0),
            Point::new(std::f64::consts::PI, 1e-17),
            Point::new(-7.25, 123456.789012345),
        ];
        save_contour_text(&poly, &path).unwrap();
        assert_eq!(load_contour_text(&path).unwrap(), poly);
    }

    #[test]
    fn concentric_squares_match_point_oracle() {
        let epi = square(15.5, 15.5, 8.0);
        let endo = square(15.5, 15.5, 4.0);
        let mask = contour_to_mask(Some(&endo), Some(&epi), 32, 32);
        let (mut cav, mut myo) = (0, 0);
        for r in 0..32 {
            for c in 0..32 {
                let (x, y) = (c as f64, r as f64);
                let in_endo = point_in_polygon(&endo, x, y);
                let in_epi = point_in_polygon(&epi, x, y);
                let want = if in_endo {
                    CAVITY
                } else if in_epi {
                    MYOCARDIUM
                } else {
                    BACKGROUND
                };
                assert_eq!(mask.get(r, c), want, "pixel ({r},{c})");
                cav += in_endo as usize;
                myo += (in_epi && !in_endo) as usize;
            }
        }
        // half-width 4 around a half-integer centre covers 8 pixel centres per side
        assert_eq!(cav, 64);
        assert_eq!(myo, 16 * 16 - 64);
    }

    #[test]
    fn degenerate_containment_does_not_crash() {
        let epi = square(8.0, 8.0, 3.0);
        let endo = square(20.0, 20.0, 3.0);
        let mask = contour_to_mask(Some(&endo), Some(&epi), 32, 32);
        assert!(mask.data.contains(&CAVITY));
        let none = contour_to_mask(None, None, 4, 4);
        assert!(none.data.iter().all(|&v| v == BACKGROUND));
    }

    #[test]
    fn self_intersecting_polygon_uses_even_odd() {
        // pentagram: the central pentagon is outside under even-odd
        let star: Polygon = (0..5)
            .map(|k| {
                let t = std::f64::consts::FRAC_PI_2 + k as f64 * 4.0 * std::f64::consts::PI / 5.0;
                Point::new(20.0 + 15.0 * t.cos(), 20.0 - 15.0 * t.sin())
            })
            .collect();
        let mask = contour_to_mask(None, Some(&star), 41, 41);
        assert_eq!(mask.get(20, 20), BACKGROUND);
        for r in 0..41 {
            for c in 0..41 {
                assert_eq!(
                    mask.get(r, c) == MYOCARDIUM,
                    point_in_polygon(&star, c as f64, r as f64)
                );
            }
        }
    }
}

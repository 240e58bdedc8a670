//! Binary masks as run-length encoded rows, and their on-disk text format.
//!
//! Grammar (one token per rule, single spaces, no blank lines):
//!
//! ```text
//! file  := "dims" SP width SP height NL (mask)*
//! mask  := "mask" NL (row)+ "end" NL
//! row   := y (SP x ":" len)+ NL
//! ```
//!
//! Rows within a mask are strictly increasing in `y`; runs within a row are
//! sorted by `x` and non-overlapping; every run stays inside the image and
//! has positive length. A mask must contain at least one run. Parse errors
//! report the offending 1-based line.

use crate::error::{Error, Result};
use crate::geom::BoxF;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    /// (y, runs) with runs as (x, len); ordering as per the file grammar.
    pub rows: Vec<(usize, Vec<(usize, usize)>)>,
}

impl Mask {
    /// Set-pixel count.
    pub fn area(&self) -> usize {
        self.rows
            .iter()
            .map(|(_, runs)| runs.iter().map(|&(_, l)| l).sum::<usize>())
            .sum()
    }

    /// Tight pixel bounding box as a real box (pixel (x,y) spans
    /// [x, x+1) x [y, y+1)).
    pub fn bbox(&self) -> BoxF {
        let mut x0 = usize::MAX;
        let mut x1 = 0usize;
        let y0 = self.rows.first().map_or(0, |r| r.0);
        let y1 = self.rows.last().map_or(0, |r| r.0 + 1);
        for (_, runs) in &self.rows {
            for &(x, l) in runs {
                x0 = x0.min(x);
                x1 = x1.max(x + l);
            }
        }
        BoxF::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub width: usize,
    pub height: usize,
    pub masks: Vec<Mask>,
}

impl MaskSet {
    pub fn parse(text: &str, path: &str) -> Result<MaskSet> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| err(1, "empty mask file".into()))?;
        let parts: Vec<&str> = first.split(' ').collect();
        if parts.len() != 3 || parts[0] != "dims" {
            return Err(err(1, format!("expected 'dims <w> <h>', got '{first}'")));
        }
        let width: usize = parts[1]
            .parse()
            .map_err(|_| err(1, format!("bad width '{}'", parts[1])))?;
        let height: usize = parts[2]
            .parse()
            .map_err(|_| err(1, format!("bad height '{}'", parts[2])))?;
        if width == 0 || height == 0 {
            return Err(err(1, "zero image dimension".into()));
        }

        let mut masks = Vec::new();
        let mut current: Option<Mask> = None;
        let mut last_line = 1;
        for (i, line) in lines {
            let lineno = i + 1;
            last_line = lineno;
            match (line, &mut current) {
                ("mask", None) => current = Some(Mask { rows: Vec::new() }),
                ("mask", Some(_)) => {
                    return Err(err(lineno, "'mask' inside an unterminated mask".into()));
                }
                ("end", Some(m)) => {
                    if m.rows.is_empty() {
                        return Err(err(lineno, "mask has no set pixels".into()));
                    }
                    masks.push(current.take().unwrap());
                }
                ("end", None) => return Err(err(lineno, "'end' without 'mask'".into())),
                (row, None) => {
                    return Err(err(lineno, format!("row '{row}' outside a mask block")));
                }
                (row, Some(m)) => {
                    let mut toks = row.split(' ');
                    let y: usize = toks
                        .next()
                        .unwrap_or("")
                        .parse()
                        .map_err(|_| err(lineno, format!("bad row y in '{row}'")))?;
                    if y >= height {
                        return Err(err(lineno, format!("row y {y} outside height {height}")));
                    }
                    if let Some(&(prev_y, _)) = m.rows.last() {
                        if y <= prev_y {
                            return Err(err(lineno, format!("row y {y} not increasing")));
                        }
                    }
                    let mut runs = Vec::new();
                    let mut min_next_x = 0usize;
                    for t in toks {
                        let (xs, ls) = t
                            .split_once(':')
                            .ok_or_else(|| err(lineno, format!("bad run '{t}'")))?;
                        let x: usize = xs
                            .parse()
                            .map_err(|_| err(lineno, format!("bad run x '{xs}'")))?;
                        let l: usize = ls
                            .parse()
                            .map_err(|_| err(lineno, format!("bad run len '{ls}'")))?;
                        if l == 0 {
                            return Err(err(lineno, "zero-length run".into()));
                        }
                        if x < min_next_x {
                            return Err(err(lineno, format!("run at x {x} overlaps or unsorted")));
                        }
                        if x + l > width {
                            return Err(err(
                                lineno,
                                format!("run {x}:{l} exceeds width {width}"),
                            ));
                        }
                        min_next_x = x + l;
                        runs.push((x, l));
                    }
                    if runs.is_empty() {
                        return Err(err(lineno, "row without runs".into()));
                    }
                    m.rows.push((y, runs));
                }
            }
        }
        if current.is_some() {
            return Err(err(last_line, "file ends inside a mask (missing 'end')".into()));
        }
        Ok(MaskSet {
            width,
            height,
            masks,
        })
    }

    pub fn read(path: &Path) -> Result<MaskSet> {
        let text = std::fs::read_to_string(path)?;
        MaskSet::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("dims {} {}\n", self.width, self.height);
        for m in &self.masks {
            out.push_str("mask\n");
            for (y, runs) in &m.rows {
                out.push_str(&y.to_string());
                for &(x, l) in runs {
                    out.push_str(&format!(" {x}:{l}"));
                }
                out.push('\n');
            }
            out.push_str("end\n");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Pixel membership raster, for brute-force oracles.
    pub fn rasterize(&self, mask_idx: usize) -> Vec<bool> {
        let mut grid = vec![false; self.width * self.height];
        for (y, runs) in &self.masks[mask_idx].rows {
            for &(x, l) in runs {
                for xx in x..x + l {
                    grid[y * self.width + xx] = true;
                }
            }
        }
        grid
    }
}

/// Build a mask from an arbitrary pixel membership raster (test/generator
/// helper); returns None when no pixel is set.
pub fn mask_from_raster(width: usize, grid: &[bool]) -> Option<Mask> {
    let height = grid.len() / width;
    let mut rows = Vec::new();
    for y in 0..height {
        let mut runs = Vec::new();
        let mut x = 0;
        while x < width {
            if grid[y * width + x] {
                let start = x;
                while x < width && grid[y * width + x] {
                    x += 1;
                }
                runs.push((start, x - start));
            } else {
                x += 1;
            }
        }
        if !runs.is_empty() {
            rows.push((y, runs));
        }
    }
    if rows.is_empty() {
        None
    } else {
        Some(Mask { rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        let text = "dims 8 6\nmask\n1 2:3\n2 0:1 4:2\nend\nmask\n5 7:1\nend\n";
        let ms = MaskSet::parse(text, "t").unwrap();
        assert_eq!(ms.masks.len(), 2);
        assert_eq!(ms.masks[0].area(), 6);
        assert_eq!(ms.masks[1].area(), 1);
        assert_eq!(ms.to_text(), text);
    }

    #[test]
    fn bbox_is_tight() {
        let text = "dims 10 10\nmask\n2 3:2\n4 1:1\nend\n";
        let ms = MaskSet::parse(text, "t").unwrap();
        let bb = ms.masks[0].bbox();
        assert_eq!((bb.x0, bb.y0, bb.x1, bb.y1), (1.0, 2.0, 5.0, 5.0));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("dims 8\n", 1),
            ("dims 8 6\nmask\nend\n", 3),
            ("dims 8 6\nmask\n1 9:1\nend\n", 3),
            ("dims 8 6\nmask\n2 1:2\n1 0:1\nend\n", 4),
            ("dims 8 6\nmask\n1 0:2 1:2\nend\n", 3),
            ("dims 8 6\nmask\n1 0:2\n", 3),
            ("dims 8 6\nend\n", 2),
        ];
        for (text, want_line) in cases {
            match MaskSet::parse(text, "t") {
                Err(Error::Parse { line, .. }) => {
                    assert_eq!(line, want_line, "for input {text:?}");
                }
                other => panic!("expected parse error for {text:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn raster_round_trip() {
        let mut rng = crate::rng::Rng::seed_from(101);
        for _ in 0..20 {
            let w = 4 + rng.below(12);
            let h = 4 + rng.below(12);
            let grid: Vec<bool> = (0..w * h).map(|_| rng.uniform() < 0.3).collect();
            if let Some(mask) = mask_from_raster(w, &grid) {
                let ms = MaskSet {
                    width: w,
                    height: h,
                    masks: vec![mask],
                };
                let back = MaskSet::parse(&ms.to_text(), "t").unwrap();
                assert_eq!(back.rasterize(0), grid);
            }
        }
    }
}

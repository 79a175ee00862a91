//! Attention vectors as images: reshaping onto the spatial grid, mass
//! thresholding, bounding boxes of the largest region and binary PGM output.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matcore::Mat;

/// Attention laid out as an `H x W` grid, `values[(y, x)] = a[y * W + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnGrid {
    values: Mat,
}

impl AttnGrid {
    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    pub fn height(&self) -> usize {
        self.values.rows()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.data().to_vec()
    }
}

pub fn reshape_attention(a: &[f64], width: usize, height: usize) -> Result<AttnGrid> {
    if width == 0 || height == 0 || a.len() != width * height {
        return Err(Error::shape(
            "reshape_attention",
            format!("{} values on a {width}x{height} grid", a.len()),
        ));
    }
    Ok(AttnGrid {
        values: Mat::new(height, width, a.to_vec())?,
    })
}

/// Binary image on the same grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    cells: Vec<bool>,
    width: usize,
    height: usize,
}

impl Mask {
    pub fn new(cells: Vec<bool>, width: usize, height: usize) -> Result<Self> {
        if cells.len() != width * height {
            return Err(Error::shape("Mask::new", format!("{} cells on a {width}x{height} grid", cells.len())));
        }
        Ok(Self { cells, width, height })
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.cells[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&i| self.cells[i]).collect()
    }
}

/// Smallest set of highest-valued cells holding at least `fraction` of the
/// total mass. Equal values are taken in increasing flat index.
pub fn mass_threshold(grid: &AttnGrid, fraction: f64) -> Result<Mask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Range(format!("mass fraction must lie in (0, 1], got {fraction}")));
    }
    let values = grid.values.data();
    if let Some(i) = values.iter().position(|v| !(*v >= 0.0)) {
        return Err(Error::contract(format!("attention cell {i} is negative or NaN")));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    let total: f64 = order.iter().map(|&i| values[i]).sum();
    if total <= 0.0 {
        return Err(Error::DegenerateMass {
            op: "mass_threshold",
            axis: "grid",
            index: 0,
        });
    }
    let target = fraction * total;
    let mut cells = vec![false; values.len()];
    let mut acc = 0.0;
    for &i in &order {
        cells[i] = true;
        acc += values[i];
        if acc >= target {
            break;
        }
    }
    Mask::new(cells, grid.width(), grid.height())
}

/// Inclusive pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

/// 4-connected components in order of their first cell; each is a list of flat indices.
pub fn components(mask: &Mask) -> Vec<Vec<usize>> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; mask.cells.len()];
    let mut out = Vec::new();
    for start in 0..mask.cells.len() {
        if !mask.cells[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask.cells[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        out.push(comp);
    }
    out
}

/// Tight box of the largest 4-connected component; ties go to the component
/// whose first cell has the smaller flat index.
pub fn largest_component_bbox(mask: &Mask) -> Result<BBox> {
    let comps = components(mask);
    let mut best: Option<&Vec<usize>> = None;
    for c in &comps {
        if best.is_none_or(|b| c.len() > b.len()) {
            best = Some(c);
        }
    }
    let best = best.ok_or_else(|| Error::contract("mask has no set cell"))?;
    let w = mask.width;
    let mut b = BBox {
        x_min: usize::MAX,
        y_min: usize::MAX,
        x_max: 0,
        y_max: 0,
    };
    for &i in best {
        let (x, y) = (i % w, i / w);
        b.x_min = b.x_min.min(x);
        b.y_min = b.y_min.min(y);
        b.x_max = b.x_max.max(x);
        b.y_max = b.y_max.max(y);
    }
    Ok(b)
}

fn pgm(width: usize, height: usize, pixels: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

/// Binary 8-bit PGM, min-max scaled with round-half-up; a constant grid is all zeros.
pub fn grid_pgm_bytes(grid: &AttnGrid) -> Vec<u8> {
    let v = grid.values();
    let (lo, hi) = (v.min(), v.max());
    let range = hi - lo;
    let px = v.data().iter().map(move |&x| {
        if range > 0.0 {
            ((x - lo) / range * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    });
    pgm(grid.width(), grid.height(), px)
}

/// Binary PGM with kept cells at 255.
pub fn mask_pgm_bytes(mask: &Mask) -> Vec<u8> {
    pgm(mask.width, mask.height, mask.cells.iter().map(|&c| if c { 255 } else { 0 }))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_pgm(grid: &AttnGrid, path: &Path) -> Result<()> {
    write_bytes(path, &grid_pgm_bytes(grid))
}

pub fn write_mask_pgm(mask: &Mask, path: &Path) -> Result<()> {
    write_bytes(path, &mask_pgm_bytes(mask))
}

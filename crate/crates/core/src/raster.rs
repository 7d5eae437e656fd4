//! Pixel images of the unit disk and inverse-distance-weighted rasterization.
//!
//! The disk of radius `R` maps to the inscribed circle of a `side × side`
//! square covering `[−R, R]²`. Row 0 is the top of the image (largest `y`).

use crate::error::{check_len, EitError, Result};
use crate::mesh::{ConductivityField, Mesh, Point};

pub const DEFAULT_GRID: usize = 128;
pub const DEFAULT_POWER: f64 = 2.0;
pub const DEFAULT_NEIGHBORS: usize = 6;

/// Relative slack when deciding that a centroid ties with the k-th nearest.
const TIE_TOL: f64 = 1e-9;

/// Square row-major image.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    side: usize,
    values: Vec<f64>,
}

impl PixelImage {
    pub fn new(side: usize, values: Vec<f64>) -> Result<Self> {
        if side == 0 {
            return Err(EitError::invalid("image side must be positive"));
        }
        check_len("image pixels", side * side, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EitError::NonFinite("image".into()));
        }
        Ok(PixelImage { side, values })
    }

    pub fn filled(side: usize, value: f64) -> Result<Self> {
        Self::new(side, vec![value; side * side])
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                values.push(f(r, c));
            }
        }
        Self::new(side, values)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.side + col]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Flip top to bottom, i.e. reflect across the x-axis.
    pub fn flip_rows(&self) -> PixelImage {
        let n = self.side;
        PixelImage {
            side: n,
            values: (0..n * n).map(|k| self.values[(n - 1 - k / n) * n + k % n]).collect(),
        }
    }
}

/// Centre of pixel `(row, col)` on a `side`-pixel grid over `[−radius, radius]²`.
pub fn pixel_center(side: usize, radius: f64, row: usize, col: usize) -> Point {
    let h = 2.0 * radius / side as f64;
    [-radius + (col as f64 + 0.5) * h, radius - (row as f64 + 0.5) * h]
}

/// Whether the pixel centre lies in the closed disk.
pub fn in_disk(side: usize, radius: f64, row: usize, col: usize) -> bool {
    let [x, y] = pixel_center(side, radius, row, col);
    x * x + y * y <= radius * radius
}

/// Normalized IDW weights at `p` over the `neighbors` nearest sites. Sites
/// tied with the last one kept are included as well, so the result does not
/// depend on site order. A site closer than `1e-12` takes all the weight.
pub fn idw_weights(p: Point, sites: &[Point], power: f64, neighbors: usize) -> Vec<(usize, f64)> {
    let mut d: Vec<(f64, usize)> = sites
        .iter()
        .enumerate()
        .map(|(i, s)| ((s[0] - p[0]).hypot(s[1] - p[1]), i))
        .collect();
    let k = neighbors.clamp(1, d.len());
    d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
    let kth = d[k - 1].0;
    let cut = kth * (1.0 + TIE_TOL) + 1e-15;

    let mut kept: Vec<(f64, usize)> = d.into_iter().filter(|&(dist, _)| dist <= cut).collect();
    kept.sort_by_key(|&(_, i)| i);
    if let Some(&(_, i)) = kept.iter().find(|&&(dist, _)| dist < 1e-12) {
        return vec![(i, 1.0)];
    }
    let w: Vec<f64> = kept.iter().map(|&(dist, _)| dist.powf(-power)).collect();
    let den: f64 = w.iter().sum();
    kept.iter().zip(&w).map(|(&(_, i), wi)| (i, wi / den)).collect()
}

/// Weighted mean written as an offset from the smallest value involved, so
/// equal values reproduce exactly.
fn weighted_value(weights: &[(usize, f64)], values: &[f64]) -> f64 {
    let base = weights.iter().map(|&(i, _)| values[i]).fold(f64::INFINITY, f64::min);
    base + weights.iter().map(|&(i, w)| w * (values[i] - base)).sum::<f64>()
}

/// IDW estimate at `p` from the `neighbors` nearest sites.
pub fn idw_value(p: Point, sites: &[Point], values: &[f64], power: f64, neighbors: usize) -> f64 {
    weighted_value(&idw_weights(p, sites, power, neighbors), values)
}

/// Precomputed IDW weights from element centroids to the pixels of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterOperator {
    side: usize,
    n_elements: usize,
    /// Per pixel; `None` outside the disk.
    weights: Vec<Option<Vec<(usize, f64)>>>,
}

impl RasterOperator {
    pub fn new(mesh: &Mesh, side: usize, power: f64, neighbors: usize) -> Result<Self> {
        if side == 0 {
            return Err(EitError::invalid("image side must be positive"));
        }
        if neighbors == 0 || !(power > 0.0) {
            return Err(EitError::invalid("IDW needs positive power and at least one neighbour"));
        }
        let centroids = mesh.element_centroids();
        let radius = mesh.radius();
        let mut weights = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                weights.push(
                    in_disk(side, radius, r, c)
                        .then(|| idw_weights(pixel_center(side, radius, r, c), &centroids, power, neighbors)),
                );
            }
        }
        Ok(RasterOperator {
            side,
            n_elements: mesh.n_elements(),
            weights,
        })
    }

    pub fn with_defaults(mesh: &Mesh, side: usize) -> Result<Self> {
        Self::new(mesh, side, DEFAULT_POWER, DEFAULT_NEIGHBORS)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Pixels outside the disk take `background`.
    pub fn apply(&self, field: &ConductivityField, background: f64) -> Result<PixelImage> {
        check_len("conductivity field", self.n_elements, field.len())?;
        let values = field.values();
        let pixels = self
            .weights
            .iter()
            .map(|w| w.as_ref().map_or(background, |w| weighted_value(w, values)))
            .collect();
        PixelImage::new(self.side, pixels)
    }
}

/// Rasterize an element field by inverse-distance weighting of element
/// centroids. Pixels outside the disk take `background`.
pub fn rasterize_idw(
    mesh: &Mesh,
    field: &ConductivityField,
    side: usize,
    power: f64,
    neighbors: usize,
    background: f64,
) -> Result<PixelImage> {
    field.check_on(mesh)?;
    RasterOperator::new(mesh, side, power, neighbors)?.apply(field, background)
}

/// Rasterize with the default power and neighbour count.
pub fn rasterize_default(mesh: &Mesh, field: &ConductivityField, side: usize, background: f64) -> Result<PixelImage> {
    rasterize_idw(mesh, field, side, DEFAULT_POWER, DEFAULT_NEIGHBORS, background)
}

/// Sample an image back onto the mesh: each element takes the pixel under
/// its centroid.
pub fn sample_at_centroids(mesh: &Mesh, image: &PixelImage) -> Result<ConductivityField> {
    let n = image.side();
    let radius = mesh.radius();
    let h = 2.0 * radius / n as f64;
    let values = mesh
        .element_centroids()
        .iter()
        .map(|p| {
            let col = (((p[0] + radius) / h).floor() as isize).clamp(0, n as isize - 1) as usize;
            let row = (((radius - p[1]) / h).floor() as isize).clamp(0, n as isize - 1) as usize;
            image.get(row, col)
        })
        .collect();
    ConductivityField::new(values)
}

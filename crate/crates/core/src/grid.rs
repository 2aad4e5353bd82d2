use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rectangular histogram grid over `[x_min, x_max] × [y_min, y_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub bins: [usize; 2],
}

impl GridSpec {
    pub fn new(x_range: [f64; 2], y_range: [f64; 2], bins: [usize; 2]) -> Result<Self> {
        let g = Self { x_range, y_range, bins };
        g.validate()?;
        Ok(g)
    }

    /// Square grid `[-half, half]²` with `n × n` bins.
    pub fn square(half: f64, n: usize) -> Result<Self> {
        Self::new([-half, half], [-half, half], [n, n])
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.x_range[1] > self.x_range[0]
            && self.y_range[1] > self.y_range[0]
            && self.bins[0] > 0
            && self.bins[1] > 0
            && self.x_range.iter().chain(&self.y_range).all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("degenerate grid {self:?}")))
        }
    }

    pub fn n_cells(&self) -> usize {
        self.bins[0] * self.bins[1]
    }

    pub fn cell_width(&self) -> [f64; 2] {
        [
            (self.x_range[1] - self.x_range[0]) / self.bins[0] as f64,
            (self.y_range[1] - self.y_range[0]) / self.bins[1] as f64,
        ]
    }

    pub fn cell_area(&self) -> f64 {
        let w = self.cell_width();
        w[0] * w[1]
    }

    /// Row-major (x-major) index of the cell containing `x`; `None` outside.
    #[inline]
    pub fn cell_of(&self, x: &[f64]) -> Option<usize> {
        let fx = (x[0] - self.x_range[0]) / (self.x_range[1] - self.x_range[0]);
        let fy = (x[1] - self.y_range[0]) / (self.y_range[1] - self.y_range[0]);
        if !(0.0..1.0).contains(&fx) || !(0.0..1.0).contains(&fy) {
            return None;
        }
        let i = ((fx * self.bins[0] as f64) as usize).min(self.bins[0] - 1);
        let j = ((fy * self.bins[1] as f64) as usize).min(self.bins[1] - 1);
        Some(i * self.bins[1] + j)
    }

    pub fn center(&self, cell: usize) -> [f64; 2] {
        let w = self.cell_width();
        let i = cell / self.bins[1];
        let j = cell % self.bins[1];
        [
            self.x_range[0] + (i as f64 + 0.5) * w[0],
            self.y_range[0] + (j as f64 + 0.5) * w[1],
        ]
    }

    pub fn centers(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.n_cells()).map(|c| self.center(c))
    }

    /// Cells whose centers are within `radius` of `point`.
    pub fn cells_within(&self, point: [f64; 2], radius: f64) -> Vec<usize> {
        (0..self.n_cells())
            .filter(|&c| {
                let p = self.center(c);
                ((p[0] - point[0]).powi(2) + (p[1] - point[1]).powi(2)).sqrt() <= radius
            })
            .collect()
    }
}

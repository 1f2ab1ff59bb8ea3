//! Euclidean signed distance field over an occupancy grid.
//!
//! Distances are measured between cell centres: a free cell stores the
//! distance to the nearest occupied centre, an occupied cell stores minus the
//! distance to the nearest free centre. Both halves come from the exact
//! two-pass separable transform of Felzenszwalb & Huttenlocher.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector2;

use crate::envsim::OccupancyGrid;
use crate::error::{Error, Result};

/// Stand-in for "no obstacle anywhere" before capping.
const FAR: f64 = 1e20;

#[derive(Clone, Debug, PartialEq)]
pub struct EsdfGrid {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub origin: Vector2<f64>,
    /// Signed distances in meters, row-major like [`OccupancyGrid::cells`].
    pub distance: Vec<f64>,
    /// Magnitude cap applied when one of the two cell classes is absent.
    pub max_distance: f64,
}

/// Result of sampling the field at a continuous point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EsdfSample {
    pub distance: f64,
    pub cost: f64,
    /// Gradient of `cost` w.r.t. the query position, in 1/m.
    pub grad: Vector2<f64>,
    /// The query was outside the interpolation domain and got clamped to it.
    pub clamped: bool,
}

/// Obstacle-proximity penalty derived from the signed distance:
/// `(d_safe - d)^2` inside the safety band, zero beyond it, continued
/// linearly (with matching slope) inside obstacles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProximityCost {
    pub d_safe: f64,
}

impl ProximityCost {
    pub fn for_robot(robot_radius: f64) -> Self {
        Self {
            d_safe: 1.5 * robot_radius,
        }
    }

    /// `(c(d), c'(d))`.
    pub fn eval(&self, d: f64) -> (f64, f64) {
        let s = self.d_safe;
        if d >= s {
            (0.0, 0.0)
        } else if d >= 0.0 {
            ((s - d) * (s - d), -2.0 * (s - d))
        } else {
            (s * s - 2.0 * s * d, -2.0 * s)
        }
    }
}

/// 1D squared distance transform of a sampled function (lower envelope of
/// parabolas). `f` holds squared distances in cell units, `FAR` for "none".
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        // z[0] = -inf stops the walk.
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Squared Euclidean distance (in cells) from every cell to the nearest
/// cell where `target` is true.
fn squared_edt(width: usize, height: usize, target: impl Fn(usize) -> bool) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..width * height).map(|k| if target(k) { 0.0 } else { FAR }).collect();
    let n = width.max(height);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    // Columns.
    for i in 0..width {
        for j in 0..height {
            f[j] = grid[j * width + i];
        }
        dt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for j in 0..height {
            grid[j * width + i] = out[j];
        }
    }
    // Rows.
    for j in 0..height {
        let row = &mut grid[j * width..(j + 1) * width];
        f[..width].copy_from_slice(row);
        dt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        row.copy_from_slice(&out[..width]);
    }
    grid
}

impl EsdfGrid {
    pub fn build(grid: &OccupancyGrid) -> Self {
        Self::build_with_cap(grid, 10.0)
    }

    pub fn build_with_cap(grid: &OccupancyGrid, max_distance: f64) -> Self {
        let (w, h) = (grid.width, grid.height);
        let to_occ = squared_edt(w, h, |k| grid.cells[k]);
        let to_free = squared_edt(w, h, |k| !grid.cells[k]);
        let res = grid.resolution;
        let distance = (0..w * h)
            .map(|k| {
                if grid.cells[k] {
                    let d2 = to_free[k];
                    if d2 >= FAR {
                        -max_distance
                    } else {
                        (-d2.sqrt() * res).max(-max_distance)
                    }
                } else {
                    let d2 = to_occ[k];
                    if d2 >= FAR {
                        max_distance
                    } else {
                        (d2.sqrt() * res).min(max_distance)
                    }
                }
            })
            .collect();
        Self {
            width: w,
            height: h,
            resolution: res,
            origin: grid.origin,
            distance,
            max_distance,
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.distance[j * self.width + i]
    }

    /// Bilinearly interpolated distance and its spatial gradient.
    pub fn interpolate(&self, p: &Vector2<f64>) -> (f64, Vector2<f64>, bool) {
        let res = self.resolution;
        let gx = (p.x - self.origin.x) / res - 0.5;
        let gy = (p.y - self.origin.y) / res - 0.5;
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let clamped = !(0.0..=max_x).contains(&gx) || !(0.0..=max_y).contains(&gy);
        let gx = gx.clamp(0.0, max_x);
        let gy = gy.clamp(0.0, max_y);
        let i0 = (gx.floor() as usize).min(self.width.saturating_sub(2));
        let j0 = (gy.floor() as usize).min(self.height.saturating_sub(2));
        let fx = gx - i0 as f64;
        let fy = gy - j0 as f64;
        let d00 = self.at(i0, j0);
        let d10 = self.at(i0 + 1, j0);
        let d01 = self.at(i0, j0 + 1);
        let d11 = self.at(i0 + 1, j0 + 1);
        let d = (1.0 - fx) * (1.0 - fy) * d00 + fx * (1.0 - fy) * d10 + (1.0 - fx) * fy * d01 + fx * fy * d11;
        let grad = if clamped {
            // Outside the domain the sample is constant along the clamped axis.
            let ddx = if (0.0..=max_x).contains(&((p.x - self.origin.x) / res - 0.5)) {
                ((1.0 - fy) * (d10 - d00) + fy * (d11 - d01)) / res
            } else {
                0.0
            };
            let ddy = if (0.0..=max_y).contains(&((p.y - self.origin.y) / res - 0.5)) {
                ((1.0 - fx) * (d01 - d00) + fx * (d11 - d10)) / res
            } else {
                0.0
            };
            Vector2::new(ddx, ddy)
        } else {
            Vector2::new(
                ((1.0 - fy) * (d10 - d00) + fy * (d11 - d01)) / res,
                ((1.0 - fx) * (d01 - d00) + fx * (d11 - d10)) / res,
            )
        };
        (d, grad, clamped)
    }

    /// Proximity cost and its gradient at a continuous point.
    pub fn sample(&self, p: &Vector2<f64>, cost: &ProximityCost) -> EsdfSample {
        let (d, gd, clamped) = self.interpolate(p);
        let (c, dc) = cost.eval(d);
        EsdfSample {
            distance: d,
            cost: c,
            grad: gd * dc,
            clamped,
        }
    }

    /// Writes the distance field as a CSV matrix, bottom row first.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for j in 0..self.height {
            let row = &self.distance[j * self.width..(j + 1) * self.width];
            let line: Vec<String> = row.iter().map(|d| format!("{d:.6}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_obstacle_distances() {
        let mut g = OccupancyGrid::empty(9, 7, 0.5);
        g.set(3, 2, true);
        let e = EsdfGrid::build(&g);
        for j in 0..7 {
            for i in 0..9 {
                let di = i as f64 - 3.0;
                let dj = j as f64 - 2.0;
                let expect = if (i, j) == (3, 2) { -0.5 } else { (di * di + dj * dj).sqrt() * 0.5 };
                assert!((e.at(i, j) - expect).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn free_grid_is_capped() {
        let g = OccupancyGrid::empty(5, 5, 0.1);
        let e = EsdfGrid::build_with_cap(&g, 3.0);
        assert!(e.distance.iter().all(|d| *d == 3.0));
    }

    #[test]
    fn cost_dead_zone_and_cell_centres() {
        let mut g = OccupancyGrid::bordered(60, 60, 0.1);
        g.set(20, 20, true);
        let e = EsdfGrid::build(&g);
        let pc = ProximityCost::for_robot(0.35);
        let s = e.sample(&Vector2::new(4.0, 4.0), &pc);
        assert_eq!(s.cost, 0.0);
        assert_eq!(s.grad, Vector2::zeros());
        let c = g.cell_center(22, 21);
        let s = e.sample(&c, &pc);
        assert!((s.distance - e.at(22, 21)).abs() < 1e-12);
    }

    #[test]
    fn cost_is_c1_at_zero_and_monotone() {
        let pc = ProximityCost { d_safe: 0.5 };
        let (a, da) = pc.eval(1e-12);
        let (b, db) = pc.eval(-1e-12);
        assert!((a - b).abs() < 1e-9 && (da - db).abs() < 1e-9);
        let mut prev = f64::INFINITY;
        for k in -50..80 {
            let (c, _) = pc.eval(k as f64 * 0.01);
            assert!(c <= prev);
            prev = c;
        }
        assert_eq!(pc.eval(0.5).0, 0.0);
        assert!(pc.eval(0.4999).0 > 0.0);
    }
}

//! Procedural 2D worlds, range sensing and collision checks.
//!
//! Worlds are boolean occupancy grids with an occupied border. Four
//! archetypes are generated from a seed: `forest` (Poisson-disk trees),
//! `garage` (walled bays with door gaps), `indoor` (corridor maze) and
//! `campus` (buildings mixed with trees).

use std::collections::VecDeque;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se2::{wrap_angle, Pose2};

#[derive(Clone, PartialEq)]
pub struct OccupancyGrid {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    /// World position of the lower-left corner of cell (0, 0). Grids are axis aligned.
    pub origin: Vector2<f64>,
    /// Row-major occupancy, index `j * width + i` for column `i`, row `j`.
    pub cells: Vec<bool>,
}

impl fmt::Debug for OccupancyGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OccupancyGrid")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("resolution", &self.resolution)
            .field("occupied", &self.cells.iter().filter(|c| **c).count())
            .finish()
    }
}

impl OccupancyGrid {
    /// All-free grid without the closed-world border.
    pub fn empty(width: usize, height: usize, resolution: f64) -> Self {
        Self {
            width,
            height,
            resolution,
            origin: Vector2::zeros(),
            cells: vec![false; width * height],
        }
    }

    /// Free grid with an occupied one-cell border.
    pub fn bordered(width: usize, height: usize, resolution: f64) -> Self {
        let mut g = Self::empty(width, height, resolution);
        for i in 0..width {
            g.set(i, 0, true);
            g.set(i, height - 1, true);
        }
        for j in 0..height {
            g.set(0, j, true);
            g.set(width - 1, j, true);
        }
        g
    }

    /// Checks the closed-world invariants: positive resolution, a free cell
    /// somewhere and an occupied border.
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) {
            return Err(Error::InvalidGrid(format!("resolution {}", self.resolution)));
        }
        if self.width < 3 || self.height < 3 || self.cells.len() != self.width * self.height {
            return Err(Error::InvalidGrid(format!(
                "bad shape {}x{} with {} cells",
                self.width,
                self.height,
                self.cells.len()
            )));
        }
        if !self.cells.iter().any(|c| !c) {
            return Err(Error::InvalidGrid("no free cell".into()));
        }
        let border = (0..self.width).all(|i| self.get(i, 0) && self.get(i, self.height - 1))
            && (0..self.height).all(|j| self.get(0, j) && self.get(self.width - 1, j));
        if !border {
            return Err(Error::InvalidGrid("border is not closed".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[j * self.width + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, occupied: bool) {
        self.cells[j * self.width + i] = occupied;
    }

    pub fn world_width(&self) -> f64 {
        self.width as f64 * self.resolution
    }

    pub fn world_height(&self) -> f64 {
        self.height as f64 * self.resolution
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Vector2<f64> {
        self.origin
            + Vector2::new(
                (i as f64 + 0.5) * self.resolution,
                (j as f64 + 0.5) * self.resolution,
            )
    }

    /// Cell containing a world point, or `None` outside the grid.
    pub fn cell_of(&self, p: &Vector2<f64>) -> Option<(usize, usize)> {
        let fx = (p.x - self.origin.x) / self.resolution;
        let fy = (p.y - self.origin.y) / self.resolution;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (i, j) = (fx.floor() as usize, fy.floor() as usize);
        (i < self.width && j < self.height).then_some((i, j))
    }

    /// Occupancy at a world point; outside the grid counts as occupied.
    pub fn occupied_at(&self, p: &Vector2<f64>) -> bool {
        self.cell_of(p).map_or(true, |(i, j)| self.get(i, j))
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        let q = p - self.origin;
        q.x >= 0.0 && q.y >= 0.0 && q.x <= self.world_width() && q.y <= self.world_height()
    }

    /// Marks every cell whose centre lies inside the disc.
    pub fn fill_disc(&mut self, c: &Vector2<f64>, r: f64) {
        self.fill_where(c.x - r, c.y - r, c.x + r, c.y + r, |p| (p - c).norm_squared() <= r * r);
    }

    /// Marks every cell whose centre lies inside the axis-aligned box.
    pub fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64) {
        self.fill_where(x0, y0, x1, y1, |_| true);
    }

    fn fill_where(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, inside: impl Fn(&Vector2<f64>) -> bool) {
        let res = self.resolution;
        let lo_i = (((x0 - self.origin.x) / res - 0.5).ceil().max(0.0)) as usize;
        let lo_j = (((y0 - self.origin.y) / res - 0.5).ceil().max(0.0)) as usize;
        let hi_i = ((x1 - self.origin.x) / res - 0.5).floor();
        let hi_j = ((y1 - self.origin.y) / res - 0.5).floor();
        if hi_i < 0.0 || hi_j < 0.0 {
            return;
        }
        let hi_i = (hi_i as usize).min(self.width - 1);
        let hi_j = (hi_j as usize).min(self.height - 1);
        for j in lo_j..=hi_j {
            for i in lo_i..=hi_i {
                if inside(&self.cell_center(i, j)) {
                    self.set(i, j, true);
                }
            }
        }
    }

    /// True iff any occupied cell centre lies within `radius` of the
    /// position. Positions outside the grid always collide.
    pub fn in_collision(&self, p: &Vector2<f64>, radius: f64) -> bool {
        if !self.contains(p) {
            return true;
        }
        let res = self.resolution;
        let q = p - self.origin;
        let lo_i = ((q.x - radius) / res - 0.5).ceil().max(0.0) as usize;
        let lo_j = ((q.y - radius) / res - 0.5).ceil().max(0.0) as usize;
        let hi_i = ((q.x + radius) / res - 0.5).floor();
        let hi_j = ((q.y + radius) / res - 0.5).floor();
        if hi_i < 0.0 || hi_j < 0.0 {
            return false;
        }
        let hi_i = (hi_i as usize).min(self.width - 1);
        let hi_j = (hi_j as usize).min(self.height - 1);
        let r2 = radius * radius;
        // The containing cell always counts, even for a zero radius.
        if let Some((i, j)) = self.cell_of(p) {
            if self.get(i, j) {
                return true;
            }
        }
        for j in lo_j..=hi_j {
            for i in lo_i..=hi_i {
                if self.get(i, j) && (self.cell_center(i, j) - p).norm_squared() <= r2 {
                    return true;
                }
            }
        }
        false
    }

    /// Simulated planar range sensor. Beams are spread uniformly over `fov`
    /// centred on the heading; each reports the distance to the first
    /// occupied cell along the ray, capped at `max_range`.
    pub fn raycast(&self, pose: &Pose2, n_beams: usize, fov: f64, max_range: f64) -> Result<RangeScan> {
        let p = pose.translation();
        if self.occupied_at(&p) {
            return Err(Error::PoseInCollision { x: p.x, y: p.y });
        }
        let beams = (0..n_beams)
            .map(|k| {
                let frac = if n_beams == 1 {
                    0.0
                } else {
                    k as f64 / (n_beams - 1) as f64 - 0.5
                };
                // Beam 0 is the leftmost (counter-clockwise) beam.
                let angle = pose.psi - frac * fov;
                self.cast_ray(&p, angle, max_range)
            })
            .collect();
        Ok(RangeScan {
            beams,
            fov,
            max_range,
        })
    }

    /// Grid traversal (Amanatides & Woo) from a free point.
    fn cast_ray(&self, p: &Vector2<f64>, angle: f64, max_range: f64) -> f64 {
        let res = self.resolution;
        let (dy, dx) = angle.sin_cos();
        let gx = (p.x - self.origin.x) / res;
        let gy = (p.y - self.origin.y) / res;
        let mut i = gx.floor() as i64;
        let mut j = gy.floor() as i64;
        let step_i: i64 = if dx > 0.0 { 1 } else { -1 };
        let step_j: i64 = if dy > 0.0 { 1 } else { -1 };
        // Ray parameter (in meters) to the next vertical / horizontal line.
        let next = |g: f64, d: f64, idx: i64| -> f64 {
            if d == 0.0 {
                f64::INFINITY
            } else if d > 0.0 {
                ((idx + 1) as f64 - g) * res / d
            } else {
                (idx as f64 - g) * res / d
            }
        };
        let mut t_max_x = next(gx, dx, i);
        let mut t_max_y = next(gy, dy, j);
        let t_delta_x = if dx == 0.0 { f64::INFINITY } else { res / dx.abs() };
        let t_delta_y = if dy == 0.0 { f64::INFINITY } else { res / dy.abs() };
        loop {
            let t = if t_max_x < t_max_y {
                i += step_i;
                let t = t_max_x;
                t_max_x += t_delta_x;
                t
            } else {
                j += step_j;
                let t = t_max_y;
                t_max_y += t_delta_y;
                t
            };
            if t >= max_range {
                return max_range;
            }
            if i < 0 || j < 0 || i as usize >= self.width || j as usize >= self.height {
                return t.max(f64::MIN_POSITIVE);
            }
            if self.get(i as usize, j as usize) {
                return t.max(f64::MIN_POSITIVE);
            }
        }
    }

    /// Writes the plain-text grid format: a `width height resolution
    /// origin_x origin_y` header followed by one run-length-encoded line per
    /// row, bottom row first. A run is `<count>.` (free) or `<count>#`
    /// (occupied).
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "{} {} {} {} {}",
            self.width, self.height, self.resolution, self.origin.x, self.origin.y
        )?;
        for j in 0..self.height {
            let row = &self.cells[j * self.width..(j + 1) * self.width];
            let mut line = String::new();
            let mut k = 0;
            while k < row.len() {
                let v = row[k];
                let run = row[k..].iter().take_while(|c| **c == v).count();
                line.push_str(&run.to_string());
                line.push(if v { '#' } else { '.' });
                k += run;
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let bad = |m: String| Error::InvalidGrid(m);
        let header = lines
            .next()
            .ok_or_else(|| bad("missing header".into()))?
            .map_err(|e| bad(e.to_string()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 5 {
            return Err(bad(format!("header needs 3 or 5 fields, got {:?}", fields)));
        }
        let parse_f = |s: &str| f64::from_str(s).map_err(|e| bad(format!("{s}: {e}")));
        let width = fields[0].parse::<usize>().map_err(|e| bad(e.to_string()))?;
        let height = fields[1].parse::<usize>().map_err(|e| bad(e.to_string()))?;
        let resolution = parse_f(fields[2])?;
        let origin = if fields.len() == 5 {
            Vector2::new(parse_f(fields[3])?, parse_f(fields[4])?)
        } else {
            Vector2::zeros()
        };
        let mut cells = Vec::with_capacity(width * height);
        for j in 0..height {
            let line = lines
                .next()
                .ok_or_else(|| bad(format!("missing row {j}")))?
                .map_err(|e| bad(e.to_string()))?;
            let start = cells.len();
            let mut count = String::new();
            for ch in line.trim().chars() {
                match ch {
                    '0'..='9' => count.push(ch),
                    '.' | '#' => {
                        let n = count.parse::<usize>().map_err(|_| bad(format!("row {j}: bad run")))?;
                        cells.extend(std::iter::repeat(ch == '#').take(n));
                        count.clear();
                    }
                    _ => return Err(bad(format!("row {j}: unexpected {ch:?}"))),
                }
            }
            if !count.is_empty() || cells.len() - start != width {
                return Err(bad(format!("row {j} has {} cells, expected {width}", cells.len() - start)));
            }
        }
        let g = Self {
            width,
            height,
            resolution,
            origin,
            cells,
        };
        if !(g.resolution > 0.0) {
            return Err(bad(format!("resolution {}", g.resolution)));
        }
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_text(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_text(std::io::BufReader::new(f))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RangeScan {
    pub beams: Vec<f64>,
    pub fov: f64,
    pub max_range: f64,
}

impl RangeScan {
    /// Beams divided by the maximum range, in `(0, 1]`.
    pub fn normalized(&self) -> Vec<f64> {
        self.beams.iter().map(|b| b / self.max_range).collect()
    }
}

/// Sensor geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub beams: usize,
    /// Field of view in degrees.
    pub fov_deg: f64,
    pub max_range: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            beams: 64,
            fov_deg: 87.0,
            max_range: 10.0,
        }
    }
}

impl SensorConfig {
    pub fn fov(&self) -> f64 {
        self.fov_deg.to_radians()
    }

    pub fn scan(&self, grid: &OccupancyGrid, pose: &Pose2) -> Result<RangeScan> {
        grid.raycast(pose, self.beams, self.fov(), self.max_range)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Archetype {
    Forest,
    Garage,
    Indoor,
    Campus,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [
        Archetype::Forest,
        Archetype::Garage,
        Archetype::Indoor,
        Archetype::Campus,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Archetype::Forest => "forest",
            Archetype::Garage => "garage",
            Archetype::Indoor => "indoor",
            Archetype::Campus => "campus",
        }
    }

    fn salt(&self) -> u64 {
        match self {
            Archetype::Forest => 0x9e37_79b9_7f4a_7c15,
            Archetype::Garage => 0xbf58_476d_1ce4_e5b9,
            Archetype::Indoor => 0x94d0_49bb_1331_11eb,
            Archetype::Campus => 0x2545_f491_4f6c_dd1d,
        }
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forest" => Ok(Archetype::Forest),
            "garage" => Ok(Archetype::Garage),
            "indoor" => Ok(Archetype::Indoor),
            "campus" => Ok(Archetype::Campus),
            other => Err(Error::Config(format!("unknown archetype {other:?}"))),
        }
    }
}

/// Knobs for world generation and start/goal sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationParams {
    /// Side length of the square world in meters.
    pub world_size: f64,
    pub resolution: f64,
    pub robot_radius: f64,
    /// Trees per 100 square meters in forests (halved on campus).
    pub forest_density: f64,
    pub tree_radius_min: f64,
    pub tree_radius_max: f64,
    /// Free gap enforced between neighbouring trees.
    pub tree_gap: f64,
    /// Bay size of garage partitions.
    pub garage_bay: f64,
    pub door_width: f64,
    pub wall_thickness: f64,
    /// Maze cell pitch for indoor worlds; the corridor width is this minus a wall.
    pub corridor_pitch: f64,
    /// Fraction of extra maze walls removed to create loops.
    pub maze_loop_fraction: f64,
    pub goal_min_dist: f64,
    pub goal_max_dist: f64,
    /// Largest goal bearing in the start body frame, in degrees. The default
    /// keeps the goal inside the sensor field of view.
    pub goal_bearing_max_deg: f64,
    /// Clearance required at start and goal, at least the robot radius.
    pub clearance: f64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            world_size: 32.0,
            resolution: 0.1,
            robot_radius: 0.35,
            forest_density: 2.0,
            tree_radius_min: 0.2,
            tree_radius_max: 0.5,
            tree_gap: 1.6,
            garage_bay: 8.0,
            door_width: 3.0,
            wall_thickness: 0.2,
            corridor_pitch: 4.0,
            maze_loop_fraction: 0.35,
            goal_min_dist: 2.0,
            goal_max_dist: 8.0,
            goal_bearing_max_deg: 43.5,
            clearance: 0.6,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.resolution > 0.0) || !(self.world_size > 4.0 * self.resolution) {
            return bad("world_size/resolution");
        }
        if !(self.robot_radius > 0.0) || self.clearance < self.robot_radius {
            return bad("clearance must be at least the robot radius");
        }
        if self.forest_density < 0.0 || self.tree_radius_min > self.tree_radius_max {
            return bad("forest parameters");
        }
        let corridor = self.corridor_pitch - self.wall_thickness;
        if corridor < 4.0 * self.robot_radius || self.door_width < 4.0 * self.robot_radius {
            return bad("corridors and doors must be at least twice the robot diameter");
        }
        if !(self.goal_min_dist > 0.0 && self.goal_min_dist <= self.goal_max_dist && self.goal_max_dist <= 10.0) {
            return bad("goal distances must satisfy 0 < min <= max <= 10");
        }
        if !(0.0..=180.0).contains(&self.goal_bearing_max_deg) {
            return bad("goal_bearing_max_deg must lie in [0, 180]");
        }
        Ok(())
    }
}

/// One start/goal problem in a world.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub grid: Arc<OccupancyGrid>,
    pub start: Pose2,
    /// Goal position in the world frame.
    pub goal: Vector2<f64>,
    pub archetype: Archetype,
    pub seed: u64,
}

impl Scenario {
    /// Goal expressed in the body frame of `pose`.
    pub fn goal_in_body(&self, pose: &Pose2) -> Vector2<f64> {
        pose.inverse_transform_point(&self.goal)
    }
}

/// Builds the world for an archetype. Deterministic in `(archetype, seed, params)`.
pub fn generate_world(archetype: Archetype, seed: u64, params: &GenerationParams) -> Result<OccupancyGrid> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ archetype.salt());
    let n = (params.world_size / params.resolution).round() as usize;
    let mut grid = OccupancyGrid::bordered(n, n, params.resolution);
    match archetype {
        Archetype::Forest => add_trees(&mut grid, &mut rng, params, params.forest_density),
        Archetype::Garage => add_garage(&mut grid, &mut rng, params),
        Archetype::Indoor => add_maze(&mut grid, &mut rng, params),
        Archetype::Campus => add_campus(&mut grid, &mut rng, params),
    }
    Ok(grid)
}

/// Generates a world and samples a start/goal pair in it.
pub fn generate(archetype: Archetype, seed: u64, params: &GenerationParams) -> Result<Scenario> {
    let grid = Arc::new(generate_world(archetype, seed, params)?);
    sample_scenario(grid, archetype, seed, params)
}

/// Rejection-samples a start pose and goal in free space with the required
/// clearance, at a goal distance within the configured band, and with the
/// goal reachable from the start through space the robot fits in.
pub fn sample_scenario(
    grid: Arc<OccupancyGrid>,
    archetype: Archetype,
    seed: u64,
    params: &GenerationParams,
) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ archetype.salt() ^ 0x5a5a);
    let lo = 1.0;
    let hi = grid.world_width().min(grid.world_height()) - 1.0;
    for _ in 0..1000 {
        let s = Vector2::new(rng.random_range(lo..hi), rng.random_range(lo..hi)) + grid.origin;
        if grid.in_collision(&s, params.clearance) {
            continue;
        }
        let dist = rng.random_range(params.goal_min_dist..=params.goal_max_dist);
        let bearing = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let g = s + dist * Vector2::new(bearing.cos(), bearing.sin());
        if grid.in_collision(&g, params.clearance) {
            continue;
        }
        if !connected(&grid, &s, &g, params.robot_radius) {
            continue;
        }
        let spread = params.goal_bearing_max_deg.to_radians();
        let heading = wrap_angle(bearing - rng.random_range(-spread..=spread));
        return Ok(Scenario {
            grid,
            start: Pose2::new(s.x, s.y, heading),
            goal: g,
            archetype,
            seed,
        });
    }
    Err(Error::GenerationFailed {
        archetype: archetype.name().into(),
        seed,
        reason: "no valid start/goal pair in 1000 samples".into(),
    })
}

/// Breadth-first search over cells whose centres keep `radius` clearance.
fn connected(grid: &OccupancyGrid, a: &Vector2<f64>, b: &Vector2<f64>, radius: f64) -> bool {
    let (Some(sa), Some(sb)) = (grid.cell_of(a), grid.cell_of(b)) else {
        return false;
    };
    // Search a window around the pair to bound the work.
    let margin = (3.0 / grid.resolution) as usize;
    let i_lo = sa.0.min(sb.0).saturating_sub(margin);
    let j_lo = sa.1.min(sb.1).saturating_sub(margin);
    let i_hi = (sa.0.max(sb.0) + margin).min(grid.width - 1);
    let j_hi = (sa.1.max(sb.1) + margin).min(grid.height - 1);
    let w = i_hi - i_lo + 1;
    let h = j_hi - j_lo + 1;
    let mut seen = vec![false; w * h];
    let free = |i: usize, j: usize| !grid.in_collision(&grid.cell_center(i, j), radius);
    let mut queue = VecDeque::new();
    seen[(sa.1 - j_lo) * w + (sa.0 - i_lo)] = true;
    queue.push_back(sa);
    while let Some((i, j)) = queue.pop_front() {
        if (i, j) == sb {
            return true;
        }
        let nbrs = [
            (i.wrapping_sub(1), j),
            (i + 1, j),
            (i, j.wrapping_sub(1)),
            (i, j + 1),
        ];
        for (ni, nj) in nbrs {
            if ni < i_lo || ni > i_hi || nj < j_lo || nj > j_hi {
                continue;
            }
            let k = (nj - j_lo) * w + (ni - i_lo);
            if seen[k] {
                continue;
            }
            seen[k] = true;
            if (ni, nj) == sb || free(ni, nj) {
                queue.push_back((ni, nj));
            }
        }
    }
    false
}

fn add_trees(grid: &mut OccupancyGrid, rng: &mut ChaCha8Rng, p: &GenerationParams, density: f64) {
    let area = grid.world_width() * grid.world_height();
    let target = (density * area / 100.0).round() as usize;
    let mut trees: Vec<(Vector2<f64>, f64)> = Vec::with_capacity(target);
    let mut attempts = 0;
    while trees.len() < target && attempts < 30 * target.max(1) {
        attempts += 1;
        let r = rng.random_range(p.tree_radius_min..=p.tree_radius_max);
        let c = grid.origin
            + Vector2::new(
                rng.random_range(r..grid.world_width() - r),
                rng.random_range(r..grid.world_height() - r),
            );
        // Poisson-disk rejection on the free gap between trunks.
        if trees.iter().all(|(o, ro)| (o - c).norm() >= r + ro + p.tree_gap) {
            trees.push((c, r));
        }
    }
    for (c, r) in trees {
        grid.fill_disc(&c, r);
    }
}

fn add_garage(grid: &mut OccupancyGrid, rng: &mut ChaCha8Rng, p: &GenerationParams) {
    let size = grid.world_width();
    let bays = (size / p.garage_bay).floor().max(1.0) as usize;
    let pitch = size / bays as f64;
    let t = p.wall_thickness;
    // Interior partition walls on the bay lattice, each segment between
    // crossings either carries a door gap or is removed altogether.
    for k in 1..bays {
        let line = k as f64 * pitch;
        for seg in 0..bays {
            let (a, b) = (seg as f64 * pitch, (seg + 1) as f64 * pitch);
            for vertical in [true, false] {
                if rng.random_bool(0.2) {
                    continue;
                }
                let door_c = rng.random_range(a + p.door_width / 2.0 + 0.5..b - p.door_width / 2.0 - 0.5);
                let (d0, d1) = (door_c - p.door_width / 2.0, door_c + p.door_width / 2.0);
                for (s0, s1) in [(a, d0), (d1, b)] {
                    if vertical {
                        grid.fill_rect(line - t / 2.0, s0, line + t / 2.0, s1);
                    } else {
                        grid.fill_rect(s0, line - t / 2.0, s1, line + t / 2.0);
                    }
                }
            }
        }
    }
    // Parked-car blocks and pillars inside bays.
    for bi in 0..bays {
        for bj in 0..bays {
            let x0 = bi as f64 * pitch;
            let y0 = bj as f64 * pitch;
            let n = rng.random_range(0..=2);
            for _ in 0..n {
                let w = rng.random_range(0.6..1.2);
                let h = rng.random_range(1.2..2.2);
                let (w, h) = if rng.random_bool(0.5) { (w, h) } else { (h, w) };
                let cx = rng.random_range(x0 + 1.5..x0 + pitch - 1.5);
                let cy = rng.random_range(y0 + 1.5..y0 + pitch - 1.5);
                grid.fill_rect(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0);
            }
        }
    }
}

fn add_maze(grid: &mut OccupancyGrid, rng: &mut ChaCha8Rng, p: &GenerationParams) {
    let size = grid.world_width();
    let n = (size / p.corridor_pitch).floor().max(1.0) as usize;
    let pitch = size / n as f64;
    let t = p.wall_thickness;
    // Walls: east[i][j] between (i,j) and (i+1,j); north[i][j] between (i,j) and (i,j+1).
    let mut east = vec![vec![true; n]; n];
    let mut north = vec![vec![true; n]; n];
    let mut visited = vec![vec![false; n]; n];
    let mut stack = vec![(rng.random_range(0..n), rng.random_range(0..n))];
    visited[stack[0].0][stack[0].1] = true;
    while let Some(&(i, j)) = stack.last() {
        let mut options = Vec::with_capacity(4);
        if i > 0 && !visited[i - 1][j] {
            options.push((i - 1, j));
        }
        if i + 1 < n && !visited[i + 1][j] {
            options.push((i + 1, j));
        }
        if j > 0 && !visited[i][j - 1] {
            options.push((i, j - 1));
        }
        if j + 1 < n && !visited[i][j + 1] {
            options.push((i, j + 1));
        }
        if options.is_empty() {
            stack.pop();
            continue;
        }
        let (ni, nj) = options[rng.random_range(0..options.len())];
        if ni != i {
            east[i.min(ni)][j] = false;
        } else {
            north[i][j.min(nj)] = false;
        }
        visited[ni][nj] = true;
        stack.push((ni, nj));
    }
    for i in 0..n {
        for j in 0..n {
            if east[i][j] && rng.random_bool(p.maze_loop_fraction) {
                east[i][j] = false;
            }
            if north[i][j] && rng.random_bool(p.maze_loop_fraction) {
                north[i][j] = false;
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            let x0 = i as f64 * pitch;
            let y0 = j as f64 * pitch;
            if i + 1 < n && east[i][j] {
                let x = x0 + pitch;
                grid.fill_rect(x - t / 2.0, y0 - t / 2.0, x + t / 2.0, y0 + pitch + t / 2.0);
            }
            if j + 1 < n && north[i][j] {
                let y = y0 + pitch;
                grid.fill_rect(x0 - t / 2.0, y - t / 2.0, x0 + pitch + t / 2.0, y + t / 2.0);
            }
        }
    }
}

fn add_campus(grid: &mut OccupancyGrid, rng: &mut ChaCha8Rng, p: &GenerationParams) {
    let size = grid.world_width();
    let mut boxes: Vec<(f64, f64, f64, f64)> = Vec::new();
    let target = rng.random_range(3..=6);
    let mut attempts = 0;
    while boxes.len() < target && attempts < 200 {
        attempts += 1;
        let w = rng.random_range(3.0..7.0);
        let h = rng.random_range(3.0..7.0);
        let x0 = rng.random_range(1.0..size - w - 1.0);
        let y0 = rng.random_range(1.0..size - h - 1.0);
        let gap = 3.0;
        let clear = boxes.iter().all(|&(a0, b0, a1, b1)| {
            x0 > a1 + gap || x0 + w + gap < a0 || y0 > b1 + gap || y0 + h + gap < b0
        });
        if clear {
            boxes.push((x0, y0, x0 + w, y0 + h));
        }
    }
    for &(x0, y0, x1, y1) in &boxes {
        grid.fill_rect(x0, y0, x1, y1);
    }
    add_trees(grid, rng, p, p.forest_density / 2.0);
}

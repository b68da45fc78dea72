//! Grid mazes with free corridors, a waypoint dataset of 2-D position
//! segments, and a wall-penetration check.
//!
//! Cell `(r, c)` covers the half-open box `[c, c+1) x [r, r+1)` in world
//! units of `cell_size`. Models see normalized coordinates: the maze is
//! centred at the origin and scaled so the longer side spans `[-1, 1]`.

use crate::composition::SegmentLayout;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, VecDeque};

/// Interpolation samples per cell width in [`check_valid_maze`].
pub const SAMPLES_PER_CELL: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CorridorMaze {
    width: usize,
    height: usize,
    walls: Vec<bool>,
    start: (usize, usize),
    goal: (usize, usize),
    cell_size: f64,
}

/// Ring maze: two parallel corridors joined at both ends, with the start on
/// the left end and the goal on the right. Either corridor reaches the goal.
pub const TWO_CORRIDOR: &str = "\
#######
#.....#
#S###G#
#.....#
#######
";

impl CorridorMaze {
    /// Parses `#` (wall), `.` (free), `S` (start) and `G` (goal) rows.
    pub fn parse(text: &str, cell_size: f64) -> Result<Self> {
        let bad = |msg: String| Error::Format { what: "maze", msg };
        let rows: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        if width == 0 || height == 0 {
            return Err(bad("empty grid".into()));
        }
        if !(cell_size > 0.0) {
            return Err(bad(format!("cell_size must be positive, got {cell_size}")));
        }
        let mut walls = Vec::with_capacity(width * height);
        let (mut start, mut goal) = (None, None);
        for (r, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(bad(format!("row {r} has a different width")));
            }
            for (c, ch) in row.chars().enumerate() {
                walls.push(match ch {
                    '#' => true,
                    '.' => false,
                    'S' if start.is_none() => {
                        start = Some((r, c));
                        false
                    }
                    'G' if goal.is_none() => {
                        goal = Some((r, c));
                        false
                    }
                    other => return Err(bad(format!("unexpected '{other}' at row {r}, column {c}"))),
                });
            }
        }
        let start = start.ok_or_else(|| bad("no start cell".into()))?;
        let goal = goal.ok_or_else(|| bad("no goal cell".into()))?;
        let maze = CorridorMaze {
            width,
            height,
            walls,
            start,
            goal,
            cell_size,
        };
        if !maze.reachable(start).contains(&goal) {
            return Err(bad("goal is not reachable from start".into()));
        }
        Ok(maze)
    }

    pub fn two_corridor() -> Self {
        Self::parse(TWO_CORRIDOR, 1.0).expect("built-in maze is valid")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn start_cell(&self) -> (usize, usize) {
        self.start
    }

    pub fn goal_cell(&self) -> (usize, usize) {
        self.goal
    }

    pub fn is_free(&self, r: usize, c: usize) -> bool {
        r < self.height && c < self.width && !self.walls[r * self.width + c]
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .filter(|&(r, c)| self.is_free(r, c))
            .collect()
    }

    fn neighbours(&self, (r, c): (usize, usize)) -> Vec<(usize, usize)> {
        let mut v = Vec::with_capacity(4);
        if r > 0 && self.is_free(r - 1, c) {
            v.push((r - 1, c));
        }
        if self.is_free(r + 1, c) {
            v.push((r + 1, c));
        }
        if c > 0 && self.is_free(r, c - 1) {
            v.push((r, c - 1));
        }
        if self.is_free(r, c + 1) {
            v.push((r, c + 1));
        }
        v
    }

    /// Flood fill over 4-connected free cells.
    pub fn reachable(&self, from: (usize, usize)) -> BTreeSet<(usize, usize)> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([from]);
        seen.insert(from);
        while let Some(cell) = queue.pop_front() {
            for n in self.neighbours(cell) {
                if seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        seen
    }

    /// Cell containing a world point, with half-open cell boxes.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x.is_finite() && y.is_finite()) {
            return None;
        }
        let (cx, cy) = ((x / self.cell_size).floor(), (y / self.cell_size).floor());
        if cx < 0.0 || cy < 0.0 || cx >= self.width as f64 || cy >= self.height as f64 {
            return None;
        }
        Some((cy as usize, cx as usize))
    }

    pub fn point_is_free(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some_and(|(r, c)| self.is_free(r, c))
    }

    pub fn cell_center(&self, (r, c): (usize, usize)) -> [f64; 2] {
        [(c as f64 + 0.5) * self.cell_size, (r as f64 + 0.5) * self.cell_size]
    }

    fn frame(&self) -> ([f64; 2], f64) {
        let w = self.width as f64 * self.cell_size;
        let h = self.height as f64 * self.cell_size;
        ([0.5 * w, 0.5 * h], 0.5 * w.max(h))
    }

    pub fn normalize(&self, p: [f64; 2]) -> [f64; 2] {
        let (c, s) = self.frame();
        [(p[0] - c[0]) / s, (p[1] - c[1]) / s]
    }

    pub fn denormalize(&self, p: [f64; 2]) -> [f64; 2] {
        let (c, s) = self.frame();
        [p[0] * s + c[0], p[1] * s + c[1]]
    }

    /// Normalized start and goal positions (cell centres).
    pub fn endpoints(&self) -> ([f64; 2], [f64; 2]) {
        (
            self.normalize(self.cell_center(self.start)),
            self.normalize(self.cell_center(self.goal)),
        )
    }

    /// Cells visited by the points of a normalized plan (flat `[N*2]`).
    pub fn cells_visited(&self, plan: &[f64]) -> BTreeSet<(usize, usize)> {
        plan.chunks_exact(2)
            .filter_map(|p| {
                let w = self.denormalize([p[0], p[1]]);
                self.cell_of(w[0], w[1])
            })
            .collect()
    }

    /// Fraction of free cells that contain at least one point of the dataset.
    pub fn coverage(&self, data: &Tensor) -> f64 {
        let hit = self.cells_visited(data.data());
        let free = self.free_cells();
        free.iter().filter(|c| hit.contains(c)).count() as f64 / free.len() as f64
    }
}

/// A normalized plan (flat `[N*2]`) is valid iff every straight piece between
/// consecutive points, sampled at [`SAMPLES_PER_CELL`] per cell width, lies
/// in free cells.
pub fn check_valid_maze(plan: &[f64], maze: &CorridorMaze) -> bool {
    if plan.len() < 2 || plan.len() % 2 != 0 {
        return false;
    }
    let pts: Vec<[f64; 2]> = plan.chunks_exact(2).map(|p| maze.denormalize([p[0], p[1]])).collect();
    if !maze.point_is_free(pts[0][0], pts[0][1]) {
        return false;
    }
    pts.windows(2).all(|w| segment_is_free(w[0], w[1], maze))
}

fn segment_is_free(p: [f64; 2], q: [f64; 2], maze: &CorridorMaze) -> bool {
    let len = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
    if !len.is_finite() {
        return false;
    }
    let n = ((len / maze.cell_size) * SAMPLES_PER_CELL).ceil().max(1.0) as usize;
    (1..=n).all(|k| {
        let u = k as f64 / n as f64;
        maze.point_is_free(p[0] + u * (q[0] - p[0]), p[1] + u * (q[1] - p[1]))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MazeDatasetSpec {
    pub segment_length: usize,
    pub overlap: usize,
    /// Segments cut from each generated path.
    pub trajectory_segments: usize,
    /// Per-path spacing between consecutive points, in cell widths,
    /// drawn uniformly from `[step_min, step_max]`.
    pub step_min: f64,
    pub step_max: f64,
    /// Uniform per-coordinate jitter half-width, in cell widths.
    pub jitter: f64,
}

impl Default for MazeDatasetSpec {
    fn default() -> Self {
        MazeDatasetSpec {
            segment_length: 4,
            overlap: 1,
            trajectory_segments: 3,
            step_min: 0.28,
            step_max: 0.38,
            jitter: 0.08,
        }
    }
}

impl MazeDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        SegmentLayout::new(self.trajectory_segments, self.segment_length, self.overlap, 2)?;
        if !(self.step_min > 0.0 && self.step_min <= self.step_max && self.step_max + self.jitter < 0.5) {
            return Err(Error::Config(
                "need 0 < step_min <= step_max and step_max + jitter < 0.5 cell widths".into(),
            ));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::Config("jitter must be >= 0".into()));
        }
        Ok(())
    }
}

/// Random walk over free cells (no immediate reversals unless at a dead
/// end), as a list of cells long enough to cover `length` cell widths.
fn random_cell_walk<R: Rng + ?Sized>(maze: &CorridorMaze, length: f64, rng: &mut R) -> Vec<(usize, usize)> {
    let free = maze.free_cells();
    let mut walk = vec![free[rng.random_range(0..free.len())]];
    while (walk.len() as f64) < length + 2.0 {
        let cur = *walk.last().expect("non-empty");
        let mut opts = maze.neighbours(cur);
        if walk.len() >= 2 && opts.len() > 1 {
            let prev = walk[walk.len() - 2];
            opts.retain(|&c| c != prev);
        }
        if opts.is_empty() {
            break;
        }
        walk.push(opts[rng.random_range(0..opts.len())]);
    }
    walk
}

/// Points spaced `step` apart along the polyline through cell centres,
/// starting at a random offset within the first cell leg.
fn sample_along<R: Rng + ?Sized>(maze: &CorridorMaze, walk: &[(usize, usize)], n: usize, step: f64, rng: &mut R) -> Option<Vec<[f64; 2]>> {
    let centres: Vec<[f64; 2]> = walk.iter().map(|&c| maze.cell_center(c)).collect();
    if centres.len() < 2 {
        return None;
    }
    let cs = maze.cell_size;
    let total = (centres.len() - 1) as f64 * cs;
    let mut s = rng.random_range(0.0..cs);
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        if s > total {
            return None;
        }
        let k = ((s / cs).floor() as usize).min(centres.len() - 2);
        let u = s / cs - k as f64;
        let (a, b) = (centres[k], centres[k + 1]);
        pts.push([a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]);
        s += step * cs;
    }
    Some(pts)
}

/// `count` normalized segments of `L` points each, `[count, L*2]`.
///
/// Paths follow random walks through cell centres with a per-path step size
/// and small jitter, and are cut into overlapping segments. Paths that fail
/// [`check_valid_maze`] are redrawn, so every segment stays in free space.
pub fn gen_corridor_maze_dataset<R: Rng + ?Sized>(
    maze: &CorridorMaze,
    spec: &MazeDatasetSpec,
    count: usize,
    rng: &mut R,
) -> Result<Tensor> {
    spec.validate()?;
    let layout = SegmentLayout::new(spec.trajectory_segments, spec.segment_length, spec.overlap, 2)?;
    let n = layout.horizon();
    let mut out = Vec::with_capacity(count * layout.segment_width());
    let mut made = 0;
    let mut failures = 0usize;
    while made < count {
        let step = rng.random_range(spec.step_min..=spec.step_max);
        let walk = random_cell_walk(maze, n as f64 * step, rng);
        let Some(pts) = sample_along(maze, &walk, n, step, rng) else {
            failures += 1;
            if failures > 10_000 {
                return Err(Error::Config("maze too small for the requested path length".into()));
            }
            continue;
        };
        let mut flat = Vec::with_capacity(2 * n);
        for p in pts {
            let jx = rng.random_range(-1.0..=1.0) * spec.jitter * maze.cell_size;
            let jy = rng.random_range(-1.0..=1.0) * spec.jitter * maze.cell_size;
            flat.extend(maze.normalize([p[0] + jx, p[1] + jy]));
        }
        if !check_valid_maze(&flat, maze) {
            continue;
        }
        for j in 0..layout.segments {
            if made == count {
                break;
            }
            let r = layout.segment_range(j);
            out.extend_from_slice(&flat[2 * r.start..2 * r.end]);
            made += 1;
        }
    }
    Tensor::new(vec![count, layout.segment_width()], out)
}

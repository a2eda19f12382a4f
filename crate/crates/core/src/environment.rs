//! Obstacle fields, worlds, neighbor queries and the ASCII maze format.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{AgentState, DynamicsModel};
use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_SAFETY_RADIUS: f64 = 0.15;
pub const DEFAULT_SENSING_RADIUS: f64 = 1.0;
pub const DEFAULT_EXTENT: f64 = 10.0;

/// Shipped 20×20 maze (0.5 m cells over the default extent).
pub const DEFAULT_MAZE: &str = include_str!("../data/maze.txt");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Obstacle {
    /// Disk in 2-D, sphere in 3-D.
    Disk { center: Vec<f64>, radius: f64 },
    /// Axis-aligned block, used for maze walls.
    Block { min: Vec<f64>, max: Vec<f64> },
}

impl Obstacle {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Obstacle::Disk { center, radius } => {
                if center.len() != dim {
                    return Err(Error::dim("obstacle center", dim, center.len()));
                }
                if !(*radius > 0.0) || !linalg::all_finite(center) {
                    return Err(Error::Config(format!("disk obstacle needs radius > 0, got {radius}")));
                }
            }
            Obstacle::Block { min, max } => {
                if min.len() != dim || max.len() != dim {
                    return Err(Error::dim("obstacle block", dim, min.len().min(max.len())));
                }
                if min.iter().zip(max).any(|(a, b)| !(a < b)) {
                    return Err(Error::Config("block obstacle needs min < max on every axis".into()));
                }
            }
        }
        Ok(())
    }

    /// Nearest point of the obstacle to `p` (p itself when inside).
    pub fn nearest_point(&self, p: &[f64]) -> Vec<f64> {
        match self {
            Obstacle::Disk { center, radius } => {
                let diff = linalg::sub(p, center);
                let len = linalg::norm(&diff);
                if len <= *radius {
                    return p.to_vec();
                }
                center.iter().zip(&diff).map(|(c, d)| c + d * radius / len).collect()
            }
            Obstacle::Block { min, max } => p
                .iter()
                .zip(min.iter().zip(max))
                .map(|(x, (lo, hi))| x.clamp(*lo, *hi))
                .collect(),
        }
    }

    /// Distance from `p` to the obstacle surface, 0 inside.
    pub fn distance(&self, p: &[f64]) -> f64 {
        match self {
            Obstacle::Disk { center, radius } => (linalg::distance(p, center) - radius).max(0.0),
            Obstacle::Block { .. } => linalg::distance(p, &self.nearest_point(p)),
        }
    }

    /// Axis-aligned bounding box.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Obstacle::Disk { center, radius } => (
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
            Obstacle::Block { min, max } => (min.clone(), max.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentNeighbor {
    pub id: usize,
    pub distance: f64,
    /// `xʲ − xⁱ`, full state.
    pub relative: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObstacleNeighbor {
    pub obstacle: usize,
    pub point: Vec<f64>,
    pub distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NeighborSet {
    pub agents: Vec<AgentNeighbor>,
    pub obstacles: Vec<ObstacleNeighbor>,
}

impl NeighborSet {
    pub fn is_empty(&self) -> bool {
        self.agents.is_empty() && self.obstacles.is_empty()
    }

    pub fn len(&self) -> usize {
        self.agents.len() + self.obstacles.len()
    }
}

#[derive(Clone, Debug)]
pub struct World {
    pub extent: Vec<f64>,
    pub obstacles: Vec<Obstacle>,
    pub model: DynamicsModel,
    /// Safety radius `r`; agents keep `2r` from each other and from obstacles.
    pub r: f64,
    /// Sensing radius `R`.
    pub sensing_radius: f64,
    states: Vec<AgentState>,
    goals: Vec<Vec<f64>>,
    epoch: u64,
}

impl World {
    pub fn new(model: DynamicsModel, r: f64, sensing_radius: f64) -> Result<Self> {
        model.validate()?;
        let d = model.pos_dim();
        let w = Self {
            extent: vec![DEFAULT_EXTENT; d],
            obstacles: Vec::new(),
            model,
            r,
            sensing_radius,
            states: Vec::new(),
            goals: Vec::new(),
            epoch: 0,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.sensing_radius > 2.0 * self.r) {
            return Err(Error::Config(format!(
                "need R > 2r > 0, got r = {}, R = {}",
                self.r, self.sensing_radius
            )));
        }
        let d = self.model.pos_dim();
        if self.extent.len() != d {
            return Err(Error::dim("world extent", d, self.extent.len()));
        }
        for o in &self.obstacles {
            o.validate(d)?;
        }
        for (i, g) in self.goals.iter().enumerate() {
            for h in &self.goals[..i] {
                if linalg::distance(g, h) < 2.0 * self.r {
                    return Err(Error::Config("goals must be pairwise at least 2r apart".into()));
                }
            }
        }
        Ok(())
    }

    pub fn add_agent(&mut self, state: AgentState, goal: Vec<f64>) -> Result<()> {
        let n = self.model.state_dim();
        if state.len() != n {
            return Err(Error::dim("agent state", n, state.len()));
        }
        if goal.len() != self.model.pos_dim() {
            return Err(Error::dim("agent goal", self.model.pos_dim(), goal.len()));
        }
        if !linalg::all_finite(&state) || !linalg::all_finite(&goal) {
            return Err(Error::Config("agent state and goal must be finite".into()));
        }
        self.states.push(state);
        self.goals.push(goal);
        self.epoch += 1;
        Ok(())
    }

    pub fn num_agents(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[AgentState] {
        &self.states
    }

    pub fn goals(&self) -> &[Vec<f64>] {
        &self.goals
    }

    pub fn position(&self, i: usize) -> &[f64] {
        self.model.position(&self.states[i])
    }

    /// Replaces all agent states; invalidates previously built indices.
    pub fn set_states(&mut self, states: Vec<AgentState>) -> Result<()> {
        if states.len() != self.states.len() {
            return Err(Error::dim("world states", self.states.len(), states.len()));
        }
        self.states = states;
        self.epoch += 1;
        Ok(())
    }

    pub fn set_state(&mut self, i: usize, state: AgentState) {
        self.states[i] = state;
        self.epoch += 1;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Distance from `p` to the nearest obstacle surface (`∞` without obstacles).
    pub fn obstacle_clearance(&self, p: &[f64]) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn build_index(&self) -> SpatialIndex {
        let d = self.model.pos_dim();
        let mut flat = Vec::with_capacity(self.states.len() * d);
        for s in &self.states {
            flat.extend_from_slice(self.model.position(s));
        }
        let mut index = SpatialIndex::from_points(flat, d, self.sensing_radius, &self.obstacles);
        index.epoch = self.epoch;
        index
    }

    /// Samples `n` start/goal pairs in free space.
    ///
    /// Starts are pairwise `spacing` apart, as are goals, and every point
    /// keeps `clearance` from obstacles and `margin` from the extent edge.
    pub fn populate<R: Rng>(
        &mut self,
        n: usize,
        spacing: f64,
        clearance: f64,
        margin: f64,
        rng: &mut R,
    ) -> Result<()> {
        let starts = self.sample_free_points(n, spacing, clearance, margin, rng)?;
        let goals = self.sample_free_points(n, spacing.max(2.0 * self.r), clearance, margin, rng)?;
        for (s, g) in starts.into_iter().zip(goals) {
            let state = self.model.rest_state(&s);
            self.add_agent(state, g)?;
        }
        Ok(())
    }

    pub fn sample_free_points<R: Rng>(
        &self,
        n: usize,
        spacing: f64,
        clearance: f64,
        margin: f64,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        let d = self.model.pos_dim();
        let mut points: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut attempts = 0usize;
        let cap = 20_000 * n.max(1);
        while points.len() < n {
            attempts += 1;
            if attempts > cap {
                return Err(Error::Config(format!(
                    "could not place {n} points with spacing {spacing} m (placed {})",
                    points.len()
                )));
            }
            let p: Vec<f64> = (0..d)
                .map(|k| rng.gen_range(margin..(self.extent[k] - margin).max(margin + 1e-9)))
                .collect();
            if self.obstacle_clearance(&p) < clearance {
                continue;
            }
            if points.iter().any(|q| linalg::distance(q, &p) < spacing) {
                continue;
            }
            points.push(p);
        }
        Ok(points)
    }
}

/// Exact minimum inter-agent distance by brute force.
pub fn min_pairwise_distance(world: &World) -> Result<f64> {
    let n = world.num_agents();
    if n < 2 {
        return Err(Error::Config(format!(
            "min_pairwise_distance needs at least 2 agents, world has {n}"
        )));
    }
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            best = best.min(linalg::distance(world.position(i), world.position(j)));
        }
    }
    Ok(best)
}

/// Uniform hash grid over agent positions with cell size `R`.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    dim: usize,
    cell: f64,
    radius: f64,
    points: Vec<f64>,
    agent_cells: HashMap<[i64; 3], Vec<usize>>,
    obstacle_cells: HashMap<[i64; 3], Vec<usize>>,
    epoch: u64,
}

impl SpatialIndex {
    /// Index over a flat `[p₀, p₁, …]` position buffer of dimension `dim`.
    pub fn from_points(points: Vec<f64>, dim: usize, radius: f64, obstacles: &[Obstacle]) -> Self {
        let cell = radius;
        let mut agent_cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.chunks_exact(dim).enumerate() {
            agent_cells.entry(cell_key(p, cell)).or_default().push(i);
        }
        let mut obstacle_cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (k, o) in obstacles.iter().enumerate() {
            let (lo, hi) = o.bounds();
            let a = cell_key(&lo, cell);
            let b = cell_key(&hi, cell);
            for x in a[0]..=b[0] {
                for y in a[1]..=b[1] {
                    for z in a[2]..=b[2] {
                        obstacle_cells.entry([x, y, z]).or_default().push(k);
                    }
                }
            }
        }
        Self {
            dim,
            cell,
            radius,
            points,
            agent_cells,
            obstacle_cells,
            epoch: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn ring(&self, p: &[f64]) -> impl Iterator<Item = [i64; 3]> {
        let c = cell_key(p, self.cell);
        let zr = if self.dim == 3 { -1..=1 } else { 0..=0 };
        (-1..=1i64).flat_map(move |dx| {
            let zr = zr.clone();
            (-1..=1i64).flat_map(move |dy| zr.clone().map(move |dz| [c[0] + dx, c[1] + dy, c[2] + dz]))
        })
    }

    /// Indexed points within `R` of `p` (excluding `skip`), ascending by id.
    pub fn query_agents(&self, p: &[f64], skip: Option<usize>) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for key in self.ring(p) {
            if let Some(ids) = self.agent_cells.get(&key) {
                for &j in ids {
                    if Some(j) == skip {
                        continue;
                    }
                    let dist = linalg::distance(p, self.point(j));
                    if dist <= self.radius {
                        out.push((j, dist));
                    }
                }
            }
        }
        out.sort_by_key(|&(j, _)| j);
        out
    }

    /// Obstacles whose surface lies within `R` of `p`, ascending by id.
    pub fn query_obstacles(&self, p: &[f64], obstacles: &[Obstacle]) -> Vec<ObstacleNeighbor> {
        let mut ids: Vec<usize> = Vec::new();
        for key in self.ring(p) {
            if let Some(list) = self.obstacle_cells.get(&key) {
                ids.extend_from_slice(list);
            }
        }
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter()
            .filter_map(|k| {
                let point = obstacles[k].nearest_point(p);
                let distance = linalg::distance(p, &point);
                (distance <= self.radius).then_some(ObstacleNeighbor {
                    obstacle: k,
                    point,
                    distance,
                })
            })
            .collect()
    }

    /// `𝒩ₐ` and `𝒩ₒ` of agent `id`.
    pub fn neighbors(&self, id: usize, world: &World) -> Result<NeighborSet> {
        if world.epoch() != self.epoch || world.num_agents() != self.len() {
            return Err(Error::StaleIndex);
        }
        let states = world.states();
        let p = world.position(id);
        let agents = self
            .query_agents(p, Some(id))
            .into_iter()
            .map(|(j, distance)| AgentNeighbor {
                id: j,
                distance,
                relative: linalg::sub(&states[j], &states[id]),
            })
            .collect();
        Ok(NeighborSet {
            agents,
            obstacles: self.query_obstacles(p, &world.obstacles),
        })
    }
}

fn cell_key(p: &[f64], cell: f64) -> [i64; 3] {
    let mut k = [0i64; 3];
    for (slot, x) in k.iter_mut().zip(p) {
        *slot = (x / cell).floor() as i64;
    }
    k
}

/// Rectangular wall grid. Line 0 of the text is the row touching `y = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Maze {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `true` for wall cells.
    pub walls: Vec<bool>,
    /// `(digit, start cell, goal cell)` as `(row, col)`, ascending by digit.
    pub pairs: Vec<(u8, (usize, usize), (usize, usize))>,
    pub extent: [f64; 2],
}

impl Maze {
    pub fn parse(text: &str) -> Result<Maze> {
        let lines: Vec<&str> = text
            .lines()
            .map(|l| l.trim_end_matches('\r'))
            .collect::<Vec<_>>();
        let lines: Vec<&str> = {
            let mut end = lines.len();
            while end > 0 && lines[end - 1].is_empty() {
                end -= 1;
            }
            lines[..end].to_vec()
        };
        if lines.is_empty() {
            return Err(Error::Parse {
                line: 1,
                column: 1,
                message: "empty maze".into(),
            });
        }
        let cols = lines[0].chars().count();
        let rows = lines.len();
        let mut walls = vec![false; rows * cols];
        let mut seen: [Vec<(usize, usize)>; 10] = Default::default();
        for (r, line) in lines.iter().enumerate() {
            let width = line.chars().count();
            if width != cols {
                return Err(Error::Parse {
                    line: r + 1,
                    column: width.min(cols) + 1,
                    message: format!("row has {width} cells, expected {cols}"),
                });
            }
            for (c, ch) in line.chars().enumerate() {
                match ch {
                    '#' => walls[r * cols + c] = true,
                    '.' => {}
                    '0'..='9' => {
                        let slot = &mut seen[(ch as u8 - b'0') as usize];
                        if slot.len() == 2 {
                            return Err(Error::Parse {
                                line: r + 1,
                                column: c + 1,
                                message: format!("digit '{ch}' appears more than twice"),
                            });
                        }
                        slot.push((r, c));
                    }
                    other => {
                        return Err(Error::Parse {
                            line: r + 1,
                            column: c + 1,
                            message: format!("unexpected character {other:?}"),
                        })
                    }
                }
            }
        }
        let mut pairs = Vec::new();
        for (digit, cells) in seen.iter().enumerate() {
            match cells.len() {
                0 => {}
                1 => {
                    return Err(Error::Parse {
                        line: cells[0].0 + 1,
                        column: cells[0].1 + 1,
                        message: format!("digit '{digit}' has a start but no goal"),
                    })
                }
                _ => pairs.push((digit as u8, cells[0], cells[1])),
            }
        }
        Ok(Maze {
            rows,
            cols,
            walls,
            pairs,
            extent: [DEFAULT_EXTENT, DEFAULT_EXTENT],
        })
    }

    pub fn cell_size(&self) -> [f64; 2] {
        [self.extent[0] / self.cols as f64, self.extent[1] / self.rows as f64]
    }

    pub fn is_wall(&self, row: usize, col: usize) -> bool {
        self.walls[row * self.cols + col]
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Vec<f64> {
        let [w, h] = self.cell_size();
        vec![(col as f64 + 0.5) * w, (row as f64 + 0.5) * h]
    }

    /// Wall cells merged into maximal horizontal runs.
    pub fn wall_obstacles(&self) -> Vec<Obstacle> {
        let [w, h] = self.cell_size();
        let mut out = Vec::new();
        for r in 0..self.rows {
            let mut c = 0;
            while c < self.cols {
                if !self.is_wall(r, c) {
                    c += 1;
                    continue;
                }
                let start = c;
                while c < self.cols && self.is_wall(r, c) {
                    c += 1;
                }
                out.push(Obstacle::Block {
                    min: vec![start as f64 * w, r as f64 * h],
                    max: vec![c as f64 * w, (r + 1) as f64 * h],
                });
            }
        }
        out
    }

    /// Rasterizes axis-aligned blocks back onto a grid of the given shape.
    pub fn from_walls(rows: usize, cols: usize, extent: [f64; 2], walls: &[Obstacle]) -> Result<Maze> {
        let w = extent[0] / cols as f64;
        let h = extent[1] / rows as f64;
        let mut grid = vec![false; rows * cols];
        for o in walls {
            let Obstacle::Block { min, max } = o else {
                return Err(Error::Config("only block obstacles can be rasterized".into()));
            };
            let c0 = (min[0] / w).round() as usize;
            let c1 = (max[0] / w).round() as usize;
            let r0 = (min[1] / h).round() as usize;
            let r1 = (max[1] / h).round() as usize;
            if c1 > cols || r1 > rows {
                return Err(Error::Config("wall block outside the maze grid".into()));
            }
            for r in r0..r1 {
                for c in c0..c1 {
                    grid[r * cols + c] = true;
                }
            }
        }
        Ok(Maze {
            rows,
            cols,
            walls: grid,
            pairs: Vec::new(),
            extent,
        })
    }

    pub fn to_ascii(&self) -> String {
        let mut grid: Vec<Vec<char>> = (0..self.rows)
            .map(|r| {
                (0..self.cols)
                    .map(|c| if self.is_wall(r, c) { '#' } else { '.' })
                    .collect()
            })
            .collect();
        for &(digit, (sr, sc), (gr, gc)) in &self.pairs {
            let ch = (b'0' + digit) as char;
            grid[sr][sc] = ch;
            grid[gr][gc] = ch;
        }
        let mut out = String::with_capacity(self.rows * (self.cols + 1));
        for row in grid {
            out.extend(row);
            out.push('\n');
        }
        out
    }

    /// Random maze with corridors `corridor` cells wide and one-cell walls.
    ///
    /// Starts from a spanning tree of the coarse corridor lattice, then
    /// knocks out a fraction `loops` of the remaining interior walls so
    /// that opposing traffic has alternatives.
    pub fn generate<R: Rng>(coarse: usize, corridor: usize, loops: f64, rng: &mut R) -> Maze {
        let pitch = corridor + 1;
        let size = coarse * pitch - 1;
        let mut walls = vec![false; size * size];
        // Wall lines between coarse cells; cleared where the tree or loops open them.
        for i in 0..size {
            for j in 0..size {
                if (i + 1) % pitch == 0 || (j + 1) % pitch == 0 {
                    walls[i * size + j] = true;
                }
            }
        }
        let idx = |r: usize, c: usize| r * coarse + c;
        let mut visited = vec![false; coarse * coarse];
        let mut stack = vec![(0usize, 0usize)];
        visited[0] = true;
        let open = |walls: &mut Vec<bool>, a: (usize, usize), b: (usize, usize)| {
            if a.0 == b.0 {
                let col = a.1.max(b.1) * pitch - 1;
                for k in 0..corridor {
                    walls[(a.0 * pitch + k) * size + col] = false;
                }
            } else {
                let row = a.0.max(b.0) * pitch - 1;
                for k in 0..corridor {
                    walls[row * size + a.1 * pitch + k] = false;
                }
            }
        };
        while let Some(&(r, c)) = stack.last() {
            let mut options = Vec::new();
            if r > 0 && !visited[idx(r - 1, c)] {
                options.push((r - 1, c));
            }
            if r + 1 < coarse && !visited[idx(r + 1, c)] {
                options.push((r + 1, c));
            }
            if c > 0 && !visited[idx(r, c - 1)] {
                options.push((r, c - 1));
            }
            if c + 1 < coarse && !visited[idx(r, c + 1)] {
                options.push((r, c + 1));
            }
            if options.is_empty() {
                stack.pop();
                continue;
            }
            let next = options[rng.gen_range(0..options.len())];
            open(&mut walls, (r, c), next);
            visited[idx(next.0, next.1)] = true;
            stack.push(next);
        }
        for r in 0..coarse {
            for c in 0..coarse {
                if c + 1 < coarse && rng.gen_bool(loops.clamp(0.0, 1.0)) {
                    open(&mut walls, (r, c), (r, c + 1));
                }
                if r + 1 < coarse && rng.gen_bool(loops.clamp(0.0, 1.0)) {
                    open(&mut walls, (r, c), (r + 1, c));
                }
            }
        }
        Maze {
            rows: size,
            cols: size,
            walls,
            pairs: Vec::new(),
            extent: [DEFAULT_EXTENT, DEFAULT_EXTENT],
        }
    }

    /// World with the maze walls and one resting agent per digit pair.
    pub fn to_world(&self, model: DynamicsModel, r: f64, sensing_radius: f64) -> Result<World> {
        if model.pos_dim() != 2 {
            return Err(Error::Config("mazes are planar; use a 2-D model".into()));
        }
        let mut world = World::new(model, r, sensing_radius)?;
        world.extent = self.extent.to_vec();
        world.obstacles = self.wall_obstacles();
        for &(_, (sr, sc), (gr, gc)) in &self.pairs {
            let start = world.model.rest_state(&self.cell_center(sr, sc));
            world.add_agent(start, self.cell_center(gr, gc))?;
        }
        world.validate()?;
        Ok(world)
    }
}

pub fn load_maze(text: &str, model: DynamicsModel, r: f64, sensing_radius: f64) -> Result<World> {
    Maze::parse(text)?.to_world(model, r, sensing_radius)
}

/// Shortest-path guidance through cluttered 2-D worlds.
///
/// Free space is rasterized at resolution `res`, with cells closer than
/// `clearance` to an obstacle blocked. One distance field per agent goal
/// (8-connected Dijkstra) turns the goal into a nearby visible waypoint.
#[derive(Clone, Debug)]
pub struct Guidance {
    res: f64,
    nx: usize,
    ny: usize,
    free: Vec<bool>,
    fields: Vec<Vec<f64>>,
    goals: Vec<Vec<f64>>,
}

impl Guidance {
    pub fn new(world: &World, clearance: f64, res: f64) -> Option<Guidance> {
        if world.obstacles.is_empty() || world.model.pos_dim() != 2 {
            return None;
        }
        let nx = (world.extent[0] / res).ceil() as usize;
        let ny = (world.extent[1] / res).ceil() as usize;
        let mut free = vec![false; nx * ny];
        for iy in 0..ny {
            for ix in 0..nx {
                let c = [(ix as f64 + 0.5) * res, (iy as f64 + 0.5) * res];
                free[iy * nx + ix] = world.obstacle_clearance(&c) >= clearance;
            }
        }
        let mut g = Guidance {
            res,
            nx,
            ny,
            free,
            fields: Vec::new(),
            goals: world.goals().to_vec(),
        };
        g.fields = world.goals().iter().map(|goal| g.distance_field(goal)).collect();
        Some(g)
    }

    fn cell_of(&self, p: &[f64]) -> (usize, usize) {
        let ix = ((p[0] / self.res).floor().max(0.0) as usize).min(self.nx - 1);
        let iy = ((p[1] / self.res).floor().max(0.0) as usize).min(self.ny - 1);
        (ix, iy)
    }

    fn center(&self, ix: usize, iy: usize) -> Vec<f64> {
        vec![(ix as f64 + 0.5) * self.res, (iy as f64 + 0.5) * self.res]
    }

    fn nearest_free(&self, ix: usize, iy: usize) -> Option<(usize, usize)> {
        if self.free[iy * self.nx + ix] {
            return Some((ix, iy));
        }
        let mut best: Option<((usize, usize), usize)> = None;
        for jy in 0..self.ny {
            for jx in 0..self.nx {
                if self.free[jy * self.nx + jx] {
                    let d = jx.abs_diff(ix).pow(2) + jy.abs_diff(iy).pow(2);
                    if best.map_or(true, |(_, bd)| d < bd) {
                        best = Some(((jx, jy), d));
                    }
                }
            }
        }
        best.map(|(c, _)| c)
    }

    fn distance_field(&self, goal: &[f64]) -> Vec<f64> {
        use std::cmp::Ordering;
        use std::collections::BinaryHeap;

        #[derive(PartialEq)]
        struct Item(f64, usize);
        impl Eq for Item {}
        impl PartialOrd for Item {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for Item {
            fn cmp(&self, other: &Self) -> Ordering {
                other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
            }
        }

        let mut dist = vec![f64::INFINITY; self.nx * self.ny];
        let (gx, gy) = self.cell_of(goal);
        let Some((sx, sy)) = self.nearest_free(gx, gy) else {
            return dist;
        };
        let start = sy * self.nx + sx;
        dist[start] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(Item(0.0, start));
        while let Some(Item(d, k)) = heap.pop() {
            if d > dist[k] {
                continue;
            }
            let (x, y) = ((k % self.nx) as i64, (k / self.nx) as i64);
            for (dx, dy) in [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)] {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= self.nx as i64 || ny >= self.ny as i64 {
                    continue;
                }
                let nk = ny as usize * self.nx + nx as usize;
                if !self.free[nk] {
                    continue;
                }
                // No corner cutting.
                if dx != 0 && dy != 0 {
                    let a = y as usize * self.nx + nx as usize;
                    let b = ny as usize * self.nx + x as usize;
                    if !self.free[a] || !self.free[b] {
                        continue;
                    }
                }
                let step = if dx != 0 && dy != 0 { std::f64::consts::SQRT_2 } else { 1.0 };
                let nd = d + step;
                if nd < dist[nk] {
                    dist[nk] = nd;
                    heap.push(Item(nd, nk));
                }
            }
        }
        dist
    }

    fn visible(&self, a: &[f64], b: &[f64]) -> bool {
        let len = linalg::distance(a, b);
        let steps = (len / (0.5 * self.res)).ceil().max(1.0) as usize;
        (1..=steps).all(|s| {
            let t = s as f64 / steps as f64;
            let p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
            let (ix, iy) = self.cell_of(&p);
            self.free[iy * self.nx + ix]
        })
    }

    /// Waypoint for `agent` at position `p`: its goal when visible, else the
    /// farthest visible cell along the descent path within `lookahead` m.
    pub fn waypoint(&self, agent: usize, p: &[f64], lookahead: f64) -> Vec<f64> {
        let goal = &self.goals[agent];
        if self.visible(p, goal) {
            return goal.clone();
        }
        let field = &self.fields[agent];
        let (ix, iy) = self.cell_of(p);
        let Some((mut cx, mut cy)) = self.nearest_free(ix, iy) else {
            return goal.clone();
        };
        let mut best = self.center(cx, cy);
        let max_hops = (lookahead / self.res).ceil() as usize;
        for _ in 0..max_hops {
            let here = field[cy * self.nx + cx];
            if here == 0.0 || !here.is_finite() {
                break;
            }
            let mut next = None;
            let mut next_d = here;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                    if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= self.nx as i64 || ny >= self.ny as i64 {
                        continue;
                    }
                    let d = field[ny as usize * self.nx + nx as usize];
                    if d < next_d {
                        next_d = d;
                        next = Some((nx as usize, ny as usize));
                    }
                }
            }
            let Some((nx, ny)) = next else { break };
            let c = self.center(nx, ny);
            if !self.visible(p, &c) {
                break;
            }
            best = c;
            cx = nx;
            cy = ny;
        }
        if field[cy * self.nx + cx] == 0.0 && self.visible(p, goal) {
            return goal.clone();
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ModelKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world_with(points: &[[f64; 2]]) -> World {
        let mut w = World::new(DynamicsModel::default(), 0.15, 1.0).unwrap();
        for (k, p) in points.iter().enumerate() {
            w.add_agent(w.model.rest_state(p), vec![k as f64 * 0.5, 9.0]).unwrap();
        }
        w
    }

    fn brute_force(w: &World, i: usize) -> Vec<usize> {
        (0..w.num_agents())
            .filter(|&j| j != i && linalg::distance(w.position(i), w.position(j)) <= w.sensing_radius)
            .collect()
    }

    #[test]
    fn sensing_radius_boundary() {
        let w = world_with(&[[5.0, 5.0], [6.01, 5.0]]);
        let idx = w.build_index();
        assert!(idx.neighbors(0, &w).unwrap().is_empty());
        assert!(idx.neighbors(1, &w).unwrap().is_empty());

        let w = world_with(&[[5.0, 5.0], [5.99, 5.0]]);
        let idx = w.build_index();
        assert_eq!(idx.neighbors(0, &w).unwrap().agents[0].id, 1);
        assert_eq!(idx.neighbors(1, &w).unwrap().agents[0].id, 0);
    }

    #[test]
    fn index_matches_brute_force_on_random_agents() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = World::new(DynamicsModel::default(), 0.15, 1.0).unwrap();
        for k in 0..100 {
            let p = [rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)];
            w.add_agent(w.model.rest_state(&p), vec![(k % 10) as f64, (k / 10) as f64])
                .unwrap();
        }
        let idx = w.build_index();
        for i in 0..100 {
            let got: Vec<usize> = idx.neighbors(i, &w).unwrap().agents.iter().map(|a| a.id).collect();
            assert_eq!(got, brute_force(&w, i));
        }
    }

    #[test]
    fn single_agent_has_no_neighbors() {
        let w = world_with(&[[1.0, 1.0]]);
        assert!(w.build_index().neighbors(0, &w).unwrap().is_empty());
    }

    #[test]
    fn wall_at_half_radius() {
        let mut w = world_with(&[[2.0, 5.0]]);
        w.obstacles.push(Obstacle::Block {
            min: vec![2.5, 4.0],
            max: vec![3.0, 6.0],
        });
        let n = w.build_index().neighbors(0, &w).unwrap();
        assert_eq!(n.obstacles.len(), 1);
        assert!((n.obstacles[0].distance - 0.5).abs() < 1e-12);
        assert_eq!(n.obstacles[0].point, vec![2.5, 5.0]);
    }

    #[test]
    fn collinear_middle_sees_both_ends() {
        let w = world_with(&[[3.0, 5.0], [3.9, 5.0], [4.8, 5.0]]);
        let idx = w.build_index();
        let ids: Vec<usize> = idx.neighbors(1, &w).unwrap().agents.iter().map(|a| a.id).collect();
        assert_eq!(ids, vec![0, 2]);
        let ends: Vec<usize> = idx.neighbors(0, &w).unwrap().agents.iter().map(|a| a.id).collect();
        assert_eq!(ends, vec![1]);
    }

    #[test]
    fn relative_state_is_neighbor_minus_self() {
        let w = world_with(&[[3.0, 5.0], [3.5, 5.25]]);
        let n = w.build_index().neighbors(0, &w).unwrap();
        assert_eq!(n.agents[0].relative, vec![0.5, 0.25, 0.0, 0.0]);
    }

    #[test]
    fn stale_index_is_detected() {
        let mut w = world_with(&[[1.0, 1.0], [1.5, 1.0]]);
        let idx = w.build_index();
        let s = w.model.rest_state(&[2.0, 2.0]);
        w.set_state(1, s);
        assert!(matches!(idx.neighbors(0, &w), Err(Error::StaleIndex)));
    }

    #[test]
    fn min_pairwise_examples() {
        let w = world_with(&[[0.0, 0.0], [3.0, 4.0]]);
        assert_eq!(min_pairwise_distance(&w).unwrap(), 5.0);
        let mut w = world_with(&[[0.0, 0.0]]);
        assert!(min_pairwise_distance(&w).is_err());
        w.add_agent(w.model.rest_state(&[0.0, 0.0]), vec![5.0, 5.0]).unwrap();
        assert_eq!(min_pairwise_distance(&w).unwrap(), 0.0);
    }

    #[test]
    fn maze_parsing_examples() {
        let m = Maze::parse("..\n..\n").unwrap();
        assert!(m.wall_obstacles().is_empty());

        let mut text = String::from("#.........\n");
        for _ in 0..9 {
            text.push_str("..........\n");
        }
        let m = Maze::parse(&text).unwrap();
        assert_eq!(
            m.wall_obstacles(),
            vec![Obstacle::Block {
                min: vec![0.0, 0.0],
                max: vec![1.0, 1.0]
            }]
        );

        let mut text = String::from("1.........\n");
        for _ in 0..8 {
            text.push_str("..........\n");
        }
        text.push_str(".........1\n");
        let w = load_maze(&text, DynamicsModel::default(), 0.15, 1.0).unwrap();
        assert_eq!(w.num_agents(), 1);
        assert_eq!(w.position(0), &[0.5, 0.5]);
        assert_eq!(w.goals()[0], vec![9.5, 9.5]);
    }

    #[test]
    fn maze_parse_errors_carry_location() {
        match Maze::parse("...\n..\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match Maze::parse("..3\n...\n") {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (1, 3)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Maze::parse(".x\n"), Err(Error::Parse { column: 2, .. })));
    }

    #[test]
    fn maze_round_trips_through_walls() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Maze::generate(5, 3, 0.3, &mut rng);
        let back = Maze::from_walls(m.rows, m.cols, m.extent, &m.wall_obstacles()).unwrap();
        assert_eq!(back.walls, m.walls);
        let again = Maze::parse(&m.to_ascii()).unwrap();
        assert_eq!(again.walls, m.walls);
    }

    #[test]
    fn shipped_maze_parses() {
        let m = Maze::parse(DEFAULT_MAZE).unwrap();
        assert_eq!((m.rows, m.cols), (20, 20));
        assert!(!m.wall_obstacles().is_empty());
    }

    #[test]
    fn guidance_routes_around_a_wall() {
        let mut w = World::new(DynamicsModel::default(), 0.15, 1.0).unwrap();
        w.obstacles.push(Obstacle::Block {
            min: vec![4.0, 0.0],
            max: vec![5.0, 8.0],
        });
        w.add_agent(w.model.rest_state(&[2.0, 2.0]), vec![8.0, 2.0]).unwrap();
        let g = Guidance::new(&w, 0.35, 0.25).unwrap();
        let wp = g.waypoint(0, &[2.0, 2.0], 3.0);
        assert!(wp[1] > 2.5, "waypoint should head up around the wall: {wp:?}");
        assert_eq!(g.waypoint(0, &[7.0, 2.0], 3.0), vec![8.0, 2.0]);
    }

    #[test]
    fn three_d_world_indexes_in_three_axes() {
        let model = DynamicsModel::new(ModelKind::DoubleIntegrator3D, 0.05, vec![0.5; 3]).unwrap();
        let mut w = World::new(model, 0.15, 1.0).unwrap();
        w.add_agent(w.model.rest_state(&[5.0, 5.0, 5.0]), vec![1.0, 1.0, 1.0]).unwrap();
        w.add_agent(w.model.rest_state(&[5.0, 5.0, 5.9]), vec![2.0, 2.0, 2.0]).unwrap();
        w.add_agent(w.model.rest_state(&[5.0, 5.0, 6.5]), vec![3.0, 3.0, 3.0]).unwrap();
        let idx = w.build_index();
        let ids: Vec<usize> = idx.neighbors(0, &w).unwrap().agents.iter().map(|a| a.id).collect();
        assert_eq!(ids, vec![1]);
    }
}

//! Static environment: locations, directed activities, decision locations and tasks.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a location inside one [`Arena`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LocId(pub u32);

impl LocId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Index of a task inside one [`Arena`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskId(pub u32);

impl TaskId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ArenaError {
    #[error("invalid arena: {0}")]
    InvalidArena(String),
    #[error("invalid map: {0}")]
    InvalidMap(String),
    #[error("location {0} is not a decision location")]
    NotADecisionLocation(String),
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Location {
    pub name: String,
    /// Grid coordinates `(x, y)`, 1-based column and row.
    pub coord: Option<(i32, i32)>,
}

/// A connected sequence of at least one edge, stored as its location path.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Task {
    path: Vec<LocId>,
}

impl Task {
    pub fn path(&self) -> &[LocId] {
        &self.path
    }

    /// Number of activities (edges).
    pub fn len(&self) -> usize {
        self.path.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.path.len() < 2
    }

    pub fn start(&self) -> LocId {
        self.path[0]
    }

    pub fn end(&self) -> LocId {
        self.path[self.path.len() - 1]
    }

    pub fn edges(&self) -> impl Iterator<Item = (LocId, LocId)> + '_ {
        self.path.windows(2).map(|w| (w[0], w[1]))
    }
}

/// Immutable arena `G = (V, E)` with decision locations and a task map.
#[derive(Debug, Clone, PartialEq)]
pub struct Arena {
    locations: Vec<Location>,
    by_name: HashMap<String, LocId>,
    by_coord: HashMap<(i32, i32), LocId>,
    edges: Vec<(LocId, LocId)>,
    succ: Vec<Vec<LocId>>,
    decision: Vec<bool>,
    decision_locations: Vec<LocId>,
    tasks: Vec<Task>,
    task_map: Vec<Vec<TaskId>>,
}

/// Incremental construction of an [`Arena`]; [`ArenaBuilder::build`] checks all invariants.
#[derive(Debug, Default, Clone)]
pub struct ArenaBuilder {
    locations: Vec<Location>,
    edges: Vec<(LocId, LocId)>,
    decision_locations: Vec<LocId>,
    tasks: Vec<(LocId, Vec<LocId>)>,
}

impl ArenaBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(&mut self, name: impl Into<String>, coord: Option<(i32, i32)>) -> LocId {
        let id = LocId(self.locations.len() as u32);
        self.locations.push(Location {
            name: name.into(),
            coord,
        });
        id
    }

    pub fn edge(&mut self, from: LocId, to: LocId) -> &mut Self {
        self.edges.push((from, to));
        self
    }

    pub fn decision(&mut self, v: LocId) -> &mut Self {
        self.decision_locations.push(v);
        self
    }

    /// Registers a task at its first location.
    pub fn task(&mut self, path: Vec<LocId>) -> &mut Self {
        let owner = path.first().copied().unwrap_or(LocId(u32::MAX));
        self.tasks.push((owner, path));
        self
    }

    pub fn build(self) -> Result<Arena, ArenaError> {
        build_arena(
            self.locations,
            self.edges,
            self.decision_locations,
            self.tasks,
        )
    }
}

/// Builds an arena from raw parts. `task_map` pairs each task with the decision
/// location it is offered at.
pub fn build_arena(
    nodes: Vec<Location>,
    edges: Vec<(LocId, LocId)>,
    decision_locations: Vec<LocId>,
    task_map: Vec<(LocId, Vec<LocId>)>,
) -> Result<Arena, ArenaError> {
    let n = nodes.len();
    let invalid = |msg: String| Err(ArenaError::InvalidArena(msg));
    let check = |v: LocId| -> Result<(), ArenaError> {
        if v.index() < n {
            Ok(())
        } else {
            Err(ArenaError::InvalidArena(format!("unknown location index {}", v.0)))
        }
    };

    let mut by_name = HashMap::with_capacity(n);
    let mut by_coord = HashMap::new();
    for (i, loc) in nodes.iter().enumerate() {
        if by_name.insert(loc.name.clone(), LocId(i as u32)).is_some() {
            return invalid(format!("duplicate location id '{}'", loc.name));
        }
        if let Some(c) = loc.coord {
            if by_coord.insert(c, LocId(i as u32)).is_some() {
                return invalid(format!("duplicate coordinate {c:?}"));
            }
        }
    }

    let mut succ = vec![Vec::new(); n];
    let mut unique_edges = Vec::with_capacity(edges.len());
    for &(a, b) in &edges {
        check(a)?;
        check(b)?;
        if !succ[a.index()].contains(&b) {
            succ[a.index()].push(b);
            unique_edges.push((a, b));
        }
    }

    let mut decision = vec![false; n];
    let decision_locations = decision_locations_dedup(&decision_locations);
    for &v in &decision_locations {
        check(v)?;
        decision[v.index()] = true;
    }

    let mut tasks = Vec::with_capacity(task_map.len());
    let mut per_loc: Vec<Vec<TaskId>> = vec![Vec::new(); n];
    for (owner, path) in task_map {
        check(owner)?;
        let owner_name = &nodes[owner.index()].name;
        if !decision[owner.index()] {
            return invalid(format!("task offered at non-decision location '{owner_name}'"));
        }
        if path.len() < 2 {
            return invalid(format!("empty task at '{owner_name}'"));
        }
        for &v in &path {
            check(v)?;
        }
        if path[0] != owner {
            return invalid(format!("task at '{owner_name}' does not start there"));
        }
        for w in path.windows(2) {
            if !succ[w[0].index()].contains(&w[1]) {
                return invalid(format!(
                    "disconnected task edge ('{}', '{}') at '{owner_name}'",
                    nodes[w[0].index()].name,
                    nodes[w[1].index()].name
                ));
            }
        }
        let end = path[path.len() - 1];
        if !decision[end.index()] {
            return invalid(format!(
                "task at '{owner_name}' ends at non-decision location '{}'",
                nodes[end.index()].name
            ));
        }
        per_loc[owner.index()].push(TaskId(tasks.len() as u32));
        tasks.push(Task { path });
    }

    for &v in &decision_locations {
        if per_loc[v.index()].is_empty() {
            return invalid(format!(
                "empty task set at decision location '{}'",
                nodes[v.index()].name
            ));
        }
    }

    Ok(Arena {
        locations: nodes,
        by_name,
        by_coord,
        edges: unique_edges,
        succ,
        decision,
        decision_locations,
        tasks,
        task_map: per_loc,
    })
}

fn decision_locations_dedup(v: &[LocId]) -> Vec<LocId> {
    let mut out: Vec<LocId> = Vec::with_capacity(v.len());
    for &x in v {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

impl Arena {
    pub fn num_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn location(&self, v: LocId) -> &Location {
        &self.locations[v.index()]
    }

    pub fn name(&self, v: LocId) -> &str {
        &self.locations[v.index()].name
    }

    pub fn coord(&self, v: LocId) -> Option<(i32, i32)> {
        self.locations[v.index()].coord
    }

    pub fn find(&self, name: &str) -> Option<LocId> {
        self.by_name.get(name).copied()
    }

    pub fn at(&self, x: i32, y: i32) -> Option<LocId> {
        self.by_coord.get(&(x, y)).copied()
    }

    pub fn locations(&self) -> impl Iterator<Item = LocId> {
        (0..self.locations.len() as u32).map(LocId)
    }

    pub fn edges(&self) -> &[(LocId, LocId)] {
        &self.edges
    }

    pub fn successors(&self, v: LocId) -> &[LocId] {
        &self.succ[v.index()]
    }

    pub fn has_edge(&self, a: LocId, b: LocId) -> bool {
        self.succ[a.index()].contains(&b)
    }

    pub fn is_decision(&self, v: LocId) -> bool {
        self.decision[v.index()]
    }

    pub fn decision_locations(&self) -> &[LocId] {
        &self.decision_locations
    }

    pub fn task(&self, t: TaskId) -> &Task {
        &self.tasks[t.index()]
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Tasks offered at `v`, in arena order.
    pub fn tasks_at(&self, v: LocId) -> Result<&[TaskId], ArenaError> {
        if v.index() >= self.decision.len() || !self.decision[v.index()] {
            let name = self
                .locations
                .get(v.index())
                .map(|l| l.name.clone())
                .unwrap_or_else(|| format!("#{}", v.0));
            return Err(ArenaError::NotADecisionLocation(name));
        }
        Ok(&self.task_map[v.index()])
    }

    /// Task offered at `v` with the given location path, if any.
    pub fn find_task(&self, path: &[LocId]) -> Option<TaskId> {
        let first = *path.first()?;
        self.task_map
            .get(first.index())?
            .iter()
            .copied()
            .find(|&t| self.tasks[t.index()].path == path)
    }

    /// Position of `t` within the task list of its start location.
    pub fn task_index_at(&self, t: TaskId) -> usize {
        let start = self.tasks[t.index()].start();
        self.task_map[start.index()]
            .iter()
            .position(|&x| x == t)
            .expect("task registered at its start location")
    }

    /// Breadth-first hop distances from `from`; `None` for unreachable locations.
    pub fn distances_from(&self, from: LocId) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.locations.len()];
        let mut queue = VecDeque::new();
        dist[from.index()] = Some(0);
        queue.push_back(from);
        while let Some(v) = queue.pop_front() {
            let d = dist[v.index()].unwrap();
            for &w in &self.succ[v.index()] {
                if dist[w.index()].is_none() {
                    dist[w.index()] = Some(d + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    pub fn describe_task(&self, t: TaskId) -> String {
        let names: Vec<String> = self.tasks[t.index()]
            .path
            .iter()
            .map(|&v| match self.coord(v) {
                Some((x, y)) => format!("({x},{y})"),
                None => self.name(v).to_string(),
            })
            .collect();
        names.join("·")
    }
}

impl fmt::Display for LocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Grid text map: `'.'` corridor, `'#'` wall, one row per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMap {
    pub width: usize,
    pub height: usize,
    open: Vec<bool>,
}

impl GridMap {
    pub fn parse(map_text: &str) -> Result<Self, ArenaError> {
        let rows: Vec<&str> = map_text
            .lines()
            .map(|l| l.trim_end_matches('\r'))
            .filter(|l| !l.trim().is_empty())
            .collect();
        if rows.is_empty() {
            return Err(ArenaError::InvalidMap("empty map".into()));
        }
        let width = rows[0].chars().count();
        let mut open = Vec::with_capacity(width * rows.len());
        for (r, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(ArenaError::InvalidMap(format!(
                    "row {} has width {}, expected {width}",
                    r + 1,
                    row.chars().count()
                )));
            }
            for (c, ch) in row.chars().enumerate() {
                match ch {
                    '.' => open.push(true),
                    '#' => open.push(false),
                    other => {
                        return Err(ArenaError::InvalidMap(format!(
                            "unexpected character {other:?} at row {}, column {}",
                            r + 1,
                            c + 1
                        )))
                    }
                }
            }
        }
        if !open.iter().any(|&o| o) {
            return Err(ArenaError::InvalidMap("no corridor tile".into()));
        }
        Ok(Self {
            width,
            height: rows.len(),
            open,
        })
    }

    /// Whether the 1-based tile `(x, y)` is a corridor.
    pub fn is_open(&self, x: i32, y: i32) -> bool {
        x >= 1
            && y >= 1
            && (x as usize) <= self.width
            && (y as usize) <= self.height
            && self.open[(y as usize - 1) * self.width + (x as usize - 1)]
    }
}

/// Neighbour order used for edges and tasks: east, north, south, west.
const DIRECTIONS: [(i32, i32); 4] = [(1, 0), (0, -1), (0, 1), (-1, 0)];

/// Builds the corridor arena of a grid map.
///
/// Corridor tiles become locations named `"x,y"`. Tiles whose degree is not two,
/// and degree-two tiles whose neighbours are not collinear (corners), are
/// decision locations; isolated tiles are plain locations without tasks. Each
/// decision location gets one task per incident corridor, following it to the
/// next decision location.
pub fn gridworld_from_ascii(map_text: &str) -> Result<Arena, ArenaError> {
    let grid = GridMap::parse(map_text)?;
    gridworld_from_grid(&grid)
}

pub fn gridworld_from_grid(grid: &GridMap) -> Result<Arena, ArenaError> {
    let mut b = ArenaBuilder::new();
    let mut ids: HashMap<(i32, i32), LocId> = HashMap::new();
    for y in 1..=grid.height as i32 {
        for x in 1..=grid.width as i32 {
            if grid.is_open(x, y) {
                ids.insert((x, y), b.node(format!("{x},{y}"), Some((x, y))));
            }
        }
    }
    let neighbours = |x: i32, y: i32| -> Vec<(i32, i32)> {
        DIRECTIONS
            .iter()
            .map(|(dx, dy)| (x + dx, y + dy))
            .filter(|&(nx, ny)| grid.is_open(nx, ny))
            .collect()
    };
    let is_decision = |x: i32, y: i32| -> bool {
        let ns = neighbours(x, y);
        match ns.len() {
            0 => false,
            2 => {
                let (a, c) = (ns[0], ns[1]);
                a.0 != c.0 && a.1 != c.1
            }
            _ => true,
        }
    };

    let mut coords: Vec<(i32, i32)> = ids.keys().copied().collect();
    coords.sort_by_key(|&(x, y)| (y, x));
    for &(x, y) in &coords {
        for n in neighbours(x, y) {
            b.edge(ids[&(x, y)], ids[&n]);
        }
    }
    for &(x, y) in &coords {
        if !is_decision(x, y) {
            continue;
        }
        b.decision(ids[&(x, y)]);
        for first in neighbours(x, y) {
            let mut path = vec![ids[&(x, y)], ids[&first]];
            let (mut prev, mut cur) = ((x, y), first);
            while !is_decision(cur.0, cur.1) {
                let next = neighbours(cur.0, cur.1)
                    .into_iter()
                    .find(|&n| n != prev)
                    .expect("interior corridor tile has two neighbours");
                path.push(ids[&next]);
                prev = cur;
                cur = next;
            }
            b.task(path);
        }
    }
    b.build()
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeDoc {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y: Option<i32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArenaDoc {
    nodes: Vec<NodeDoc>,
    edges: Vec<(String, String)>,
    decision_locations: Vec<String>,
    tasks: BTreeMap<String, Vec<Vec<String>>>,
}

fn parse_err(location: impl Into<String>, message: impl Into<String>) -> ArenaError {
    ArenaError::Parse {
        location: location.into(),
        message: message.into(),
    }
}

/// Parses the arena JSON document.
pub fn load_arena(bytes: &[u8]) -> Result<Arena, ArenaError> {
    let doc: ArenaDoc = serde_json::from_slice(bytes).map_err(|e| {
        parse_err(
            format!("line {}, column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    let mut b = ArenaBuilder::new();
    let mut ids = HashMap::new();
    for (i, n) in doc.nodes.iter().enumerate() {
        let coord = match (n.x, n.y) {
            (Some(x), Some(y)) => Some((x, y)),
            (None, None) => None,
            _ => return Err(parse_err(format!("nodes[{i}]"), "x and y must be given together")),
        };
        if ids.insert(n.id.clone(), b.node(n.id.clone(), coord)).is_some() {
            return Err(parse_err(format!("nodes[{i}].id"), format!("duplicate id '{}'", n.id)));
        }
    }
    let resolve = |field: String, name: &str| -> Result<LocId, ArenaError> {
        ids.get(name)
            .copied()
            .ok_or_else(|| parse_err(field, format!("unknown node id '{name}'")))
    };
    for (i, (a, c)) in doc.edges.iter().enumerate() {
        let a = resolve(format!("edges[{i}][0]"), a)?;
        let c = resolve(format!("edges[{i}][1]"), c)?;
        b.edge(a, c);
    }
    for (i, v) in doc.decision_locations.iter().enumerate() {
        let v = resolve(format!("decision_locations[{i}]"), v)?;
        b.decision(v);
    }
    // Tasks keep the order of the decision_locations list, then file order per location.
    let mut owners: Vec<&String> = doc.decision_locations.iter().collect();
    for k in doc.tasks.keys() {
        if !owners.contains(&k) {
            owners.push(k);
        }
    }
    for owner in owners {
        let Some(list) = doc.tasks.get(owner) else { continue };
        let owner_id = resolve(format!("tasks.{owner}"), owner)?;
        for (j, path) in list.iter().enumerate() {
            let mut ids_path = Vec::with_capacity(path.len());
            for (k, name) in path.iter().enumerate() {
                ids_path.push(resolve(format!("tasks.{owner}[{j}][{k}]"), name)?);
            }
            if ids_path.first() != Some(&owner_id) {
                return Err(parse_err(
                    format!("tasks.{owner}[{j}]"),
                    "task must start at its decision location",
                ));
            }
            b.task(ids_path);
        }
    }
    b.build()
}

/// Serialises an arena to its JSON document.
pub fn save_arena(arena: &Arena) -> Vec<u8> {
    let nodes = arena
        .locations
        .iter()
        .map(|l| NodeDoc {
            id: l.name.clone(),
            x: l.coord.map(|c| c.0),
            y: l.coord.map(|c| c.1),
        })
        .collect();
    let edges = arena
        .edges
        .iter()
        .map(|&(a, c)| (arena.name(a).to_string(), arena.name(c).to_string()))
        .collect();
    let decision_locations = arena
        .decision_locations
        .iter()
        .map(|&v| arena.name(v).to_string())
        .collect();
    let mut tasks = BTreeMap::new();
    for &v in &arena.decision_locations {
        let list = arena.task_map[v.index()]
            .iter()
            .map(|&t| {
                arena.tasks[t.index()]
                    .path
                    .iter()
                    .map(|&p| arena.name(p).to_string())
                    .collect()
            })
            .collect();
        tasks.insert(arena.name(v).to_string(), list);
    }
    let doc = ArenaDoc {
        nodes,
        edges,
        decision_locations,
        tasks,
    };
    serde_json::to_vec_pretty(&doc).expect("arena document serialises")
}

/// The 5×5 corridor maze used as the running example: walls on rows 2 and 4, columns 2–4.
pub const EXAMPLE_MAZE: &str = "\
.....
.###.
.....
.###.
.....
";

//! Key-Door-Treasure grid world.
//!
//! The agent must pick up the key, open the door with it and walk to the
//! treasure. The only reward is the terminal treasure bonus.

use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TREASURE_REWARD: f64 = 200.0;
pub const DEFAULT_MAP: &str = include_str!("../../assets/key_door_treasure.txt");

pub type Cell = (i32, i32);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridLayout {
    pub width: i32,
    pub height: i32,
    walls: HashSet<Cell>,
    pub start: Cell,
    pub key: Cell,
    pub door: Cell,
    pub treasure: Cell,
    /// Entrance of the treasure room, if the map marks one with `E`.
    pub entrance: Option<Cell>,
    source: String,
}

impl GridLayout {
    pub fn default_layout() -> Self {
        Self::parse(DEFAULT_MAP).expect("bundled map is valid")
    }

    /// Parses the ASCII map format: `#` wall, `.` floor, `S` start, `K` key,
    /// `D` door, `T` treasure and optionally `E` for the treasure-room entrance.
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.is_empty() {
            return Err(Error::InvalidMap("empty map".into()));
        }
        let width = rows[0].chars().count();
        let mut walls = HashSet::new();
        let (mut start, mut key, mut door, mut treasure, mut entrance) = (None, None, None, None, None);
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::InvalidMap(format!("row {y} is not {width} cells wide")));
            }
            for (x, ch) in row.chars().enumerate() {
                let cell = (x as i32, y as i32);
                let slot = match ch {
                    '#' => {
                        walls.insert(cell);
                        continue;
                    }
                    '.' => continue,
                    'S' => &mut start,
                    'K' => &mut key,
                    'D' => &mut door,
                    'T' => &mut treasure,
                    'E' => &mut entrance,
                    other => return Err(Error::InvalidMap(format!("unknown symbol {other:?} at {cell:?}"))),
                };
                if slot.replace(cell).is_some() {
                    return Err(Error::InvalidMap(format!("duplicate {ch:?}")));
                }
            }
        }
        let missing = |name: &str| Error::InvalidMap(format!("missing {name}"));
        let layout = Self {
            width: width as i32,
            height: rows.len() as i32,
            walls,
            start: start.ok_or_else(|| missing("start"))?,
            key: key.ok_or_else(|| missing("key"))?,
            door: door.ok_or_else(|| missing("door"))?,
            treasure: treasure.ok_or_else(|| missing("treasure"))?,
            entrance,
            source: rows.join("\n"),
        };
        layout.validate()?;
        Ok(layout)
    }

    fn validate(&self) -> Result<()> {
        for x in 0..self.width {
            for y in [0, self.height - 1] {
                if !self.is_wall((x, y)) && (x, y) != self.door {
                    return Err(Error::InvalidMap(format!("border cell {:?} is open", (x, y))));
                }
            }
        }
        for y in 0..self.height {
            for x in [0, self.width - 1] {
                if !self.is_wall((x, y)) && (x, y) != self.door {
                    return Err(Error::InvalidMap(format!("border cell {:?} is open", (x, y))));
                }
            }
        }
        let closed = self.reachable(false);
        if !closed.contains(&self.key) {
            return Err(Error::InvalidMap("key unreachable from start".into()));
        }
        if closed.contains(&self.treasure) {
            return Err(Error::InvalidMap("treasure reachable without the door".into()));
        }
        if !closed.iter().any(|c| neighbours(*c).contains(&self.door)) {
            return Err(Error::InvalidMap("door not adjacent to the start region".into()));
        }
        let open = self.reachable(true);
        if !open.contains(&self.treasure) {
            return Err(Error::InvalidMap("treasure unreachable through the door".into()));
        }
        if let Some(e) = self.entrance {
            if closed.contains(&e) || !open.contains(&e) {
                return Err(Error::InvalidMap("entrance must lie beyond the door".into()));
            }
        }
        Ok(())
    }

    /// Flood fill from the start, treating the door as open or closed.
    pub fn reachable(&self, door_open: bool) -> HashSet<Cell> {
        let mut seen = HashSet::from([self.start]);
        let mut queue = VecDeque::from([self.start]);
        while let Some(c) = queue.pop_front() {
            for n in neighbours(c) {
                let passable = !self.is_wall(n) && (door_open || n != self.door) && self.in_bounds(n);
                if passable && seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        seen
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.0 >= 0 && c.1 >= 0 && c.0 < self.width && c.1 < self.height
    }

    pub fn is_wall(&self, c: Cell) -> bool {
        !self.in_bounds(c) || self.walls.contains(&c)
    }

    pub fn ascii(&self) -> &str {
        &self.source
    }
}

fn neighbours((x, y): Cell) -> [Cell; 4] {
    [(x, y - 1), (x, y + 1), (x - 1, y), (x + 1, y)]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridState {
    pub x: i32,
    pub y: i32,
    pub has_key: bool,
    pub door_open: bool,
    pub t: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Move {
    Up,
    Down,
    Left,
    Right,
}

impl Move {
    pub const ALL: [Move; 4] = [Move::Up, Move::Down, Move::Left, Move::Right];

    pub fn from_index(i: usize) -> Option<Move> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn delta(self) -> Cell {
        match self {
            Move::Up => (0, -1),
            Move::Down => (0, 1),
            Move::Left => (-1, 0),
            Move::Right => (1, 0),
        }
    }
}

pub fn grid_reset(layout: &GridLayout) -> GridState {
    GridState {
        x: layout.start.0,
        y: layout.start.1,
        has_key: false,
        door_open: false,
        t: 0,
    }
}

/// Returns `(next_state, reward, done)`.
pub fn grid_step(state: &GridState, mv: Move, layout: &GridLayout, max_steps: usize) -> (GridState, f64, bool) {
    let mut next = *state;
    next.t += 1;
    let (dx, dy) = mv.delta();
    let target = (state.x + dx, state.y + dy);
    let enter = if target == layout.door {
        if next.door_open || next.has_key {
            next.door_open = true;
            true
        } else {
            false
        }
    } else {
        !layout.is_wall(target)
    };
    if enter {
        next.x = target.0;
        next.y = target.1;
    }
    if (next.x, next.y) == layout.key {
        next.has_key = true;
    }
    if (next.x, next.y) == layout.treasure {
        return (next, TREASURE_REWARD, true);
    }
    (next, 0.0, next.t >= max_steps)
}

pub fn grid_obs(state: &GridState, layout: &GridLayout) -> Vec<f64> {
    vec![
        state.x as f64 / layout.width as f64,
        state.y as f64 / layout.height as f64,
        if state.has_key { 1.0 } else { 0.0 },
        if state.door_open { 1.0 } else { 0.0 },
    ]
}

/// Shortest action sequence from the start through key and door to the treasure.
pub fn solve(layout: &GridLayout) -> Option<Vec<Move>> {
    let start = grid_reset(layout);
    let key = |s: &GridState| (s.x, s.y, s.has_key, s.door_open);
    let mut seen = HashSet::from([key(&start)]);
    let mut queue = VecDeque::from([(start, Vec::new())]);
    while let Some((s, path)) = queue.pop_front() {
        for mv in Move::ALL {
            let (n, r, _) = grid_step(&s, mv, layout, usize::MAX);
            let mut p = path.clone();
            p.push(mv);
            if r > 0.0 {
                return Some(p);
            }
            if seen.insert(key(&n)) {
                queue.push_back((n, p));
            }
        }
    }
    None
}

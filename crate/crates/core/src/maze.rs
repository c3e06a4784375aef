//! Grid-maze navigation toy language.
//!
//! A maze is a small grid with `(0, 0)` in the upper-left corner. A path is a
//! sequence of moves from the start cell that stays in bounds, never crosses
//! a wall, and whose final cell is the target. Paths may revisit cells (they
//! are walks, not simple paths). Serialized as tokens, a path becomes
//! `BOS, move*, EOS, EOS...` padded to a fixed length, which gives the
//! teacher and students a finite, fully enumerable language to agree on.

use crate::error::GdlError;
use crate::rng::substream;
use crate::teacher::TokenSequence;
use crate::Result;
use serde::{Deserialize, Serialize};

pub use crate::teacher::{BOS, EOS};

/// Token ids of the four moves; BOS and EOS take ids 0 and 1.
pub const TOKEN_UP: usize = 2;
pub const TOKEN_DOWN: usize = 3;
pub const TOKEN_LEFT: usize = 4;
pub const TOKEN_RIGHT: usize = 5;
/// Vocabulary size of the maze language.
pub const VOCAB: usize = 6;

/// One of the four grid moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Up,
    Down,
    Left,
    Right,
}

impl Move {
    pub const ALL: [Move; 4] = [Move::Up, Move::Down, Move::Left, Move::Right];

    /// Row/column displacement; rows grow downward.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Move::Up => (-1, 0),
            Move::Down => (1, 0),
            Move::Left => (0, -1),
            Move::Right => (0, 1),
        }
    }

    pub fn token(self) -> usize {
        match self {
            Move::Up => TOKEN_UP,
            Move::Down => TOKEN_DOWN,
            Move::Left => TOKEN_LEFT,
            Move::Right => TOKEN_RIGHT,
        }
    }

    pub fn from_token(token: usize) -> Option<Move> {
        match token {
            TOKEN_UP => Some(Move::Up),
            TOKEN_DOWN => Some(Move::Down),
            TOKEN_LEFT => Some(Move::Left),
            TOKEN_RIGHT => Some(Move::Right),
            _ => None,
        }
    }
}

/// A grid cell as `(row, col)`.
pub type Cell = (usize, usize);

/// Maze geometry. Walls sit between pairs of adjacent cells and block
/// movement in both directions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MazeSpec {
    pub rows: usize,
    pub cols: usize,
    pub start: Cell,
    pub target: Cell,
    pub max_moves: usize,
    #[serde(default)]
    pub walls: Vec<(Cell, Cell)>,
}

impl Default for MazeSpec {
    /// The reference maze: 4 rows by 5 columns, start `(3, 1)`, target
    /// `(3, 4)`, at most 10 moves, no walls.
    fn default() -> Self {
        MazeSpec {
            rows: 4,
            cols: 5,
            start: (3, 1),
            target: (3, 4),
            max_moves: 10,
            walls: Vec::new(),
        }
    }
}

impl MazeSpec {
    /// Token length of padded path sequences: `BOS + max_moves + EOS`.
    pub fn padded_len(&self) -> usize {
        self.max_moves + 2
    }

    pub fn in_bounds(&self, cell: (isize, isize)) -> bool {
        cell.0 >= 0 && cell.1 >= 0 && (cell.0 as usize) < self.rows && (cell.1 as usize) < self.cols
    }

    fn wall_between(&self, a: Cell, b: Cell) -> bool {
        self.walls
            .iter()
            .any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a))
    }

    /// The cell reached by `mv` from `cell`, or `None` when blocked by the
    /// boundary or a wall.
    pub fn step(&self, cell: Cell, mv: Move) -> Option<Cell> {
        let (dr, dc) = mv.delta();
        let next = (cell.0 as isize + dr, cell.1 as isize + dc);
        if !self.in_bounds(next) {
            return None;
        }
        let next = (next.0 as usize, next.1 as usize);
        if self.wall_between(cell, next) {
            return None;
        }
        Some(next)
    }

    /// Checks geometry and reachability within `max_moves`.
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(GdlError::Config(
                "maze must have positive dimensions".into(),
            ));
        }
        for &cell in [&self.start, &self.target] {
            if cell.0 >= self.rows || cell.1 >= self.cols {
                return Err(GdlError::Config(format!(
                    "cell {cell:?} outside a {}x{} grid",
                    self.rows, self.cols
                )));
            }
        }
        if self.start == self.target {
            return Err(GdlError::Config("start and target must differ".into()));
        }
        for &(a, b) in &self.walls {
            let adjacent =
                (a.0 as isize - b.0 as isize).abs() + (a.1 as isize - b.1 as isize).abs() == 1;
            if !adjacent
                || a.0 >= self.rows
                || a.1 >= self.cols
                || b.0 >= self.rows
                || b.1 >= self.cols
            {
                return Err(GdlError::Config(format!(
                    "wall {a:?}-{b:?} must join two adjacent in-grid cells"
                )));
            }
        }
        match self.shortest_path_len() {
            Some(d) if d <= self.max_moves => Ok(()),
            _ => Err(GdlError::NoValidPath),
        }
    }

    /// Length of the shortest start-to-target path, if one exists.
    pub fn shortest_path_len(&self) -> Option<usize> {
        let mut dist = vec![vec![usize::MAX; self.cols]; self.rows];
        dist[self.start.0][self.start.1] = 0;
        let mut queue = std::collections::VecDeque::from([self.start]);
        while let Some(cell) = queue.pop_front() {
            if cell == self.target {
                return Some(dist[cell.0][cell.1]);
            }
            for mv in Move::ALL {
                if let Some(next) = self.step(cell, mv) {
                    if dist[next.0][next.1] == usize::MAX {
                        dist[next.0][next.1] = dist[cell.0][cell.1] + 1;
                        queue.push_back(next);
                    }
                }
            }
        }
        None
    }
}

/// Breadth-first enumeration of every move sequence of length at most
/// `max_moves` that stays legal throughout and whose final cell is the
/// target. Sequences are produced in order of increasing length, with moves
/// explored in `Up, Down, Left, Right` order, so the output order is
/// deterministic.
pub fn enumerate_paths(spec: &MazeSpec) -> Result<Vec<Vec<Move>>> {
    spec.validate()?;
    let mut paths = Vec::new();
    // Frontier of (current cell, moves so far) at the current depth.
    let mut frontier: Vec<(Cell, Vec<Move>)> = vec![(spec.start, Vec::new())];
    for _ in 0..spec.max_moves {
        let mut next_frontier = Vec::new();
        for (cell, path) in &frontier {
            for mv in Move::ALL {
                if let Some(next) = spec.step(*cell, mv) {
                    let mut extended = path.clone();
                    extended.push(mv);
                    if next == spec.target {
                        paths.push(extended.clone());
                    }
                    next_frontier.push((next, extended));
                }
            }
        }
        frontier = next_frontier;
    }
    if paths.is_empty() {
        return Err(GdlError::NoValidPath);
    }
    Ok(paths)
}

/// Encodes a move sequence as `BOS, moves..., EOS` padded with EOS to the
/// spec's fixed length.
pub fn tokenize_path(spec: &MazeSpec, path: &[Move]) -> TokenSequence {
    let mut tokens = Vec::with_capacity(spec.padded_len());
    tokens.push(BOS);
    tokens.extend(path.iter().map(|m| m.token()));
    tokens.resize(spec.padded_len(), EOS);
    tokens
}

/// Validates a token sequence as a maze path: starts with BOS, carries only
/// move tokens up to the first EOS, has nothing but EOS afterwards, uses at
/// most `max_moves` moves that each stay legal, and ends on the target.
pub fn is_valid_path(spec: &MazeSpec, tokens: &[usize]) -> bool {
    if tokens.len() < 2 || tokens[0] != BOS {
        return false;
    }
    let Some(eos_at) = tokens.iter().position(|&t| t == EOS) else {
        return false;
    };
    if tokens[eos_at..].iter().any(|&t| t != EOS) {
        return false;
    }
    let moves = &tokens[1..eos_at];
    if moves.len() > spec.max_moves {
        return false;
    }
    let mut cell = spec.start;
    for &t in moves {
        let Some(mv) = Move::from_token(t) else {
            return false;
        };
        match spec.step(cell, mv) {
            Some(next) => cell = next,
            None => return false,
        }
    }
    cell == spec.target
}

/// Fraction of samples that are valid paths.
pub fn eval_success(spec: &MazeSpec, samples: &[TokenSequence]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let valid = samples.iter().filter(|s| is_valid_path(spec, s)).count();
    valid as f64 / samples.len() as f64
}

/// A fixed-length token corpus of valid paths.
#[derive(Debug, Clone)]
pub struct MazeCorpus {
    pub spec: MazeSpec,
    pub sequences: Vec<TokenSequence>,
}

/// Default cap on corpus size.
pub const DEFAULT_CORPUS_CAP: usize = 2000;

impl MazeCorpus {
    /// Enumerates all paths and keeps at most `cap` of them, subsampled
    /// uniformly without replacement under the given seed. Selection
    /// preserves enumeration order, so the corpus is deterministic in
    /// `(spec, cap, seed)`.
    pub fn build(spec: &MazeSpec, cap: usize, seed: u64) -> Result<MazeCorpus> {
        if cap == 0 {
            return Err(GdlError::Config("corpus cap must be positive".into()));
        }
        let paths = enumerate_paths(spec)?;
        let chosen: Vec<&Vec<Move>> = if paths.len() <= cap {
            paths.iter().collect()
        } else {
            let mut rng = substream(seed, "corpus-subsample", &[]);
            let mut idx = rand::seq::index::sample(&mut rng, paths.len(), cap).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &paths[i]).collect()
        };
        let sequences = chosen.into_iter().map(|p| tokenize_path(spec, p)).collect();
        Ok(MazeCorpus {
            spec: spec.clone(),
            sequences,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

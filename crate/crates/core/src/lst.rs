//! Latin Square Task: 4×4 puzzles where each of four symbols appears once
//! per row and column and a single probe cell must be inferred.
//!
//! All reasoning goes through the exhaustive table of the 576 complete 4×4
//! Latin squares. A square is stored as a 64-bit one-hot word (bit
//! `4·cell + symbol`), so checking whether a square completes a partial grid
//! is one AND and one compare.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

pub const SIDE: usize = 4;
pub const N_CELLS: usize = SIDE * SIDE;
pub const N_SYMBOLS: usize = 4;

/// Token ids: symbols are 0..=3.
pub const TOKEN_BLANK: usize = 4;
pub const TOKEN_PROBE: usize = 5;
pub const VOCAB_SIZE: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cell {
    Symbol(u8),
    Blank,
    Probe,
}

impl Cell {
    pub fn code(self) -> usize {
        match self {
            Cell::Symbol(s) => s as usize,
            Cell::Blank => TOKEN_BLANK,
            Cell::Probe => TOKEN_PROBE,
        }
    }

    pub fn from_code(code: usize) -> Option<Cell> {
        match code {
            0..=3 => Some(Cell::Symbol(code as u8)),
            TOKEN_BLANK => Some(Cell::Blank),
            TOKEN_PROBE => Some(Cell::Probe),
            _ => None,
        }
    }
}

/// Number of distinct row/column lines needed to pin down the probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Complexity {
    One = 1,
    Two = 2,
    Three = 3,
}

impl Complexity {
    pub const ALL: [Complexity; 3] = [Complexity::One, Complexity::Two, Complexity::Three];

    pub fn from_level(level: u8) -> Result<Self> {
        match level {
            1 => Ok(Complexity::One),
            2 => Ok(Complexity::Two),
            3 => Ok(Complexity::Three),
            _ => Err(Error::config(format!("complexity must be 1, 2 or 3, got {level}"))),
        }
    }

    pub fn level(self) -> u8 {
        self as u8
    }
}

/// Bitmask over the four symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SymbolSet(pub u8);

impl SymbolSet {
    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, s: u8) -> bool {
        self.0 & (1 << s) != 0
    }

    pub fn single(self) -> Option<u8> {
        (self.len() == 1).then(|| self.0.trailing_zeros() as u8)
    }

    pub fn iter(self) -> impl Iterator<Item = u8> {
        (0..N_SYMBOLS as u8).filter(move |&s| self.contains(s))
    }
}

/// A complete 4×4 Latin square, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LatinSquare(pub [u8; N_CELLS]);

impl LatinSquare {
    pub fn is_valid(&self) -> bool {
        (0..SIDE).all(|line| {
            let mut row = 0u8;
            let mut col = 0u8;
            for k in 0..SIDE {
                row |= 1 << self.0[line * SIDE + k];
                col |= 1 << self.0[k * SIDE + line];
            }
            row == 0b1111 && col == 0b1111
        })
    }

    pub fn is_reduced(&self) -> bool {
        (0..SIDE).all(|k| self.0[k] == k as u8 && self.0[k * SIDE] == k as u8)
    }

    fn onehot(&self) -> u64 {
        self.0
            .iter()
            .enumerate()
            .fold(0u64, |acc, (c, &s)| acc | 1 << (4 * c + s as usize))
    }
}

/// All complete 4×4 Latin squares, by backtracking over cells in row-major order.
pub fn enumerate_latin_squares() -> Vec<LatinSquare> {
    fn fill(grid: &mut [u8; N_CELLS], pos: usize, out: &mut Vec<LatinSquare>) {
        if pos == N_CELLS {
            out.push(LatinSquare(*grid));
            return;
        }
        let (r, c) = (pos / SIDE, pos % SIDE);
        for s in 0..N_SYMBOLS as u8 {
            let clash = (0..c).any(|k| grid[r * SIDE + k] == s) || (0..r).any(|k| grid[k * SIDE + c] == s);
            if !clash {
                grid[pos] = s;
                fill(grid, pos + 1, out);
            }
        }
    }
    let mut out = Vec::with_capacity(576);
    fill(&mut [0; N_CELLS], 0, &mut out);
    out
}

struct SquareTable {
    squares: Vec<LatinSquare>,
    onehots: Vec<u64>,
}

fn table() -> &'static SquareTable {
    static TABLE: OnceLock<SquareTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let squares = enumerate_latin_squares();
        let onehots = squares.iter().map(LatinSquare::onehot).collect();
        SquareTable { squares, onehots }
    })
}

/// One Latin Square Task instance.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Puzzle {
    pub cells: [Cell; N_CELLS],
    pub probe_index: usize,
    pub solution: u8,
    pub complexity: Complexity,
}

/// A puzzle together with the seed that regenerates it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PuzzleRecord {
    pub puzzle: Puzzle,
    pub seed: u64,
}

/// Filled-cell constraints as (cell mask, value mask) one-hot words.
fn constraint_words(cells: &[Cell; N_CELLS]) -> Result<(u64, u64)> {
    let mut cell_mask = 0u64;
    let mut values = 0u64;
    for (c, cell) in cells.iter().enumerate() {
        if let Cell::Symbol(s) = *cell {
            if s as usize >= N_SYMBOLS {
                return Err(Error::contract(format!("cell {c} holds symbol {s}")));
            }
            cell_mask |= 0b1111 << (4 * c);
            values |= 1 << (4 * c + s as usize);
        }
    }
    Ok((cell_mask, values))
}

fn probe_of(cells: &[Cell; N_CELLS]) -> Result<usize> {
    let mut probes = cells.iter().enumerate().filter(|(_, c)| **c == Cell::Probe).map(|(i, _)| i);
    match (probes.next(), probes.next()) {
        (Some(p), None) => Ok(p),
        _ => Err(Error::contract("a puzzle grid must contain exactly one probe cell")),
    }
}

fn candidates_from_words(cell_mask: u64, values: u64, probe: usize) -> SymbolSet {
    let t = table();
    let mut set = 0u8;
    for (sq, &oh) in t.squares.iter().zip(&t.onehots) {
        if oh & cell_mask == values {
            set |= 1 << sq.0[probe];
        }
    }
    SymbolSet(set)
}

/// Symbols the probe can take across every Latin square consistent with the
/// filled cells. A grid that no square completes is an error.
pub fn solve(cells: &[Cell; N_CELLS]) -> Result<SymbolSet> {
    let probe = probe_of(cells)?;
    let (mask, values) = constraint_words(cells)?;
    let set = candidates_from_words(mask, values, probe);
    if set.is_empty() {
        Err(Error::Contradictory)
    } else {
        Ok(set)
    }
}

fn line_symbols(cells: &[Cell; N_CELLS], indices: impl Iterator<Item = usize>) -> u8 {
    indices.fold(0u8, |acc, i| match cells[i] {
        Cell::Symbol(s) => acc | 1 << s,
        _ => acc,
    })
}

/// Minimal number of row/column lines a deduction must consult.
///
/// One line suffices when the probe's row or column already shows the three
/// other symbols; two when only their union does; otherwise the probe can
/// only be fixed after deducing some intermediate cell, which is level 3.
/// The puzzle must be uniquely solvable.
pub fn classify_complexity(cells: &[Cell; N_CELLS]) -> Result<Complexity> {
    let set = match solve(cells) {
        Ok(set) => set,
        Err(Error::Contradictory) => return Err(Error::contract("cannot classify a contradictory puzzle")),
        Err(e) => return Err(e),
    };
    if set.len() != 1 {
        return Err(Error::contract(format!(
            "cannot classify a puzzle with {} candidate solutions",
            set.len()
        )));
    }
    let probe = probe_of(cells)?;
    let (r, c) = (probe / SIDE, probe % SIDE);
    let row = line_symbols(cells, (0..SIDE).map(|k| r * SIDE + k));
    let col = line_symbols(cells, (0..SIDE).map(|k| k * SIDE + c));
    Ok(if row.count_ones() == 3 || col.count_ones() == 3 {
        Complexity::One
    } else if (row | col).count_ones() == 3 {
        Complexity::Two
    } else {
        Complexity::Three
    })
}

impl Puzzle {
    /// Builds a puzzle from a grid, solving and classifying it.
    pub fn from_cells(cells: [Cell; N_CELLS]) -> Result<Self> {
        let probe_index = probe_of(&cells)?;
        let solution = solve(&cells)?
            .single()
            .ok_or_else(|| Error::contract("puzzle is not uniquely solvable"))?;
        let complexity = classify_complexity(&cells)?;
        Ok(Puzzle {
            cells,
            probe_index,
            solution,
            complexity,
        })
    }

    pub fn n_filled(&self) -> usize {
        self.cells.iter().filter(|c| matches!(c, Cell::Symbol(_))).count()
    }

    /// Checks the structural invariants: one probe, no row/column repeats,
    /// unique solution equal to the stored one, matching complexity label.
    pub fn validate(&self) -> Result<()> {
        if probe_of(&self.cells)? != self.probe_index {
            return Err(Error::contract("probe index does not match grid"));
        }
        for line in 0..SIDE {
            for idx in [
                (0..SIDE).map(|k| line * SIDE + k).collect::<Vec<_>>(),
                (0..SIDE).map(|k| k * SIDE + line).collect::<Vec<_>>(),
            ] {
                let mut seen = 0u8;
                for i in idx {
                    if let Cell::Symbol(s) = self.cells[i] {
                        if seen & (1 << s) != 0 {
                            return Err(Error::contract(format!("symbol {s} repeated in line {line}")));
                        }
                        seen |= 1 << s;
                    }
                }
            }
        }
        let set = solve(&self.cells)?;
        if set.single() != Some(self.solution) {
            return Err(Error::contract("stored solution is not the unique completion"));
        }
        if classify_complexity(&self.cells)? != self.complexity {
            return Err(Error::contract("complexity label does not match classification"));
        }
        Ok(())
    }

    /// Set representation used for Jaccard comparisons: one bit per
    /// (cell, content) pair over non-blank cells, probe included.
    pub fn element_bits(&self) -> u128 {
        self.cells.iter().enumerate().fold(0u128, |acc, (i, c)| match c {
            Cell::Blank => acc,
            other => acc | 1u128 << (i * VOCAB_SIZE + other.code()),
        })
    }
}

impl fmt::Display for Puzzle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..SIDE {
            for c in 0..SIDE {
                let ch = match self.cells[r * SIDE + c] {
                    Cell::Symbol(s) => (b'A' + s) as char,
                    Cell::Blank => '.',
                    Cell::Probe => '?',
                };
                write!(f, "{ch}")?;
            }
            writeln!(f)?;
        }
        write!(f, "answer={} complexity={}", (b'A' + self.solution) as char, self.complexity.level())
    }
}

/// Generation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Upper bound on extra distractor cells restored to a minimal puzzle.
    pub max_distractors: usize,
    /// Restore cells until every symbol is visible somewhere on the grid,
    /// so symbol counts alone never reveal the answer.
    pub require_all_symbols: bool,
    /// Attempts before giving up on a requested complexity.
    pub max_attempts: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            max_distractors: 1,
            require_all_symbols: true,
            max_attempts: 10_000,
        }
    }
}

fn in_probe_lines(cell: usize, probe: usize) -> bool {
    cell / SIDE == probe / SIDE || cell % SIDE == probe % SIDE
}

/// Samples a puzzle of the requested complexity, deterministically from `seed`.
///
/// A complete square is drawn uniformly from the 576 and a probe cell is
/// chosen. Filled cells are removed in random order whenever the probe stays
/// uniquely determined, leaving a minimal puzzle; attempts whose
/// classification differs from the request are rejected. Cells outside the
/// probe's row and column are then restored so that all four symbols are
/// visible (when `require_all_symbols`), followed by up to `max_distractors`
/// random extra cells that keep the classification.
pub fn generate_puzzle(complexity: Complexity, seed: u64, config: &GeneratorConfig) -> Result<Puzzle> {
    let t = table();
    let mut rng = rng::seeded(seed);
    for _ in 0..config.max_attempts {
        let square = t.squares[rng.random_range(0..t.squares.len())];
        let probe = rng.random_range(0..N_CELLS);
        let mut order: Vec<usize> = (0..N_CELLS).filter(|&c| c != probe).collect();
        order.shuffle(&mut rng);

        let sq_bits = square.onehot();
        let mut mask: u64 = order.iter().fold(0, |m, &c| m | 0b1111 << (4 * c));
        let mut removed = Vec::new();
        for &c in &order {
            let trial = mask & !(0b1111 << (4 * c));
            if candidates_from_words(trial, sq_bits & trial, probe).len() == 1 {
                mask = trial;
                removed.push(c);
            }
        }

        let mut cells = [Cell::Blank; N_CELLS];
        cells[probe] = Cell::Probe;
        for c in 0..N_CELLS {
            if c != probe && mask & (0b1111 << (4 * c)) != 0 {
                cells[c] = Cell::Symbol(square.0[c]);
            }
        }
        if classify_complexity(&cells)? != complexity {
            continue;
        }

        removed.shuffle(&mut rng);
        if config.require_all_symbols {
            // Cells off the probe's lines never change the classification.
            for s in 0..N_SYMBOLS as u8 {
                if cells.contains(&Cell::Symbol(s)) {
                    continue;
                }
                let pos = removed
                    .iter()
                    .position(|&c| square.0[c] == s && !in_probe_lines(c, probe))
                    .expect("every symbol occupies a cell off the probe's lines");
                let c = removed.swap_remove(pos);
                cells[c] = Cell::Symbol(s);
            }
        }
        let n_extra = rng.random_range(0..=config.max_distractors.min(removed.len()));
        let mut added = 0;
        for &c in &removed {
            if added == n_extra {
                break;
            }
            cells[c] = Cell::Symbol(square.0[c]);
            if classify_complexity(&cells)? == complexity {
                added += 1;
            } else {
                cells[c] = Cell::Blank;
            }
        }
        return Ok(Puzzle {
            cells,
            probe_index: probe,
            solution: square.0[probe],
            complexity,
        });
    }
    Err(Error::Budget(format!(
        "no complexity-{} puzzle after {} attempts (seed {seed})",
        complexity.level(),
        config.max_attempts
    )))
}

/// 1 − |A∩B| / |A∪B| over the (cell, content) element sets.
pub fn jaccard_dissimilarity(p: &Puzzle, q: &Puzzle) -> f64 {
    jaccard_bits(p.element_bits(), q.element_bits())
}

fn jaccard_bits(a: u128, b: u128) -> f64 {
    let union = (a | b).count_ones();
    if union == 0 {
        return 0.0;
    }
    1.0 - (a & b).count_ones() as f64 / union as f64
}

/// Parameters of a train/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_train: usize,
    pub n_test: usize,
    /// Every test puzzle must be more dissimilar than this to every train puzzle.
    pub threshold: f64,
    /// Relative weights of complexity levels 1, 2, 3.
    pub complexity_mix: [f64; 3],
    pub seed: u64,
    /// Train candidates examined before giving up.
    pub max_candidates: usize,
    #[serde(default)]
    pub generator: GeneratorConfig,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            n_train: 8000,
            n_test: 100,
            threshold: 0.8,
            complexity_mix: [1.0, 1.0, 1.0],
            seed: 0,
            max_candidates: 2_000_000,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<PuzzleRecord>,
    pub test: Vec<PuzzleRecord>,
    /// Train candidates examined, accepted or not.
    pub candidates: usize,
}

fn pick_complexity(mix: &[f64; 3], u: f64) -> Complexity {
    let total: f64 = mix.iter().sum();
    let mut acc = 0.0;
    for (k, w) in mix.iter().enumerate() {
        acc += w / total;
        if u < acc {
            return Complexity::ALL[k];
        }
    }
    Complexity::Three
}

/// Builds a train/test split in which every test puzzle is more dissimilar
/// than `threshold` to every train puzzle.
///
/// The test set is drawn first; train candidates are then admitted only when
/// they clear the threshold against every test puzzle. Drawing the train pool
/// first is hopeless at this threshold: a candidate would have to avoid
/// thousands of puzzles at once, and essentially none do.
pub fn build_split(spec: &SplitSpec) -> Result<Split> {
    if !(spec.threshold > 0.0 && spec.threshold < 1.0) {
        return Err(Error::config(format!("threshold must lie in (0,1), got {}", spec.threshold)));
    }
    if spec.complexity_mix.iter().any(|w| *w < 0.0) || spec.complexity_mix.iter().sum::<f64>() <= 0.0 {
        return Err(Error::config("complexity mix needs nonnegative weights with positive sum"));
    }
    let mut mix_rng = rng::stream_rng(spec.seed, stream::PUZZLE);
    let mut make = |index: u64| -> Result<PuzzleRecord> {
        let level = pick_complexity(&spec.complexity_mix, mix_rng.random::<f64>());
        let seed = rng::derive_seed(spec.seed, stream::PUZZLE, index);
        let puzzle = generate_puzzle(level, seed, &spec.generator)?;
        Ok(PuzzleRecord { puzzle, seed })
    };

    let test = (0..spec.n_test as u64).map(&mut make).collect::<Result<Vec<_>>>()?;
    let test_bits: Vec<u128> = test.iter().map(|r| r.puzzle.element_bits()).collect();

    let mut train = Vec::with_capacity(spec.n_train);
    let mut candidates = 0;
    while train.len() < spec.n_train {
        if candidates == spec.max_candidates {
            let rate = train.len() as f64 / candidates.max(1) as f64;
            return Err(Error::Budget(format!(
                "only {} of {candidates} train candidates cleared dissimilarity {} against {} test puzzles \
                 (rate {rate:.2e}); relax the threshold or shrink the test set",
                train.len(),
                spec.threshold,
                spec.n_test
            )));
        }
        let rec = make((spec.n_test + candidates) as u64)?;
        candidates += 1;
        let bits = rec.puzzle.element_bits();
        if test_bits.iter().all(|&t| jaccard_bits(bits, t) > spec.threshold) {
            train.push(rec);
        }
    }
    Ok(Split { train, test, candidates })
}

/// Largest Jaccard similarity between any test and any train puzzle,
/// recomputed pairwise.
pub fn max_cross_similarity(split: &Split) -> f64 {
    let mut worst: f64 = 0.0;
    for t in &split.test {
        for r in &split.train {
            worst = worst.max(1.0 - jaccard_dissimilarity(&t.puzzle, &r.puzzle));
        }
    }
    worst
}

/// Tokens in row-major order plus the class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tokenized {
    pub tokens: [usize; N_CELLS],
    pub label: usize,
    pub probe_index: usize,
}

pub fn tokenize(puzzle: &Puzzle) -> Tokenized {
    let mut tokens = [0; N_CELLS];
    for (t, c) in tokens.iter_mut().zip(&puzzle.cells) {
        *t = c.code();
    }
    Tokenized {
        tokens,
        label: puzzle.solution as usize,
        probe_index: puzzle.probe_index,
    }
}

pub fn detokenize(tok: &Tokenized) -> Result<Puzzle> {
    let mut cells = [Cell::Blank; N_CELLS];
    for (c, &t) in cells.iter_mut().zip(&tok.tokens) {
        *c = Cell::from_code(t).ok_or(Error::Index {
            index: t,
            bound: VOCAB_SIZE,
        })?;
    }
    let puzzle = Puzzle::from_cells(cells)?;
    if puzzle.solution as usize != tok.label {
        return Err(Error::contract("label disagrees with the unique solution"));
    }
    Ok(puzzle)
}

const CSV_HEADER: &str = "c0,c1,c2,c3,c4,c5,c6,c7,c8,c9,c10,c11,c12,c13,c14,c15,probe,solution,complexity,seed";

/// Writes puzzles as CSV: 16 cell codes (0-3 symbol, 4 blank, 5 probe),
/// probe index, solution, complexity, generation seed.
pub fn write_dataset<W: Write>(mut w: W, records: &[PuzzleRecord]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for rec in records {
        let p = &rec.puzzle;
        for c in &p.cells {
            write!(w, "{},", c.code())?;
        }
        writeln!(w, "{},{},{},{}", p.probe_index, p.solution, p.complexity.level(), rec.seed)?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R, origin: &str) -> Result<Vec<PuzzleRecord>> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if i == 0 {
            if line.trim() != CSV_HEADER {
                return Err(parse_err(lineno, "unexpected header".into()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != N_CELLS + 4 {
            return Err(parse_err(lineno, format!("expected {} fields, got {}", N_CELLS + 4, fields.len())));
        }
        let num = |s: &str| s.trim().parse::<u64>().map_err(|e| parse_err(lineno, format!("{s:?}: {e}")));
        let mut cells = [Cell::Blank; N_CELLS];
        for (k, cell) in cells.iter_mut().enumerate() {
            let code = num(fields[k])? as usize;
            *cell = Cell::from_code(code).ok_or_else(|| parse_err(lineno, format!("bad cell code {code}")))?;
        }
        let puzzle = Puzzle {
            cells,
            probe_index: num(fields[N_CELLS])? as usize,
            solution: num(fields[N_CELLS + 1])? as u8,
            complexity: Complexity::from_level(num(fields[N_CELLS + 2])? as u8)
                .map_err(|e| parse_err(lineno, e.to_string()))?,
        };
        puzzle.validate().map_err(|e| parse_err(lineno, e.to_string()))?;
        out.push(PuzzleRecord {
            puzzle,
            seed: num(fields[N_CELLS + 3])?,
        });
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, records: &[PuzzleRecord]) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(file, records)
}

pub fn load_dataset(path: &Path) -> Result<Vec<PuzzleRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_dataset(file, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: [&str; 4]) -> [Cell; N_CELLS] {
        let mut cells = [Cell::Blank; N_CELLS];
        for (r, row) in rows.iter().enumerate() {
            for (c, ch) in row.chars().enumerate() {
                cells[r * SIDE + c] = match ch {
                    'A'..='D' => Cell::Symbol(ch as u8 - b'A'),
                    '?' => Cell::Probe,
                    _ => Cell::Blank,
                };
            }
        }
        cells
    }

    #[test]
    fn there_are_576_squares_and_4_reduced() {
        let all = enumerate_latin_squares();
        assert_eq!(all.len(), 576);
        assert!(all.iter().all(LatinSquare::is_valid));
        assert_eq!(all.iter().filter(|s| s.is_reduced()).count(), 4);
        let unique: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(unique.len(), 576);
    }

    #[test]
    fn solve_row_deduction_is_singleton() {
        let cells = grid(["AB?D", "....", "....", "...."]);
        assert_eq!(solve(&cells).unwrap(), SymbolSet(1 << 2));
    }

    #[test]
    fn solve_empty_grid_allows_everything() {
        let cells = grid(["?...", "....", "....", "...."]);
        assert_eq!(solve(&cells).unwrap().len(), 4);
    }

    #[test]
    fn two_vector_layout_is_singleton() {
        // Row shows A and B, column shows C: probe must be D.
        let cells = grid(["AB.?", "...C", "....", "...."]);
        assert_eq!(solve(&cells).unwrap().single(), Some(3));
        assert_eq!(classify_complexity(&cells).unwrap(), Complexity::Two);
    }

    #[test]
    fn contradictions_are_reported() {
        let cells = grid(["AA.?", "....", "....", "...."]);
        assert!(matches!(solve(&cells), Err(Error::Contradictory)));
        // Each line is fine on its own but no completion exists: the probe
        // row forbids A, B, C and the column forbids D.
        let cells = grid(["ABC?", "...D", "....", "...."]);
        assert!(matches!(solve(&cells), Err(Error::Contradictory)));
    }

    #[test]
    fn complexity_levels() {
        assert_eq!(classify_complexity(&grid(["ABC?", "....", "....", "...."])).unwrap(), Complexity::One);
        assert_eq!(classify_complexity(&grid(["?...", "B...", "C...", "D..."])).unwrap(), Complexity::One);
        // Probe row and column expose only A and B; column 3 forces D at
        // (0,3), and only then is the probe fixed to C.
        let cells = grid(["?A..", "B..C", "...B", "...."]);
        assert_eq!(solve(&cells).unwrap().single(), Some(2));
        assert_eq!(classify_complexity(&cells).unwrap(), Complexity::Three);
    }

    #[test]
    fn three_vector_puzzle_found_by_search() {
        // Exhaustive search for a uniquely solvable grid whose probe row and
        // column together expose exactly two distinct symbols.
        let p = generate_puzzle(Complexity::Three, 11, &GeneratorConfig::default()).unwrap();
        let (r, c) = (p.probe_index / SIDE, p.probe_index % SIDE);
        let row = line_symbols(&p.cells, (0..SIDE).map(|k| r * SIDE + k));
        let col = line_symbols(&p.cells, (0..SIDE).map(|k| k * SIDE + c));
        assert!((row | col).count_ones() < 3);
        assert_eq!(solve(&p.cells).unwrap().len(), 1);
    }

    #[test]
    fn unsolvable_puzzles_cannot_be_classified() {
        let cells = grid(["?...", "....", "....", "...."]);
        assert!(matches!(classify_complexity(&cells), Err(Error::Contract(_))));
    }

    #[test]
    fn generated_puzzles_satisfy_invariants() {
        let cfg = GeneratorConfig::default();
        for seed in 0..300u64 {
            let level = Complexity::ALL[(seed % 3) as usize];
            let p = generate_puzzle(level, seed, &cfg).unwrap();
            p.validate().unwrap();
            assert_eq!(p.complexity, level);
            assert_eq!(generate_puzzle(level, seed, &cfg).unwrap(), p);
        }
    }

    #[test]
    fn jaccard_examples() {
        let p = generate_puzzle(Complexity::One, 3, &GeneratorConfig::default()).unwrap();
        assert_eq!(jaccard_dissimilarity(&p, &p), 0.0);
        assert_eq!(jaccard_bits(0b0011, 0b1100), 1.0);
        assert!((jaccard_bits(0b0111, 0b1011) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tokenize_is_row_major() {
        let cells = grid(["?BCD", "....", "....", "...."]);
        let p = Puzzle::from_cells(cells).unwrap();
        let t = tokenize(&p);
        assert_eq!(t.tokens[0], TOKEN_PROBE);
        assert_eq!(t.tokens[1], 1);
        assert_eq!(t.tokens[4 * 2 + 3], TOKEN_BLANK);
        assert_eq!(t.label, 0);
        assert_eq!(detokenize(&t).unwrap(), p);
    }

    #[test]
    fn split_respects_threshold_and_sizes() {
        let spec = SplitSpec {
            n_train: 300,
            n_test: 40,
            seed: 5,
            ..SplitSpec::default()
        };
        let split = build_split(&spec).unwrap();
        assert_eq!(split.train.len(), 300);
        assert_eq!(split.test.len(), 40);
        for t in &split.test {
            for r in &split.train {
                assert!(jaccard_dissimilarity(&t.puzzle, &r.puzzle) > 0.8);
            }
        }
        assert!(max_cross_similarity(&split) < 0.2);
    }

    #[test]
    fn strict_threshold_exhausts_the_candidate_budget() {
        let spec = SplitSpec {
            n_train: 50,
            n_test: 20,
            threshold: 0.999,
            seed: 1,
            max_candidates: 2_000,
            ..SplitSpec::default()
        };
        assert!(matches!(build_split(&spec), Err(Error::Budget(_))));
    }

    #[test]
    fn dataset_csv_round_trip() {
        let spec = SplitSpec {
            n_train: 20,
            n_test: 0,
            seed: 9,
            ..SplitSpec::default()
        };
        let split = build_split(&spec).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &split.train).unwrap();
        let back = read_dataset(buf.as_slice(), "mem").unwrap();
        assert_eq!(back, split.train);
    }

    #[test]
    fn malformed_dataset_lines_are_located() {
        let text = format!("{CSV_HEADER}\n4,4,4,4,4,4,4,4,4,4,4,4,4,4,4,5,15,0,1\n");
        match read_dataset(text.as_bytes(), "x.csv") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}

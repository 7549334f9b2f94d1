//! Plain-text labelled tree files.
//!
//! ```text
//! # comment
//! %dim 2          optional when a refined cell is listed
//! %k 2            optional when a refined cell is listed
//! %root A         optional, defaults to the first listed label
//! A: B,D,C,E      children of A in key order
//! ```

use std::collections::{HashMap, HashSet};
use std::path::Path;

use thiserror::Error;

use crate::sfc::{CellCode, Grid, Partitioning, SfcError};

pub const LETTERED: &str = include_str!("../fixtures/lettered.tree");

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("refined cell `{label}` has {found} children, expected {expected}")]
    ChildCount { label: String, found: usize, expected: usize },
    #[error("label `{0}` is used twice")]
    DuplicateLabel(String),
    #[error("label `{0}` is refined but never reached from the root")]
    Unreachable(String),
    #[error("fixture does not determine dimension and subdivision factor")]
    MissingGeometry,
    #[error(transparent)]
    Sfc(#[from] SfcError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct Fixture {
    grid: Grid,
    root: String,
    by_label: HashMap<String, CellCode>,
    by_code: HashMap<CellCode, String>,
    refined: HashSet<CellCode>,
}

fn infer_grid(children: usize) -> Option<Grid> {
    for k in [2u32, 3] {
        let mut n = k as usize;
        let mut d = 1;
        while n < children {
            n *= k as usize;
            d += 1;
        }
        if n == children && d >= 2 {
            return Grid::new(d, Partitioning::from_k(k).ok()?).ok();
        }
    }
    None
}

impl Fixture {
    pub fn parse(text: &str) -> Result<Self, FixtureError> {
        let mut dim = None;
        let mut k = None;
        let mut root = None;
        let mut entries: Vec<(usize, String, Vec<String>)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let malformed = |message: &str| FixtureError::Malformed { line: line_no, message: message.to_string() };
            if let Some(directive) = line.strip_prefix('%') {
                let mut parts = directive.split_whitespace();
                let key = parts.next().ok_or_else(|| malformed("empty directive"))?;
                let value = parts.next().ok_or_else(|| malformed("directive without value"))?;
                match key {
                    "dim" => dim = Some(value.parse::<usize>().map_err(|_| malformed("bad dimension"))?),
                    "k" => k = Some(value.parse::<u32>().map_err(|_| malformed("bad k"))?),
                    "root" => root = Some(value.to_string()),
                    _ => return Err(malformed("unknown directive")),
                }
                continue;
            }
            let (label, children) = line.split_once(':').ok_or_else(|| malformed("expected `LABEL: children`"))?;
            let label = label.trim();
            if label.is_empty() || label.contains(char::is_whitespace) {
                return Err(malformed("bad label"));
            }
            let children: Vec<String> = children.split(',').map(|c| c.trim().to_string()).collect();
            if children.iter().any(|c| c.is_empty() || c.contains(char::is_whitespace)) {
                return Err(malformed("bad child label"));
            }
            entries.push((line_no, label.to_string(), children));
        }

        let grid = match (dim, k, entries.first()) {
            (Some(d), Some(k), _) => Grid::new(d, Partitioning::from_k(k)?)?,
            (_, _, Some((_, _, kids))) => infer_grid(kids.len()).ok_or(FixtureError::ChildCount {
                label: entries[0].1.clone(),
                found: kids.len(),
                expected: 0,
            })?,
            _ => return Err(FixtureError::MissingGeometry),
        };
        let root = root
            .or_else(|| entries.first().map(|e| e.1.clone()))
            .ok_or(FixtureError::MissingGeometry)?;

        let mut children_of: HashMap<String, Vec<String>> = HashMap::new();
        for (_, label, kids) in &entries {
            if kids.len() != grid.children() {
                return Err(FixtureError::ChildCount {
                    label: label.clone(),
                    found: kids.len(),
                    expected: grid.children(),
                });
            }
            if children_of.insert(label.clone(), kids.clone()).is_some() {
                return Err(FixtureError::DuplicateLabel(label.clone()));
            }
        }

        let mut by_label = HashMap::new();
        let mut by_code = HashMap::new();
        let mut refined = HashSet::new();
        let mut stack = vec![(root.clone(), CellCode::root(grid))];
        while let Some((label, code)) = stack.pop() {
            if by_label.insert(label.clone(), code).is_some() {
                return Err(FixtureError::DuplicateLabel(label));
            }
            by_code.insert(code, label.clone());
            if let Some(kids) = children_of.get(&label) {
                if code.level() + 1 > grid.max_level() {
                    return Err(SfcError::LevelOverflow(code.level() + 1).into());
                }
                refined.insert(code);
                for (i, kid) in kids.iter().enumerate() {
                    stack.push((kid.clone(), code.child(i)));
                }
            }
        }
        for (_, label, _) in &entries {
            if !by_label.contains_key(label) {
                return Err(FixtureError::Unreachable(label.clone()));
            }
        }
        Ok(Fixture { grid, root, by_label, by_code, refined })
    }

    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The shipped 25-cell quadtree.
    pub fn lettered() -> Self {
        Self::parse(LETTERED).expect("shipped fixture parses")
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn root_label(&self) -> &str {
        &self.root
    }

    pub fn code(&self, label: &str) -> Option<CellCode> {
        self.by_label.get(label).copied()
    }

    pub fn label(&self, code: &CellCode) -> Option<&str> {
        self.by_code.get(code).map(String::as_str)
    }

    pub fn refined(&self) -> &HashSet<CellCode> {
        &self.refined
    }

    pub fn cell_count(&self) -> usize {
        self.by_code.len()
    }

    pub fn labels_of(&self, codes: &[CellCode]) -> Vec<String> {
        codes
            .iter()
            .map(|c| self.label(c).map(str::to_string).unwrap_or_else(|| c.to_string()))
            .collect()
    }
}

//! Grid output as VTK legacy ASCII unstructured grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::events::{Cell, Coarse, Ctx, EventMapping, EventResult, MappingError, Vertex};
use crate::sfc::{CellCode, VertexKey};
use crate::storage::{FieldId, FieldType, Layout, Record, StorageError};

/// Collects leaf cells (or all cells) and their vertices during one traversal
/// and writes them at `end_iteration`. Points are keyed by vertex identity, so
/// a coarse and a fine vertex at the same position are distinct points.
pub struct Plot {
    path: Option<PathBuf>,
    names: Vec<String>,
    fields: Vec<(FieldId, FieldType)>,
    all_levels: bool,
    points: BTreeMap<VertexKey, (usize, Vec<f64>)>,
    cells: Vec<(CellCode, Vec<usize>)>,
    last: Option<String>,
}

impl Plot {
    /// Writes to `path` after every traversal; `None` only keeps the text.
    pub fn new(path: Option<PathBuf>) -> Self {
        Plot {
            path,
            names: Vec::new(),
            fields: Vec::new(),
            all_levels: false,
            points: BTreeMap::new(),
            cells: Vec::new(),
            last: None,
        }
    }

    /// Adds a vertex field as point scalars. The field must be registered by
    /// a mapping composed before this one.
    pub fn with_field(mut self, name: &str) -> Self {
        self.names.push(name.to_string());
        self
    }

    /// Plots refined cells as well, each on its own level.
    pub fn all_levels(mut self) -> Self {
        self.all_levels = true;
        self
    }

    /// Text of the most recent file.
    pub fn last(&self) -> Option<&str> {
        self.last.as_deref()
    }

    fn point(&mut self, v: &Vertex) -> usize {
        let n = self.points.len();
        let values = self.fields.iter().map(|&(id, ty)| value(&v.data, id, ty)).collect();
        let entry = self.points.entry(v.key).or_insert((n, Vec::new()));
        entry.1 = values;
        entry.0
    }

    fn render(&self) -> Result<String, MappingError> {
        let Some((first, _)) = self.cells.first() else {
            return Err(MappingError::new("nothing to plot"));
        };
        let dim = first.dim();
        let (kind, order): (u8, &[usize]) = match dim {
            1 => (3, &[0, 1]),
            2 => (9, &[0, 1, 3, 2]),
            3 => (12, &[0, 1, 3, 2, 4, 5, 7, 6]),
            d => return Err(MappingError::new(format!("cannot plot {d}-dimensional cells"))),
        };
        let mut sorted: Vec<(usize, &VertexKey, &Vec<f64>)> = self.points.iter().map(|(k, (i, vs))| (*i, k, vs)).collect();
        sorted.sort_by_key(|p| p.0);
        let by_index: Vec<(&VertexKey, &Vec<f64>)> = sorted.iter().map(|p| (p.1, p.2)).collect();

        let mut out = String::new();
        let _ = writeln!(out, "# vtk DataFile Version 3.0");
        let _ = writeln!(out, "spacetree grid");
        let _ = writeln!(out, "ASCII");
        let _ = writeln!(out, "DATASET UNSTRUCTURED_GRID");
        let _ = writeln!(out, "POINTS {} double", by_index.len());
        for (key, _) in &by_index {
            let mut x = key.position();
            x.resize(3, 0.0);
            let _ = writeln!(out, "{} {} {}", x[0], x[1], x[2]);
        }
        let per = order.len();
        let _ = writeln!(out, "CELLS {} {}", self.cells.len(), self.cells.len() * (per + 1));
        for (_, ids) in &self.cells {
            let line: Vec<String> = order.iter().map(|&o| ids[o].to_string()).collect();
            let _ = writeln!(out, "{per} {}", line.join(" "));
        }
        let _ = writeln!(out, "CELL_TYPES {}", self.cells.len());
        for _ in &self.cells {
            let _ = writeln!(out, "{kind}");
        }
        let _ = writeln!(out, "CELL_DATA {}", self.cells.len());
        let _ = writeln!(out, "SCALARS level int 1");
        let _ = writeln!(out, "LOOKUP_TABLE default");
        for (c, _) in &self.cells {
            let _ = writeln!(out, "{}", c.level());
        }
        if !self.names.is_empty() {
            let _ = writeln!(out, "POINT_DATA {}", by_index.len());
            for (f, name) in self.names.iter().enumerate() {
                let _ = writeln!(out, "SCALARS {name} double 1");
                let _ = writeln!(out, "LOOKUP_TABLE default");
                for (_, values) in &by_index {
                    let _ = writeln!(out, "{}", values[f]);
                }
            }
        }
        Ok(out)
    }
}

fn value(r: &Record, id: FieldId, ty: FieldType) -> f64 {
    match ty {
        FieldType::F64 => r.f64(id),
        FieldType::I64 => r.i64(id) as f64,
    }
}

impl EventMapping for Plot {
    fn register(&mut self, layout: &mut Layout) -> Result<(), StorageError> {
        self.fields = self
            .names
            .iter()
            .map(|n| {
                let id = layout.vertex.id(n)?;
                Ok((id, layout.vertex.spec(id).ty))
            })
            .collect::<Result<_, StorageError>>()?;
        Ok(())
    }

    fn begin_iteration(&mut self, _state: &mut Record) -> EventResult {
        self.points.clear();
        self.cells.clear();
        Ok(())
    }

    fn leave_cell(&mut self, _ctx: &mut Ctx, cell: &mut Cell, vertices: &mut [Vertex], _coarse: Option<Coarse>) -> EventResult {
        if cell.refined && !self.all_levels {
            return Ok(());
        }
        let ids = vertices.iter().map(|v| self.point(v)).collect();
        self.cells.push((cell.code, ids));
        Ok(())
    }

    fn end_iteration(&mut self, _state: &mut Record) -> EventResult {
        let text = self.render()?;
        if let Some(p) = &self.path {
            std::fs::write(p, &text)?;
        }
        self.last = Some(text);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Adapter;
    use crate::sfc::{Curve, Grid, Partitioning, TraversalOrder};
    use crate::spacetree::Spacetree;
    use crate::traversal::TraversalOptions;

    #[test]
    fn root_only_square() {
        let grid = Grid::new(2, Partitioning::from_k(3).unwrap()).unwrap();
        let mut tree = Spacetree::new(grid, Curve::Morton, TraversalOrder::DepthFirst, Layout::default()).unwrap();
        let mut a = Adapter::new(vec![Box::new(Plot::new(None))]).unwrap();
        tree.traverse(&mut a, &TraversalOptions::serial()).unwrap();
        let text = a.find::<Plot>().unwrap().last().unwrap().to_string();
        assert!(text.contains("POINTS 4 double"));
        assert!(text.contains("CELLS 1 5\n4 0 1 3 2\n"));
        assert!(text.contains("CELL_TYPES 1\n9\n"));
    }
}

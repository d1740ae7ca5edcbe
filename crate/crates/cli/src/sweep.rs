//! Cartesian parameter sweeps.

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{Map, Value};

use crate::config::{parse_config_str, Override};
use crate::csv::export_csv;
use crate::error::{CliError, CliResult};
use crate::execute;

/// Ordered `key -> values` grid; keys use the `--set` syntax.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub entries: Vec<(String, Vec<Value>)>,
}

impl<'de> Deserialize<'de> for Grid {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Grid;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping keys to value lists")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Grid, A::Error> {
                let mut entries: Vec<(String, Vec<Value>)> = Vec::new();
                while let Some((k, vs)) = map.next_entry::<String, Vec<Value>>()? {
                    if entries.iter().any(|(e, _)| *e == k) {
                        return Err(de::Error::custom(format!("duplicate grid key `{k}`")));
                    }
                    entries.push((k, vs));
                }
                Ok(Grid { entries })
            }
        }
        d.deserialize_map(V)
    }
}

fn overlaps(a: &str, b: &str) -> bool {
    a == b || a.starts_with(&format!("{b}.")) || b.starts_with(&format!("{a}."))
}

impl Grid {
    pub fn parse(text: &str, origin: &str) -> CliResult<Self> {
        let grid: Grid = serde_json::from_str(text).map_err(|e| CliError::parse(origin, &e))?;
        grid.validate(&[])?;
        Ok(grid)
    }

    /// Nonempty, every list nonempty, and no key overlapping another key or
    /// a fixed override.
    pub fn validate(&self, fixed: &[Override]) -> CliResult<()> {
        if self.entries.is_empty() {
            return Err(CliError::Config("sweep grid is empty".into()));
        }
        for (i, (k, vs)) in self.entries.iter().enumerate() {
            if vs.is_empty() {
                return Err(CliError::Config(format!("grid key `{k}` has no values")));
            }
            for (other, _) in &self.entries[i + 1..] {
                if overlaps(k, other) {
                    return Err(CliError::Config(format!("conflicting grid keys `{k}` and `{other}`")));
                }
            }
            for ov in fixed {
                if overlaps(k, &ov.key()) {
                    return Err(CliError::Config(format!(
                        "grid key `{k}` conflicts with override `{}`",
                        ov.key()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Cartesian product, last key varying fastest.
    pub fn cells(&self) -> CliResult<Vec<Vec<Override>>> {
        let mut cells: Vec<Vec<Override>> = vec![Vec::new()];
        for (k, vs) in &self.entries {
            let mut next = Vec::with_capacity(cells.len() * vs.len());
            for cell in &cells {
                for v in vs {
                    let mut c = cell.clone();
                    c.push(Override::new(k, v.clone())?);
                    next.push(c);
                }
            }
            cells = next;
        }
        Ok(cells)
    }
}

fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// `cell003_tau=5_N=2.csv`-style file name.
pub fn cell_file_name(index: usize, overrides: &[Override]) -> String {
    let mut name = format!("cell{index:03}");
    for ov in overrides {
        name.push('_');
        name.push_str(&ov.key());
        name.push('=');
        name.push_str(&render_value(&ov.value));
    }
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._=-".contains(c) { c } else { '-' })
        .collect();
    format!("{clean}.csv")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellRecord {
    pub index: usize,
    pub overrides: Map<String, Value>,
    pub csv: Option<String>,
    pub rounds_total: Option<u64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepIndex {
    pub cells: Vec<CellRecord>,
}

impl SweepIndex {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }
}

/// Run every grid cell on top of the base config and write one CSV per cell
/// plus `index.json` (written last) into `out_dir`.
///
/// Configuration errors in any cell abort before anything runs; failures
/// while running (divergence) are recorded in the index.
pub fn sweep(base_text: &str, origin: &str, fixed: &[Override], grid: &Grid, out_dir: &Path) -> CliResult<SweepIndex> {
    grid.validate(fixed)?;
    let cells = grid.cells()?;
    let experiments = cells
        .iter()
        .map(|cell| {
            let all: Vec<Override> = fixed.iter().chain(cell).cloned().collect();
            parse_config_str(base_text, origin, &all)
        })
        .collect::<CliResult<Vec<_>>>()?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;

    let records = experiments
        .par_iter()
        .zip(cells.par_iter())
        .enumerate()
        .map(|(index, (exp, cell))| {
            let overrides: Map<String, Value> = cell.iter().map(|o| (o.key(), o.value.clone())).collect();
            match execute(exp) {
                Ok(report) => {
                    let name = cell_file_name(index, cell);
                    let path: PathBuf = out_dir.join(&name);
                    export_csv(&report, &path)?;
                    Ok(CellRecord {
                        index,
                        overrides,
                        csv: Some(name),
                        rounds_total: Some(report.ledger.rounds_total),
                        error: None,
                    })
                }
                Err(e @ CliError::Io { .. }) => Err(e),
                Err(e) => Ok(CellRecord {
                    index,
                    overrides,
                    csv: None,
                    rounds_total: None,
                    error: Some(e.to_string()),
                }),
            }
        })
        .collect::<CliResult<Vec<_>>>()?;
    let index = SweepIndex { cells: records };
    let path = out_dir.join("index.json");
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csv::parse_csv;

    const BASE: &str = r#"{"problem": {"kind": "quadratic", "d1": 3, "d2": 3, "m": 2}, "K": 4, "N": 2, "seed": 5}"#;

    #[test]
    fn tau_grid_gives_two_runs() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::parse(r#"{"tau": [1, 5]}"#, "grid").unwrap();
        let index = sweep(BASE, "base", &[], &grid, dir.path()).unwrap();
        assert_eq!(index.cells.len(), 2);
        assert_eq!(index.cells[0].csv.as_deref(), Some("cell000_tau=1.csv"));
        assert_eq!(index.cells[1].csv.as_deref(), Some("cell001_tau=5.csv"));
        assert!(dir.path().join("index.json").exists());
        for c in &index.cells {
            let rows = parse_csv(&std::fs::read_to_string(dir.path().join(c.csv.as_ref().unwrap())).unwrap()).unwrap();
            assert_eq!(rows.len(), 5);
        }
    }

    #[test]
    fn cells_differ_only_in_the_swept_key() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::parse(r#"{"tau": [2, 2]}"#, "grid").unwrap();
        let index = sweep(BASE, "base", &[], &grid, dir.path()).unwrap();
        let read = |c: &CellRecord| std::fs::read(dir.path().join(c.csv.as_ref().unwrap())).unwrap();
        assert_eq!(read(&index.cells[0]), read(&index.cells[1]));
    }

    #[test]
    fn cartesian_order() {
        let grid = Grid::parse(r#"{"tau": [1, 2], "N": [3, 4, 5]}"#, "grid").unwrap();
        let cells = grid.cells().unwrap();
        assert_eq!(cells.len(), 6);
        let names: Vec<String> = cells.iter().enumerate().map(|(i, c)| cell_file_name(i, c)).collect();
        assert_eq!(names[0], "cell000_tau=1_N=3.csv");
        assert_eq!(names[1], "cell001_tau=1_N=4.csv");
        assert_eq!(names[5], "cell005_tau=2_N=5.csv");
    }

    #[test]
    fn invalid_grids() {
        assert!(Grid::parse("{}", "g").is_err());
        assert!(Grid::parse(r#"{"tau": []}"#, "g").is_err());
        assert!(Grid::parse(r#"{"tau": 1}"#, "g").is_err());
        assert!(Grid::parse(r#"{"tau": [1], "tau": [2]}"#, "g").is_err());
        assert!(Grid::parse(r#"{"problem": ["quadratic"], "problem.d1": [2]}"#, "g").is_err());
        let grid = Grid::parse(r#"{"tau": [1]}"#, "g").unwrap();
        let fixed: Override = "tau=3".parse().unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(sweep(BASE, "base", &[fixed], &grid, dir.path()).is_err());
        let bad = Grid::parse(r#"{"beta": [10.0]}"#, "g").unwrap();
        assert!(sweep(BASE, "base", &[], &bad, dir.path()).is_err());
        assert!(!dir.path().join("index.json").exists());
    }

    #[test]
    fn divergent_cells_are_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::parse(r#"{"alpha": [0.01, 500.0]}"#, "grid").unwrap();
        let base = r#"{"problem": {"kind": "quadratic", "d1": 3, "d2": 3, "m": 2}, "K": 300, "N": 2}"#;
        let index = sweep(base, "base", &[], &grid, dir.path()).unwrap();
        assert_eq!(index.failures(), 1);
        assert!(index.cells[1].error.as_ref().unwrap().contains("iteration"));
    }
}

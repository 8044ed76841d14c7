//! CSV, field dumps and JSON records for one run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use snctl_core::mesh::{Grid, SpaceTimeField};

/// Seventeen significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// In-memory CSV table.
#[derive(Clone, Debug, PartialEq)]
pub struct Csv {
    pub header: &'static str,
    pub rows: Vec<String>,
}

pub enum Cell {
    Int(u64),
    Float(f64),
    Text(String),
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl Csv {
    pub fn new(header: &'static str) -> Self {
        Self {
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, cells: impl IntoIterator<Item = Cell>) {
        let row: Vec<String> = cells
            .into_iter()
            .map(|c| match c {
                Cell::Int(i) => i.to_string(),
                Cell::Float(f) => fmt_f64(f),
                Cell::Text(t) => t,
            })
            .collect();
        self.rows.push(row.join(","));
    }

    /// Rows without the header.
    pub fn body(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    pub fn render(&self) -> String {
        format!("{}\n{}", self.header, self.body())
    }
}

/// `# mx my nt` header (interior counts), then one line of interior values per time level.
pub fn render_field(grid: &Grid, f: &SpaceTimeField) -> String {
    let (mx, my) = grid.interior_shape();
    let mut s = format!("# {mx} {my} {}\n", grid.nt());
    for k in 0..f.nt() + 1 {
        let line: Vec<String> = f.level(k).iter().map(|v| fmt_f64(*v)).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

/// Everything a run writes, collected before touching the disk.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub csv: Vec<(&'static str, Csv)>,
    pub fields: Vec<(String, String)>,
    pub summary: serde_json::Value,
}

impl Artifacts {
    pub fn csv(&self, name: &str) -> Option<&Csv> {
        self.csv.iter().find(|(n, _)| *n == name).map(|(_, c)| c)
    }

    pub fn add_field(&mut self, grid: &Grid, name: &str, f: &SpaceTimeField) {
        self.fields.push((format!("{name}.txt"), render_field(grid, f)));
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    fs::write(path, text + "\n")
}

/// Writes the manifest, CSV tables, field dumps and summary into `dir`.
pub fn write_run(dir: &Path, manifest: &impl Serialize, art: &Artifacts) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("manifest.json"), manifest)?;
    for (name, table) in &art.csv {
        fs::write(dir.join(name), table.render())?;
    }
    for (name, text) in &art.fields {
        fs::write(dir.join(name), text)?;
    }
    write_json(&dir.join("summary.json"), &art.summary)
}

#[derive(Serialize)]
pub struct ErrorRecord<'a> {
    pub status: &'static str,
    pub kind: &'a str,
    pub message: String,
}

pub fn write_error(dir: &Path, kind: &str, message: String) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    write_json(
        &dir.join("error.json"),
        &ErrorRecord {
            status: "error",
            kind,
            message,
        },
    )
}

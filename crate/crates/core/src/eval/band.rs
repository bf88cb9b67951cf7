//! Rhythm bands: one strip per source (reference, each model) coloured by class per epoch.

use std::fmt::Write as _;
use std::path::Path;

use super::EvalError;

const WIDTH: f64 = 1000.0;
const GUTTER: f64 = 140.0;
const ROW_H: f64 = 28.0;
const ROW_GAP: f64 = 8.0;
const UNKNOWN_COLOR: &str = "#c8c8c8";
const PALETTE: [&str; 6] = ["#8c564b", "#ff7f0e", "#17becf", "#bcbd22", "#7f7f7f", "#e377c2"];

fn class_color(name: &str, index: usize) -> &'static str {
    match name {
        "N" => "#4daf4a",
        "AF" => "#e41a1c",
        "AFLT" => "#377eb8",
        "SVTA" => "#984ea3",
        _ => PALETTE[index % PALETTE.len()],
    }
}

/// Number of positions where consecutive entries differ.
pub fn fragmentation(row: &[Option<usize>]) -> usize {
    row.windows(2).filter(|w| w[0] != w[1]).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandData {
    pub class_names: Vec<String>,
    /// `(source name, per-epoch class)`; `None` is unknown. Empty rows are allowed.
    pub rows: Vec<(String, Vec<Option<usize>>)>,
}

impl BandData {
    pub fn new(class_names: Vec<String>) -> Self {
        Self { class_names, rows: Vec::new() }
    }

    fn n_epochs(&self) -> usize {
        self.rows.iter().map(|r| r.1.len()).max().unwrap_or(0)
    }

    pub fn add_row(&mut self, name: &str, classes: Vec<Option<usize>>) -> Result<(), EvalError> {
        if name.contains([',', '\n', '"']) {
            return Err(EvalError::Argument(format!("row name {name:?} cannot be stored in CSV")));
        }
        if classes.iter().flatten().any(|&c| c >= self.class_names.len()) {
            return Err(EvalError::Argument(format!("row {name} uses a class index outside the class list")));
        }
        let n = self.n_epochs();
        if !classes.is_empty() && n != 0 && classes.len() != n {
            return Err(EvalError::Argument(format!("row {name} has {} epochs, band has {n}", classes.len())));
        }
        self.rows.push((name.to_string(), classes));
        Ok(())
    }

    pub fn fragmentation_counts(&self) -> Vec<(String, usize)> {
        self.rows.iter().map(|(n, r)| (n.clone(), fragmentation(r))).collect()
    }

    /// Wide CSV: `epoch,<row>...`, class names per cell, blank for unknown. Empty rows are
    /// omitted.
    pub fn to_csv(&self) -> String {
        let rows: Vec<&(String, Vec<Option<usize>>)> = self.rows.iter().filter(|r| !r.1.is_empty()).collect();
        let mut out = String::from("epoch");
        for (name, _) in &rows {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for e in 0..self.n_epochs() {
            out.push_str(&e.to_string());
            for (_, r) in &rows {
                out.push(',');
                if let Some(c) = r[e] {
                    out.push_str(&self.class_names[c]);
                }
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`BandData::to_csv`] output; classes are numbered in order of first use unless
    /// `class_names` fixes the order.
    pub fn from_csv(text: &str, class_names: Option<&[String]>) -> Result<Self, EvalError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| EvalError::Argument("empty band CSV".into()))?;
        let mut cols = header.split(',');
        if cols.next() != Some("epoch") {
            return Err(EvalError::Argument("band CSV must start with an epoch column".into()));
        }
        let names: Vec<String> = cols.map(str::to_string).collect();
        let mut classes: Vec<String> = class_names.map(<[String]>::to_vec).unwrap_or_default();
        let fixed = class_names.is_some();
        let mut rows: Vec<Vec<Option<usize>>> = vec![Vec::new(); names.len()];
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != names.len() + 1 || cells[0].parse::<usize>().ok() != Some(i) {
                return Err(EvalError::Argument(format!("band CSV line {}: malformed", i + 2)));
            }
            for (row, cell) in rows.iter_mut().zip(&cells[1..]) {
                if cell.is_empty() {
                    row.push(None);
                    continue;
                }
                let idx = match classes.iter().position(|c| c == cell) {
                    Some(k) => k,
                    None if !fixed => {
                        classes.push(cell.to_string());
                        classes.len() - 1
                    }
                    None => return Err(EvalError::Argument(format!("band CSV line {}: unknown class {cell}", i + 2))),
                };
                row.push(Some(idx));
            }
        }
        Ok(Self { class_names: classes, rows: names.into_iter().zip(rows).collect() })
    }

    pub fn to_svg(&self) -> String {
        let n = self.n_epochs().max(1);
        let strip = WIDTH - GUTTER - 10.0;
        let legend_y = 10.0 + self.rows.len() as f64 * (ROW_H + ROW_GAP) + 6.0;
        let height = legend_y + 30.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="13">"#
        );
        for (k, (name, row)) in self.rows.iter().enumerate() {
            let y = 10.0 + k as f64 * (ROW_H + ROW_GAP);
            let label = format!("{name} ({} changes)", fragmentation(row));
            let _ = writeln!(s, r#"<text x="4" y="{:.1}">{}</text>"#, y + ROW_H * 0.65, xml_escape(&label));
            let mut start = 0;
            while start < row.len() {
                let mut end = start + 1;
                while end < row.len() && row[end] == row[start] {
                    end += 1;
                }
                let color = row[start].map_or(UNKNOWN_COLOR, |c| class_color(&self.class_names[c], c));
                let x0 = GUTTER + strip * start as f64 / n as f64;
                let w = strip * (end - start) as f64 / n as f64;
                let _ = writeln!(s, r#"<rect x="{x0:.2}" y="{y:.1}" width="{w:.2}" height="{ROW_H}" fill="{color}"/>"#);
                start = end;
            }
        }
        let mut x = GUTTER;
        let legend = self.class_names.iter().enumerate().map(|(i, c)| (c.as_str(), class_color(c, i))).chain([("unknown", UNKNOWN_COLOR)]);
        for (name, color) in legend {
            let _ = writeln!(s, r#"<rect x="{x:.1}" y="{legend_y:.1}" width="14" height="14" fill="{color}"/>"#);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, x + 18.0, legend_y + 12.0, xml_escape(name));
            x += 30.0 + 9.0 * name.len() as f64;
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write(&self, svg: &Path, csv: Option<&Path>) -> Result<(), EvalError> {
        std::fs::write(svg, self.to_svg()).map_err(|source| EvalError::Io { path: svg.to_path_buf(), source })?;
        if let Some(csv) = csv {
            std::fs::write(csv, self.to_csv()).map_err(|source| EvalError::Io { path: csv.to_path_buf(), source })?;
        }
        Ok(())
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names() -> Vec<String> {
        ["N", "AF", "AFLT"].map(String::from).to_vec()
    }

    #[test]
    fn identical_rows_identical_cells() {
        let truth = vec![Some(0), Some(0), Some(1), None, Some(2)];
        let mut b = BandData::new(names());
        b.add_row("truth", truth.clone()).unwrap();
        b.add_row("model", truth).unwrap();
        let csv = b.to_csv();
        for line in csv.lines().skip(1) {
            let c: Vec<&str> = line.split(',').collect();
            assert_eq!(c[1], c[2]);
        }
        assert_eq!(b.fragmentation_counts(), vec![("truth".into(), 3), ("model".into(), 3)]);
        assert_eq!(BandData::from_csv(&csv, Some(&names())).unwrap(), b);
    }

    #[test]
    fn truth_only_and_mismatch() {
        let mut b = BandData::new(names());
        b.add_row("truth", vec![Some(0); 4]).unwrap();
        b.add_row("model", vec![]).unwrap();
        assert!(b.add_row("other", vec![Some(0); 3]).is_err());
        let svg = b.to_svg();
        assert!(svg.starts_with("<svg") && svg.contains("truth (0 changes)"));
    }

    proptest! {
        #[test]
        fn fragmentation_is_runs_minus_one(v in proptest::collection::vec(proptest::option::of(0usize..3), 1..60)) {
            let mut runs = 1;
            for i in 1..v.len() {
                if v[i] != v[i - 1] { runs += 1; }
            }
            prop_assert_eq!(fragmentation(&v), runs - 1);
        }
    }
}

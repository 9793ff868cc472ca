//! Minimal RFC-4180 CSV writing with stable float formatting ('.' decimal
//! separator, fixed precision), so identical runs emit identical bytes.

use std::path::Path;

use anyhow::Context;

pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.6}")
    }
}

fn escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

pub struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        CsvTable { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push_row(&mut self, fields: Vec<String>) {
        assert_eq!(fields.len(), self.header.len(), "csv row width mismatch");
        self.rows.push(fields);
    }

    pub fn to_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.header.iter().map(|f| escape(f)).collect::<Vec<_>>().join(","));
        out.push_str("\r\n");
        for row in &self.rows {
            out.push_str(&row.iter().map(|f| escape(f)).collect::<Vec<_>>().join(","));
            out.push_str("\r\n");
        }
        out
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
        std::fs::write(path, self.to_string())
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

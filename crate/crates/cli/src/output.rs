//! The one writer for an output directory, plus the manifest it leaves behind.

use std::fs;
use std::path::{Path, PathBuf};

use steered_diffusion::io::{fmt_f64, write_csv_rows, write_mask, write_pnm};
use steered_diffusion::operators::ImageShape;

use crate::error::{CliResult, Phase};

pub const VERSION: &str = concat!("steered-cli ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST: &str = "manifest.txt";

/// Ordered `key = value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    lines: Vec<(String, String)>,
}

impl Report {
    pub fn text(&mut self, key: &str, value: impl ToString) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    pub fn num(&mut self, key: &str, value: f64) {
        self.text(key, fmt_f64(value));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|v| v.parse().ok())
    }

    pub fn render(&self) -> String {
        self.lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub struct OutputDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn bytes(&mut self, name: &str, data: &[u8]) -> CliResult<()> {
        fs::write(self.root.join(name), data)?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<f64>]) -> CliResult<()> {
        let mut buf = Vec::new();
        write_csv_rows(&mut buf, header, rows).runtime()?;
        self.bytes(name, &buf)
    }

    /// CSV whose cells are already formatted.
    pub fn table(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
        let mut text = header.join(",");
        text.push('\n');
        for r in rows {
            text.push_str(&r.join(","));
            text.push('\n');
        }
        self.bytes(name, text.as_bytes())
    }

    pub fn image(&mut self, name: &str, shape: ImageShape, pixels: &[f64]) -> CliResult<()> {
        let mut buf = Vec::new();
        write_pnm(&mut buf, shape, pixels).runtime()?;
        self.bytes(name, &buf)
    }

    pub fn mask(&mut self, name: &str, side: usize, observed: &[bool]) -> CliResult<()> {
        let mut buf = Vec::new();
        write_mask(&mut buf, side, side, observed).runtime()?;
        self.bytes(name, &buf)
    }

    pub fn report(&mut self, report: &Report) -> CliResult<()> {
        self.bytes("report.txt", report.render().as_bytes())
    }

    /// Writes the manifest last so it lists everything above it.
    pub fn finish(mut self, command: &str, config_sha256: &str) -> CliResult<Vec<String>> {
        let mut text = format!("command = {command}\nversion = {VERSION}\nconfig_sha256 = {config_sha256}\n");
        for f in &self.files {
            text.push_str(&format!("file = {f}\n"));
        }
        fs::write(self.root.join(MANIFEST), text)?;
        self.files.push(MANIFEST.to_string());
        Ok(self.files)
    }
}

/// Image extension for a channel count.
pub fn image_ext(shape: ImageShape) -> &'static str {
    if shape.channels == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

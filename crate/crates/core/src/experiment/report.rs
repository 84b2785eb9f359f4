use std::path::Path;

use serde::Serialize;

use super::ExperimentError;

/// One output file, relative to the output directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

/// What a subcommand produced.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Report {
    pub summary: String,
    pub artifacts: Vec<Artifact>,
}

impl Report {
    pub fn artifact(&self, name: &str) -> Option<&str> {
        self.artifacts.iter().find(|a| a.name == name).map(|a| a.contents.as_str())
    }

    pub(crate) fn push(&mut self, name: &str, contents: String) {
        self.artifacts.push(Artifact { name: name.to_string(), contents });
    }

    pub(crate) fn push_csv<R: Serialize>(&mut self, name: &str, rows: &[R]) -> Result<(), ExperimentError> {
        self.push(name, to_csv(rows)?);
        Ok(())
    }

    pub(crate) fn push_json<V: Serialize>(&mut self, name: &str, value: &V) -> Result<(), ExperimentError> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|source| ExperimentError::Json { context: name.to_string(), source })?;
        text.push('\n');
        self.push(name, text);
        Ok(())
    }

    /// Writes every artifact under `dir`, creating it if needed.
    pub fn write_to(&self, dir: &Path) -> Result<(), ExperimentError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ExperimentError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        for a in &self.artifacts {
            let path = dir.join(&a.name);
            std::fs::write(&path, &a.contents).map_err(io(&path))?;
        }
        Ok(())
    }
}

pub(crate) fn to_csv<R: Serialize>(rows: &[R]) -> Result<String, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| ExperimentError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

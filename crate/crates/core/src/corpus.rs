//! Scenario corpora: the bundled demo set and on-disk directories.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::exploit::PocFile;
use crate::scenario::{parse_scenario, ParseError, Scenario};

pub struct BundledScenario {
    pub name: &'static str,
    pub source: &'static str,
    pub poc: &'static str,
}

macro_rules! bundled {
    ($($name:literal),* $(,)?) => {
        &[$(BundledScenario {
            name: $name,
            source: include_str!(concat!("../corpus/", $name, ".cda")),
            poc: include_str!(concat!("../corpus/", $name, ".poc.json")),
        }),*]
    };
}

const BUNDLED: &[BundledScenario] = bundled![
    "nvme_demo",
    "nvme_uaf_demo",
    "nvme_uninit_demo",
    "sdhci_oob_write_demo",
    "sound_overflow_demo",
    "stack_overflow_demo",
    "usbredir_demo",
    "virtio_elastic_demo",
];

impl BundledScenario {
    pub fn scenario(&self) -> Scenario {
        parse_scenario(self.source).expect("bundled scenario parses")
    }

    pub fn poc_file(&self) -> PocFile {
        PocFile::from_json(self.poc).expect("bundled PoC parses")
    }
}

pub fn bundled() -> &'static [BundledScenario] {
    BUNDLED
}

pub fn bundled_scenario(name: &str) -> Option<&'static BundledScenario> {
    BUNDLED.iter().find(|b| b.name == name)
}

/// Every bundled scenario, parsed, in name order.
pub fn bundled_corpus() -> Vec<(String, Scenario)> {
    BUNDLED.iter().map(|b| (b.name.to_string(), b.scenario())).collect()
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{source}")]
    Parse { path: PathBuf, source: ParseError },
}

pub fn load_scenario(path: &Path) -> Result<Scenario, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario(&text).map_err(|source| CorpusError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses every `.cda` file directly inside `dir`, sorted by file stem.
pub fn load_dir(dir: &Path) -> Result<Vec<(String, Scenario)>, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        if path.extension().is_some_and(|e| e == "cda") && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            load_scenario(&p).map(|s| (stem, s))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::VulnKind;
    use std::collections::BTreeSet;

    #[test]
    fn bundled_covers_every_vuln_kind() {
        let kinds: BTreeSet<VulnKind> = bundled_corpus()
            .iter()
            .map(|(_, s)| {
                assert_eq!(s.vulns.len(), 1);
                s.vulns[0].kind
            })
            .collect();
        assert_eq!(kinds.len(), VulnKind::ALL.len());
    }

    #[test]
    fn bundled_pocs_parse_with_marks() {
        for b in bundled() {
            let poc = b.poc_file();
            let (start, end) = poc.trigger.expect("golden PoCs carry marks");
            assert!(start < end && end <= poc.actions.len(), "{}", b.name);
        }
    }
}

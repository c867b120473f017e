use std::collections::BTreeMap;
use std::path::Path;

use super::{parse_sop, SopDoc, SopError};

/// Versioned store of SOP documents keyed by id.
///
/// Reads never touch `revision`; every insert or replace bumps it by one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SopAtlas {
    entries: BTreeMap<String, SopDoc>,
    revision: u64,
}

impl SopAtlas {
    pub fn new() -> Self {
        Self::default()
    }

    /// The atlas shipped with the crate (`sops/*.sop`).
    pub fn bundled() -> Self {
        let mut atlas = SopAtlas::new();
        for (name, text) in crate::fixtures::BUNDLED_SOPS {
            let doc = parse_sop(text.as_bytes())
                .unwrap_or_else(|e| panic!("bundled SOP {name} is invalid: {e}"));
            atlas.insert(doc);
        }
        atlas
    }

    /// Load every `*.sop` file in `dir`, in file-name order.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, SopError> {
        let dir = dir.as_ref();
        let io_err = |e: std::io::Error| SopError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        };
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "sop"))
            .collect();
        paths.sort();

        let mut atlas = SopAtlas::new();
        for path in paths {
            let bytes = std::fs::read(&path).map_err(|e| SopError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            atlas.insert(parse_sop(&bytes)?);
        }
        Ok(atlas)
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn docs(&self) -> impl Iterator<Item = &SopDoc> {
        self.entries.values()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn lookup(&self, id: &str) -> Result<&SopDoc, SopError> {
        self.entries
            .get(id)
            .ok_or_else(|| SopError::UnknownSop(id.to_string()))
    }

    /// Insert or replace a document; returns the new revision.
    pub fn insert(&mut self, doc: SopDoc) -> u64 {
        self.entries.insert(doc.id.clone(), doc);
        self.revision += 1;
        self.revision
    }
}

/// Free-function form of [`SopAtlas::lookup`].
pub fn atlas_lookup<'a>(atlas: &'a SopAtlas, id: &str) -> Result<&'a SopDoc, SopError> {
    atlas.lookup(id)
}

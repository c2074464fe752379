//! Dataset files, hashing and artifact writers.

use std::fs;
use std::path::{Path, PathBuf};

use affordlab::synthscene::{QueryTable, SyntheticObject};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const QUERIES: &str = "queries.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("artifact types serialize");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_bytes(path, &to_json(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Serialize CSV rows (header included) to bytes.
pub fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| CliError::Data(e.to_string()))
}

/// Fixed-precision float cell; `None` is written as `NA`.
pub fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.17e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub queries: ManifestEntry,
    pub scenes: Vec<ManifestEntry>,
}

pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub objects: Vec<SyntheticObject>,
    pub queries: QueryTable,
}

impl Dataset {
    pub fn write(
        root: &Path,
        seed: u64,
        objects: &[SyntheticObject],
        queries: &QueryTable,
    ) -> Result<Manifest, CliError> {
        let store = |name: String, bytes: Vec<u8>| -> Result<ManifestEntry, CliError> {
            write_bytes(&root.join(&name), &bytes)?;
            Ok(ManifestEntry {
                sha256: sha256_hex(&bytes),
                path: name,
            })
        };
        let queries = store(QUERIES.to_string(), to_json(queries))?;
        let scenes = objects
            .iter()
            .map(|o| store(format!("scenes/{}.scene.json", o.object_id), to_json(o)))
            .collect::<Result<Vec<_>, _>>()?;
        let manifest = Manifest {
            seed,
            count: objects.len(),
            queries,
            scenes,
        };
        write_json(&root.join(MANIFEST), &manifest)?;
        Ok(manifest)
    }

    /// Load a dataset, checking every file against its manifest hash.
    pub fn load(root: &Path) -> Result<Self, CliError> {
        let manifest: Manifest = read_json(&root.join(MANIFEST))?;
        let verified = |e: &ManifestEntry| -> Result<Vec<u8>, CliError> {
            let p = root.join(&e.path);
            let bytes = fs::read(&p).map_err(|err| CliError::io(&p, err))?;
            let got = sha256_hex(&bytes);
            if got != e.sha256 {
                return Err(CliError::Data(format!(
                    "{}: hash {got} does not match manifest {}",
                    p.display(),
                    e.sha256
                )));
            }
            Ok(bytes)
        };
        let parse = |e: &ManifestEntry, err: serde_json::Error| {
            CliError::Data(format!("{}: {err}", e.path))
        };
        let queries: QueryTable = serde_json::from_slice(&verified(&manifest.queries)?)
            .map_err(|err| parse(&manifest.queries, err))?;
        let objects = manifest
            .scenes
            .iter()
            .map(|e| {
                let obj: SyntheticObject =
                    serde_json::from_slice(&verified(e)?).map_err(|err| parse(e, err))?;
                obj.validate(&queries)?;
                Ok(obj)
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        if objects.len() != manifest.count {
            return Err(CliError::Data(format!(
                "manifest count {} but {} scenes",
                manifest.count,
                objects.len()
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            objects,
            queries,
        })
    }

    /// Object by id, or by position when `key` is an integer.
    pub fn object(&self, key: &str) -> Result<&SyntheticObject, CliError> {
        if let Some(o) = self.objects.iter().find(|o| o.object_id == key) {
            return Ok(o);
        }
        key.parse::<usize>()
            .ok()
            .and_then(|i| self.objects.get(i))
            .ok_or_else(|| CliError::Data(format!("no object {key:?} in {}", self.root.display())))
    }
}

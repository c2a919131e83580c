//! On-disk dataset bundles and the append-only run manifest.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ctrec::ctdg::{fingerprint, read_dense_events, write_events_csv, write_id_map};
use ctrec::{GraphDims, Interaction, TrainConfig};
use serde::Serialize;

use crate::CliError;

pub const EVENTS: &str = "events.csv";
pub const DIMS: &str = "dims.json";
pub const USER_MAP: &str = "user_map.csv";
pub const ITEM_MAP: &str = "item_map.csv";
pub const MANIFESTS: &str = "manifests.jsonl";

pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

pub fn write_string(path: &Path, text: &str) -> Result<(), CliError> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))?;
    f.flush().map_err(|e| io_err(path, e))
}

pub fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| io_err(path, e))
}

/// Write `events.csv`, `dims.json` and the two id maps into `dir`.
pub fn write_bundle(
    dir: &Path,
    events: &[Interaction],
    dims: GraphDims,
    user_ids: &[i64],
    item_ids: &[i64],
) -> Result<Vec<PathBuf>, CliError> {
    let paths: Vec<PathBuf> = [EVENTS, DIMS, USER_MAP, ITEM_MAP].iter().map(|f| dir.join(f)).collect();
    write_events_csv(create(&paths[0])?, events)?;
    write_string(&paths[1], &(serde_json::to_string_pretty(&dims).expect("dims serialize") + "\n"))?;
    write_id_map(create(&paths[2])?, user_ids)?;
    write_id_map(create(&paths[3])?, item_ids)?;
    Ok(paths)
}

pub fn read_bundle(dir: &Path) -> Result<(Vec<Interaction>, GraphDims), CliError> {
    let dims_path = dir.join(DIMS);
    let dims: GraphDims = serde_json::from_reader(open(&dims_path)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", dims_path.display())))?;
    let events = read_dense_events(open(&dir.join(EVENTS))?, dims)?;
    Ok((events, dims))
}

#[derive(Debug, Serialize)]
pub struct DatasetInfo {
    pub events: usize,
    pub fingerprint: String,
}

impl DatasetInfo {
    pub fn of(events: &[Interaction]) -> Self {
        DatasetInfo {
            events: events.len(),
            fingerprint: fingerprint(events),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: Option<TrainConfig>,
    pub config_hash: Option<String>,
    pub dataset: Option<DatasetInfo>,
    pub seconds: BTreeMap<String, f64>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            version: format!("ctrec {}", env!("CARGO_PKG_VERSION")),
            seed,
            config: None,
            config_hash: None,
            dataset: None,
            seconds: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn with_config(mut self, config: &TrainConfig) -> Self {
        self.config_hash = Some(config.hash());
        self.config = Some(config.clone());
        self
    }

    /// Append one JSON line to `<out_dir>/manifests.jsonl`.
    pub fn append(&self, out_dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
        let path = out_dir.join(MANIFESTS);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        let line = serde_json::to_string(self).expect("manifest serializes");
        writeln!(f, "{line}").map_err(|e| io_err(&path, e))
    }
}

//! Published models. Files are written before the in-memory pointer moves,
//! so readers always see either the old or the new complete model.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use trace_auth::harness::RunSummary;
use trace_auth::models::{load_model, save_model, TrainedModel};

#[derive(Debug)]
pub struct Published {
    pub model_id: String,
    pub version: u32,
    pub model: TrainedModel,
    pub summary: RunSummary,
}

#[derive(Debug)]
pub struct ModelRegistry {
    dir: PathBuf,
    current: RwLock<HashMap<String, Arc<Published>>>,
}

const CURRENT: &str = "CURRENT";

fn io(path: &Path) -> impl Fn(std::io::Error) -> String + '_ {
    move |e| format!("{}: {e}", path.display())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), String> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io(path))
}

impl ModelRegistry {
    /// Loads the current version of every participant found under `dir`.
    pub fn open(dir: &Path) -> Result<ModelRegistry, String> {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let mut current = HashMap::new();
        for entry in std::fs::read_dir(dir).map_err(io(dir))? {
            let pdir = entry.map_err(io(dir))?.path();
            let Ok(version) = std::fs::read_to_string(pdir.join(CURRENT)) else { continue };
            let Ok(version) = version.trim().parse::<u32>() else { continue };
            let participant = pdir.file_name().unwrap().to_string_lossy().to_string();
            let published = Self::read_version(&pdir, &participant, version)?;
            current.insert(participant, Arc::new(published));
        }
        Ok(ModelRegistry { dir: dir.to_path_buf(), current: RwLock::new(current) })
    }

    fn read_version(pdir: &Path, participant: &str, version: u32) -> Result<Published, String> {
        let model_path = pdir.join(format!("v{version}.tam"));
        let bytes = std::fs::read(&model_path).map_err(io(&model_path))?;
        let model = load_model(&bytes).map_err(|e| format!("{}: {e}", model_path.display()))?;
        let summary_path = pdir.join(format!("v{version}.json"));
        let summary = std::fs::read(&summary_path).map_err(io(&summary_path))?;
        let summary = serde_json::from_slice(&summary).map_err(|e| format!("{}: {e}", summary_path.display()))?;
        Ok(Published { model_id: model_id(participant, version), version, model, summary })
    }

    pub fn get(&self, participant: &str) -> Option<Arc<Published>> {
        self.current.read().unwrap().get(participant).cloned()
    }

    pub fn len(&self) -> usize {
        self.current.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the next version to disk, then swaps it in.
    pub fn publish(&self, participant: &str, model: TrainedModel, summary: RunSummary) -> Result<Arc<Published>, String> {
        let pdir = self.dir.join(participant);
        std::fs::create_dir_all(&pdir).map_err(io(&pdir))?;
        let version = next_version(&pdir);
        write_atomic(&pdir.join(format!("v{version}.tam")), &save_model(&model))?;
        write_atomic(&pdir.join(format!("v{version}.json")), &serde_json::to_vec_pretty(&summary).expect("summary serializes"))?;
        write_atomic(&pdir.join(CURRENT), version.to_string().as_bytes())?;
        let published = Arc::new(Published { model_id: model_id(participant, version), version, model, summary });
        self.current.write().unwrap().insert(participant.to_string(), Arc::clone(&published));
        Ok(published)
    }
}

pub fn model_id(participant: &str, version: u32) -> String {
    format!("{participant}-v{version}")
}

fn next_version(pdir: &Path) -> u32 {
    std::fs::read_dir(pdir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().to_string();
            name.strip_prefix('v')?.strip_suffix(".tam")?.parse::<u32>().ok()
        })
        .max()
        .unwrap_or(0)
        + 1
}

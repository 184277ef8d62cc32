//! Append-only result store: one JSON file per record plus an index,
//! safe for concurrent writers and resumable campaigns.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// The plan coordinates that uniquely identify one run.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordKey {
    pub method: String,
    pub order_id: String,
    pub repeat: usize,
    pub arch: String,
    pub dataset: String,
}

impl RecordKey {
    /// Stable flat form used for file names and seed derivation.
    pub fn canonical(&self) -> String {
        format!(
            "method={}|order={}|repeat={}|arch={}|dataset={}",
            self.method, self.order_id, self.repeat, self.arch, self.dataset
        )
    }

    pub fn file_stem(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        let d = h.finalize();
        let mut s = String::new();
        for b in &d[..12] {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub key: RecordKey,
    pub seed: u64,
    /// Lower-triangular rows a_{k,j}.
    pub accuracy_matrix: Vec<Vec<f64>>,
    /// Final per-class test accuracy.
    pub class_accuracies: BTreeMap<usize, f64>,
    /// Final per-task (by task id) test accuracy.
    pub final_task_accuracies: BTreeMap<usize, f64>,
    pub wall_time_ms: u64,
    /// Hash over the deterministic payload (everything but wall time).
    pub hash: String,
}

impl RunRecord {
    pub fn compute_hash(
        key: &RecordKey,
        seed: u64,
        accuracy_matrix: &[Vec<f64>],
        class_accuracies: &BTreeMap<usize, f64>,
    ) -> String {
        let mut h = Sha256::new();
        h.update(key.canonical().as_bytes());
        h.update(seed.to_le_bytes());
        for row in accuracy_matrix {
            for v in row {
                h.update(v.to_le_bytes());
            }
            h.update([0xfe]);
        }
        for (c, a) in class_accuracies {
            h.update((*c as u64).to_le_bytes());
            h.update(a.to_le_bytes());
        }
        let d = h.finalize();
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug)]
pub struct ResultStore {
    root: PathBuf,
}

impl ResultStore {
    pub fn open(root: &Path) -> io::Result<Self> {
        fs::create_dir_all(root.join("records"))?;
        Ok(ResultStore { root: root.to_path_buf() })
    }

    fn record_path(&self, key: &RecordKey) -> PathBuf {
        self.root.join("records").join(format!("{}.json", key.file_stem()))
    }

    pub fn contains(&self, key: &RecordKey) -> bool {
        self.record_path(key).exists()
    }

    /// Atomic per-record append: write to a temp file, then rename.
    pub fn put(&self, record: &RunRecord) -> io::Result<()> {
        let path = self.record_path(&record.key);
        let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
        fs::write(&tmp, serde_json::to_vec_pretty(record)?)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn get(&self, key: &RecordKey) -> io::Result<Option<RunRecord>> {
        let path = self.record_path(key);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&path)?;
        Ok(Some(serde_json::from_slice(&bytes)?))
    }

    pub fn load_all(&self) -> io::Result<Vec<RunRecord>> {
        let mut records = Vec::new();
        for entry in fs::read_dir(self.root.join("records"))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let bytes = fs::read(&path)?;
                records.push(serde_json::from_slice::<RunRecord>(&bytes)?);
            }
        }
        records.sort_by(|a, b| a.key.cmp(&b.key));
        Ok(records)
    }

    /// Rewrite the index of canonical keys → file stems.
    pub fn write_index(&self) -> io::Result<()> {
        let records = self.load_all()?;
        let index: BTreeMap<String, String> = records
            .iter()
            .map(|r| (r.key.canonical(), r.key.file_stem()))
            .collect();
        fs::write(self.root.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
        Ok(())
    }

    /// Stable digest over every record's content hash, for whole-store
    /// comparisons.
    pub fn store_digest(&self) -> io::Result<String> {
        let records = self.load_all()?;
        let mut h = Sha256::new();
        for r in &records {
            h.update(r.key.canonical().as_bytes());
            h.update(r.hash.as_bytes());
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

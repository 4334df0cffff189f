//! One JSON record per line. A torn final line (crash mid-append) is cut off
//! on open; damage anywhere else is an error.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EscalationPolicy, LayerRecord, PipelineError, RailcarReport, Result};

// Records are short-lived: built, written and dropped.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WalRecord {
    Layer {
        line: u16,
        railcar_id: String,
        record: LayerRecord,
    },
    /// Full report after each change; the last one for a railcar wins.
    Report {
        report: RailcarReport,
    },
    Policy {
        policy: EscalationPolicy,
    },
}

#[derive(Debug)]
pub struct Wal {
    path: PathBuf,
    writer: BufWriter<File>,
    sync: bool,
    appended: u64,
}

impl Wal {
    /// Opens or creates the log and returns the records already in it.
    pub fn open(path: impl AsRef<Path>, sync: bool) -> Result<(Self, Vec<WalRecord>)> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut records = Vec::new();
        if path.exists() {
            let (r, good_len, len) = scan(&path)?;
            records = r;
            if good_len < len {
                OpenOptions::new().write(true).open(&path)?.set_len(good_len as u64)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok((
            Self {
                path,
                writer: BufWriter::new(file),
                sync,
                appended: 0,
            },
            records,
        ))
    }

    /// Reads the records without touching the file, so it is safe while a
    /// writer holds the log. A torn final line is skipped.
    pub fn read(path: impl AsRef<Path>) -> Result<Vec<WalRecord>> {
        Ok(scan(path.as_ref())?.0)
    }

    pub fn append(&mut self, record: &WalRecord) -> Result<()> {
        serde_json::to_writer(&mut self.writer, record)?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        if self.sync {
            self.writer.get_ref().sync_data()?;
        }
        self.appended += 1;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Records appended through this handle.
    pub fn appended(&self) -> u64 {
        self.appended
    }
}

/// Records, byte length of the intact prefix, total length.
fn scan(path: &Path) -> Result<(Vec<WalRecord>, usize, usize)> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    let mut good_len = 0usize;
    let mut offset = 0usize;
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    for (i, raw) in lines.iter().enumerate() {
        offset += raw.len();
        let line = raw.trim_end_matches('\n');
        if line.trim().is_empty() {
            good_len = offset;
            continue;
        }
        match serde_json::from_str::<WalRecord>(line) {
            Ok(r) => {
                records.push(r);
                good_len = offset;
            }
            Err(_) if i + 1 == lines.len() && !raw.ends_with('\n') => {
                log::warn!("{}: dropping torn final record", path.display());
            }
            Err(e) => {
                return Err(PipelineError::CorruptWal {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok((records, good_len, text.len()))
}

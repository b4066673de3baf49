//! Durable per-space event logs: consecutive length-prefixed EVENT frames in
//! `<space>.log`, replayed on restart.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::wire::{self, EventFrame, Frame};

/// Byte-level append-only storage. `append` returns only once the bytes are
/// durable.
pub trait Storage: Send {
    fn append(&mut self, name: &str, bytes: &[u8]) -> io::Result<()>;
    /// Full contents; empty when the file does not exist.
    fn read(&self, name: &str) -> io::Result<Vec<u8>>;
    fn truncate(&mut self, name: &str, len: u64) -> io::Result<()>;
}

/// In-memory storage that outlives the broker holding it (clones share
/// contents), which is what a simulated crash needs.
#[derive(Debug, Clone, Default)]
pub struct MemStorage {
    inner: Arc<Mutex<MemInner>>,
}

#[derive(Debug, Default)]
struct MemInner {
    files: BTreeMap<String, Vec<u8>>,
    appends: u64,
    /// File and length of the most recent append.
    last: Option<(String, usize)>,
}

impl MemStorage {
    pub fn new() -> Self {
        Self::default()
    }

    /// Writes only the first `n` bytes of `bytes`, as a crash mid-write would.
    pub fn append_torn(&self, name: &str, bytes: &[u8], n: usize) {
        let mut inner = self.inner.lock().expect("storage lock");
        inner.files.entry(name.to_string()).or_default().extend_from_slice(&bytes[..n.min(bytes.len())]);
    }

    pub fn file_names(&self) -> Vec<String> {
        self.inner.lock().expect("storage lock").files.keys().cloned().collect()
    }

    /// Number of appends so far.
    pub fn appends(&self) -> u64 {
        self.inner.lock().expect("storage lock").appends
    }

    /// Cuts the most recent append down to its first `keep` bytes, as if the
    /// process died while writing it. Returns the file affected.
    pub fn tear_last(&self, keep: usize) -> Option<String> {
        let mut inner = self.inner.lock().expect("storage lock");
        let (name, len) = inner.last.take()?;
        let f = inner.files.get_mut(&name)?;
        let cut = len.saturating_sub(keep.min(len));
        let new_len = f.len() - cut;
        f.truncate(new_len);
        Some(name)
    }
}

impl Storage for MemStorage {
    fn append(&mut self, name: &str, bytes: &[u8]) -> io::Result<()> {
        let mut inner = self.inner.lock().expect("storage lock");
        inner.files.entry(name.to_string()).or_default().extend_from_slice(bytes);
        inner.appends += 1;
        inner.last = Some((name.to_string(), bytes.len()));
        Ok(())
    }

    fn read(&self, name: &str) -> io::Result<Vec<u8>> {
        Ok(self.inner.lock().expect("storage lock").files.get(name).cloned().unwrap_or_default())
    }

    fn truncate(&mut self, name: &str, len: u64) -> io::Result<()> {
        let mut inner = self.inner.lock().expect("storage lock");
        if let Some(f) = inner.files.get_mut(name) {
            f.truncate(len as usize);
        }
        inner.last = None;
        Ok(())
    }
}

/// One file per log in a data directory; appends are fsynced.
#[derive(Debug)]
pub struct FileStorage {
    dir: PathBuf,
    open: BTreeMap<String, File>,
}

impl FileStorage {
    pub fn new(dir: impl AsRef<Path>) -> io::Result<Self> {
        std::fs::create_dir_all(dir.as_ref())?;
        Ok(FileStorage { dir: dir.as_ref().to_path_buf(), open: BTreeMap::new() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

impl Storage for FileStorage {
    fn append(&mut self, name: &str, bytes: &[u8]) -> io::Result<()> {
        if !self.open.contains_key(name) {
            let f = OpenOptions::new().create(true).append(true).open(self.path(name))?;
            self.open.insert(name.to_string(), f);
        }
        let f = self.open.get_mut(name).expect("just opened");
        f.write_all(bytes)?;
        f.sync_data()
    }

    fn read(&self, name: &str) -> io::Result<Vec<u8>> {
        match std::fs::read(self.path(name)) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e),
        }
    }

    fn truncate(&mut self, name: &str, len: u64) -> io::Result<()> {
        self.open.remove(name);
        match OpenOptions::new().write(true).open(self.path(name)) {
            Ok(f) => {
                f.set_len(len)?;
                f.sync_all()
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log `{name}`: corrupt frame at byte {offset} followed by more data; refusing to start")]
    Corrupt { name: String, offset: usize },
    #[error("log `{name}`: {err}")]
    Io { name: String, err: io::Error },
}

pub fn log_name(space: &str) -> String {
    format!("{space}.log")
}

#[derive(Debug, Default)]
pub struct Replayed {
    pub events: Vec<EventFrame>,
    /// Bytes dropped from a torn or corrupt final frame.
    pub truncated: usize,
}

/// Reads a space's log back, truncating a torn or undecodable final frame.
pub fn replay(storage: &mut dyn Storage, space: &str) -> Result<Replayed, LogError> {
    let name = log_name(space);
    let io_err = |err| LogError::Io { name: name.clone(), err };
    let bytes = storage.read(&name).map_err(io_err)?;
    let mut out = Replayed::default();
    let mut off = 0;
    while off < bytes.len() {
        let rest = &bytes[off..];
        let frame = match wire::decode(rest) {
            Ok(Some((Ok(Frame::Event(e)), used))) => Some((e, used)),
            Ok(Some((_, used))) => {
                if off + used < bytes.len() {
                    return Err(LogError::Corrupt { name, offset: off });
                }
                None
            }
            Ok(None) => None,
            Err(_) => {
                // An implausible length prefix: only acceptable at the tail.
                if rest.len() <= 4 + wire::MAX_PAYLOAD {
                    None
                } else {
                    return Err(LogError::Corrupt { name, offset: off });
                }
            }
        };
        match frame {
            Some((e, used)) => {
                out.events.push(e);
                off += used;
            }
            None => {
                out.truncated = bytes.len() - off;
                storage.truncate(&name, off as u64).map_err(io_err)?;
                break;
            }
        }
    }
    Ok(out)
}

pub fn append(storage: &mut dyn Storage, e: &EventFrame) -> io::Result<()> {
    storage.append(&log_name(&e.space), &wire::encode(&Frame::Event(e.clone())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Value;

    fn ev(seq: u64) -> EventFrame {
        EventFrame::new("S", seq, vec![Value::Int(seq as i64)], "p")
    }

    #[test]
    fn clean_log_replays() {
        let mut st = MemStorage::new();
        for s in 1..=100 {
            append(&mut st, &ev(s)).unwrap();
        }
        let r = replay(&mut st, "S").unwrap();
        assert_eq!(r.events.len(), 100);
        assert_eq!(r.events.last().unwrap().seq, 100);
        assert_eq!(r.truncated, 0);
    }

    #[test]
    fn empty_log_is_fresh() {
        let r = replay(&mut MemStorage::new(), "S").unwrap();
        assert!(r.events.is_empty());
    }

    #[test]
    fn torn_tail_truncated_at_every_cut() {
        let full = wire::encode(&Frame::Event(ev(3)));
        for cut in 1..full.len() {
            let mut st = MemStorage::new();
            append(&mut st, &ev(1)).unwrap();
            append(&mut st, &ev(2)).unwrap();
            let good_len = st.read("S.log").unwrap().len();
            st.append_torn("S.log", &full, cut);
            let r = replay(&mut st, "S").unwrap();
            assert_eq!(r.events.iter().map(|e| e.seq).collect::<Vec<_>>(), [1, 2], "cut {cut}");
            assert_eq!(r.truncated, cut);
            assert_eq!(st.read("S.log").unwrap().len(), good_len);
            // Appending after recovery yields a clean log.
            append(&mut st, &ev(3)).unwrap();
            assert_eq!(replay(&mut st, "S").unwrap().events.len(), 3);
        }
    }

    #[test]
    fn tear_last_leaves_a_torn_tail() {
        let mut st = MemStorage::new();
        append(&mut st, &ev(1)).unwrap();
        append(&mut st, &ev(2)).unwrap();
        assert_eq!(st.appends(), 2);
        assert_eq!(st.tear_last(3).as_deref(), Some("S.log"));
        let r = replay(&mut st, "S").unwrap();
        assert_eq!(r.events.len(), 1);
        assert_eq!(r.truncated, 3);
    }

    #[test]
    fn corrupt_middle_frame_refuses() {
        let mut st = MemStorage::new();
        append(&mut st, &ev(1)).unwrap();
        let mut bytes = st.read("S.log").unwrap();
        bytes[6] = b'#';
        let mut st = MemStorage::new();
        st.append("S.log", &bytes).unwrap();
        append(&mut st, &ev(2)).unwrap();
        assert!(matches!(replay(&mut st, "S"), Err(LogError::Corrupt { offset: 0, .. })));
    }

    #[test]
    fn file_storage_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut st = FileStorage::new(dir.path()).unwrap();
        append(&mut st, &ev(1)).unwrap();
        append(&mut st, &ev(2)).unwrap();
        let bytes = wire::encode(&Frame::Event(ev(3)));
        st.append("S.log", &bytes[..5]).unwrap();
        let mut st = FileStorage::new(dir.path()).unwrap();
        let r = replay(&mut st, "S").unwrap();
        assert_eq!(r.events.len(), 2);
        assert_eq!(r.truncated, 5);
        assert!(dir.path().join("S.log").exists());
    }
}

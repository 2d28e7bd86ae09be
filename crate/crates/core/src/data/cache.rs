//! On-disk cache of a prepared dataset: `dataset.bin` plus a plain-text
//! `manifest.txt` with the split statistics.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Catalog, PreparedDataset, Session};
use crate::binio::*;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TRONDATA";
const VERSION: u32 = 1;
pub const DATASET_FILE: &str = "dataset.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Counts recorded next to a prepared dataset.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub items: usize,
    pub train_sessions: usize,
    pub train_events: usize,
    pub test_sessions: usize,
    pub test_events: usize,
    /// Free-form provenance entries (input path, thresholds, skipped records).
    pub extra: Vec<(String, String)>,
}

impl Manifest {
    pub fn of(ds: &PreparedDataset) -> Self {
        Self {
            items: ds.catalog.len(),
            train_sessions: ds.train.len(),
            train_events: ds.train_events(),
            test_sessions: ds.test.len(),
            test_events: ds.test_events(),
            extra: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.extra.push((key.to_string(), value.to_string()));
        self
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "format=tron-prepared-v{VERSION}\nitems={}\ntrain_sessions={}\ntrain_events={}\ntest_sessions={}\ntest_events={}\n",
            self.items, self.train_sessions, self.train_events, self.test_sessions, self.test_events
        );
        for (k, v) in &self.extra {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            let num = || {
                v.parse::<usize>().map_err(|e| Error::Parse {
                    line: n + 1,
                    message: format!("{k}: {e}"),
                })
            };
            match k {
                "format" => {}
                "items" => m.items = num()?,
                "train_sessions" => m.train_sessions = num()?,
                "train_events" => m.train_events = num()?,
                "test_sessions" => m.test_sessions = num()?,
                "test_events" => m.test_events = num()?,
                _ => m.extra.push((k.to_string(), v.to_string())),
            }
        }
        Ok(m)
    }
}

pub fn save_prepared(dir: &Path, ds: &PreparedDataset, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(DATASET_FILE);
    let io = |e| Error::io(&path, e);
    let mut w = BufWriter::new(File::create(&path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    write_u32(&mut w, VERSION).map_err(io)?;
    write_u64(&mut w, ds.catalog.len() as u64).map_err(io)?;
    for (&k, &f) in ds.catalog.keys().iter().zip(ds.catalog.frequencies()) {
        write_u64(&mut w, k).map_err(io)?;
        write_u64(&mut w, f).map_err(io)?;
    }
    for split in [&ds.train, &ds.test] {
        write_u64(&mut w, split.len() as u64).map_err(io)?;
        for s in split {
            write_u64(&mut w, s.session_id).map_err(io)?;
            write_u64(&mut w, s.len() as u64).map_err(io)?;
            for (&i, &t) in s.items.iter().zip(&s.timestamps) {
                write_u32(&mut w, i).map_err(io)?;
                write_u64(&mut w, t).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest.to_text()).map_err(|e| Error::io(&mpath, e))
}

pub fn load_prepared(dir: &Path) -> Result<(PreparedDataset, Manifest)> {
    let path = dir.join(DATASET_FILE);
    let io = |e| Error::io(&path, e);
    let mut r = BufReader::new(File::open(&path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Parse {
            line: 0,
            message: format!("{} is not a prepared dataset", path.display()),
        });
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version != VERSION {
        return Err(Error::Parse {
            line: 0,
            message: format!("unsupported dataset version {version}"),
        });
    }
    let n = read_u64(&mut r).map_err(io)? as usize;
    let mut counts = Vec::with_capacity(n);
    for _ in 0..n {
        counts.push((read_u64(&mut r).map_err(io)?, read_u64(&mut r).map_err(io)?));
    }
    let catalog = Catalog::from_counts(counts);
    let mut splits = Vec::with_capacity(2);
    for _ in 0..2 {
        let count = read_u64(&mut r).map_err(io)? as usize;
        let mut sessions = Vec::with_capacity(count);
        for _ in 0..count {
            let session_id = read_u64(&mut r).map_err(io)?;
            let len = read_u64(&mut r).map_err(io)? as usize;
            let mut items = Vec::with_capacity(len);
            let mut timestamps = Vec::with_capacity(len);
            for _ in 0..len {
                let id = read_u32(&mut r).map_err(io)?;
                if id as usize >= catalog.len() {
                    return Err(Error::Index {
                        index: id as usize,
                        len: catalog.len(),
                    });
                }
                items.push(id);
                timestamps.push(read_u64(&mut r).map_err(io)?);
            }
            sessions.push(Session {
                session_id,
                items,
                timestamps,
            });
        }
        splits.push(sessions);
    }
    let test = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    let mpath = dir.join(MANIFEST_FILE);
    let manifest = match fs::read_to_string(&mpath) {
        Ok(text) => Manifest::parse(&text)?,
        Err(e) => return Err(Error::io(&mpath, e)),
    };
    Ok((
        PreparedDataset {
            catalog,
            train,
            test,
        },
        manifest,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let catalog = Catalog::from_counts([(10, 3), (20, 2)]);
        let s = |id, items: &[u32]| Session {
            session_id: id,
            items: items.to_vec(),
            timestamps: (100..100 + items.len() as u64).collect(),
        };
        let ds = PreparedDataset {
            catalog,
            train: vec![s(1, &[0, 1, 0]), s(2, &[0, 1])],
            test: vec![s(3, &[1, 0])],
        };
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::of(&ds).with("min_support", 5);
        save_prepared(dir.path(), &ds, &m).unwrap();
        let (back, mback) = load_prepared(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(mback, m);
        assert_eq!(mback.train_events, 5);
    }
}

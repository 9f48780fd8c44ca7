//! Line-delimited JSON vote log.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, DatasetError};
use crate::grid::{Choice, GridError, ImageId};

/// One volunteer's final choice for one source image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub image: ImageId,
    pub volunteer: String,
    pub method: u32,
    pub param: u32,
    pub timestamp_ms: u64,
}

impl VoteRecord {
    pub fn choice(&self) -> Result<Choice, GridError> {
        Choice::new(self.method, self.param)
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("vote serializes");
        s.push('\n');
        s
    }
}

/// Reads every record; blank lines are ignored. A missing file is an empty log.
pub fn read_vote_log(path: &Path) -> Result<Vec<VoteRecord>, DatasetError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DatasetError::VoteLog {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Appends one record and syncs it to disk before returning.
pub fn append_vote(path: &Path, vote: &VoteRecord) -> Result<(), DatasetError> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(vote.to_line().as_bytes()).map_err(io_err(path))?;
    f.sync_data().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.jsonl");
        assert!(read_vote_log(&p).unwrap().is_empty());
        let v = VoteRecord {
            image: 3,
            volunteer: "v07".into(),
            method: 6,
            param: 4,
            timestamp_ms: 12,
        };
        append_vote(&p, &v).unwrap();
        append_vote(&p, &v).unwrap();
        assert_eq!(read_vote_log(&p).unwrap(), vec![v.clone(), v]);
        fs::write(&p, "{\"image\":1}\n").unwrap();
        assert!(matches!(read_vote_log(&p), Err(DatasetError::VoteLog { line: 1, .. })));
    }
}

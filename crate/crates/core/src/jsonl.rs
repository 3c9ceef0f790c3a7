//! JSON Lines plumbing: numbered line readers, output headers, input digests.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOOL_NAME: &str = "ontoforge";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance record written as the first line of every output file.
///
/// Nothing schedule-dependent (worker count, timestamps) goes in here, so two
/// runs with the same configuration produce byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub stopwords_version: String,
    /// Input role → `sha256:<hex>` digest of the file bytes.
    pub inputs: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: Header,
}

impl Header {
    pub fn new(command: &str, seed: u64, stopwords_version: &str) -> Self {
        Header {
            tool: TOOL_NAME.to_string(),
            version: TOOL_VERSION.to_string(),
            command: command.to_string(),
            seed,
            stopwords_version: stopwords_version.to_string(),
            inputs: BTreeMap::new(),
        }
    }

    /// Records the digest of an input file under `role`.
    pub fn with_input(mut self, role: &str, path: &Path) -> Result<Self> {
        self.inputs.insert(role.to_string(), file_digest(path)?);
        Ok(self)
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(&HeaderLine {
            header: self.clone(),
        })
        .expect("header serializes")
    }

    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", self.to_line())
    }

    /// Parses a header line; `None` when the line is an ordinary record.
    pub fn parse_line(line: &str) -> Option<Header> {
        if !is_header_line(line) {
            return None;
        }
        serde_json::from_str::<HeaderLine>(line)
            .ok()
            .map(|h| h.header)
    }
}

/// True when `line` is a header object written by [`Header::to_line`].
pub fn is_header_line(line: &str) -> bool {
    line.trim_start().starts_with("{\"header\":")
}

/// `sha256:<hex>` digest of a file, streamed.
pub fn file_digest(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("sha256:{}", hex::encode(hasher.finalize())))
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(|f| BufReader::with_capacity(1 << 16, f))
        .map_err(|e| Error::io(path, e))
}

/// A non-blank line with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NumberedLine {
    pub line: usize,
    pub text: String,
}

/// Iterates the non-blank lines of a JSONL file, skipping a leading header.
pub struct JsonlLines<R> {
    reader: R,
    path: PathBuf,
    line: usize,
    header: Option<Header>,
}

impl<R: BufRead> JsonlLines<R> {
    pub fn new(reader: R, path: impl Into<PathBuf>) -> Self {
        JsonlLines {
            reader,
            path: path.into(),
            line: 0,
            header: None,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// The header of the file, once the first line has been read.
    pub fn header(&self) -> Option<&Header> {
        self.header.as_ref()
    }
}

impl JsonlLines<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(JsonlLines::new(open(path)?, path))
    }
}

impl<R: BufRead> Iterator for JsonlLines<R> {
    type Item = Result<NumberedLine>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let mut text = String::new();
            match self.reader.read_line(&mut text) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            }
            self.line += 1;
            let trimmed_len = text.trim_end_matches(['\n', '\r']).len();
            text.truncate(trimmed_len);
            if text.trim().is_empty() {
                continue;
            }
            if self.line == 1 {
                if let Some(header) = Header::parse_line(&text) {
                    self.header = Some(header);
                    continue;
                }
            }
            return Some(Ok(NumberedLine {
                line: self.line,
                text,
            }));
        }
    }
}

/// Parses every record of a JSONL file, failing on the first malformed line.
pub fn read_records<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    JsonlLines::open(path)?
        .map(|line| {
            let line = line?;
            serde_json::from_str(&line.text)
                .map_err(|e| Error::data(path, line.line, e.to_string()))
        })
        .collect()
}

/// Reads one JSON document from a file.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let reader = open(path)?;
    serde_json::from_reader(reader).map_err(|e| Error::data(path, e.line(), e.to_string()))
}

//! Self-describing parameter checkpoints.
//!
//! Layout: a UTF-8 header of `key value` lines terminated by `end`, followed
//! by the parameters as raw little-endian `f32`.
//!
//! ```text
//! MMI-CHECKPOINT
//! version 1
//! kind captioner
//! meta arch R
//! meta trained_epochs 40
//! vocab_hash 3f1c...
//! vocab 27
//! <pad>
//! ...
//! segment encoder.conv0.weight 8x3x3x3
//! ...
//! blob_sha256 9ab2...
//! end
//! <blob>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Params, Segment};
use crate::vocab::{hex, Vocab};

const MAGIC: &str = "MMI-CHECKPOINT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub vocab: Vocab,
    pub params: Params,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("missing meta key `{key}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blob = Vec::with_capacity(self.params.len() * 4);
        for v in &self.params.values {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let mut head = format!("{MAGIC}\nversion {VERSION}\nkind {}\n", self.kind);
        for (k, v) in &self.meta {
            head.push_str(&format!("meta {k} {v}\n"));
        }
        head.push_str(&format!("vocab_hash {}\nvocab {}\n", self.vocab.hash(), self.vocab.len()));
        for t in self.vocab.tokens() {
            head.push_str(t);
            head.push('\n');
        }
        for s in &self.params.segments {
            let dims: Vec<String> = s.shape.iter().map(ToString::to_string).collect();
            head.push_str(&format!("segment {} {}\n", s.name, dims.join("x")));
        }
        head.push_str(&format!("blob_sha256 {}\nend\n", hex(&Sha256::digest(&blob))));
        let mut out = head.into_bytes();
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8"))
        };
        if next_line()? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = next_line()?;
        if version != format!("version {VERSION}") {
            return Err(bad(format!("unsupported `{version}`")));
        }
        let kind = next_line()?
            .strip_prefix("kind ")
            .ok_or_else(|| bad("missing kind"))?
            .to_owned();
        let mut meta = BTreeMap::new();
        let mut line = next_line()?;
        while let Some(kv) = line.strip_prefix("meta ") {
            let (k, v) = kv.split_once(' ').ok_or_else(|| bad(format!("bad meta line `{line}`")))?;
            meta.insert(k.to_owned(), v.to_owned());
            line = next_line()?;
        }
        let vocab_hash = line.strip_prefix("vocab_hash ").ok_or_else(|| bad("missing vocab hash"))?.to_owned();
        let n_vocab: usize = next_line()?
            .strip_prefix("vocab ")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad("missing vocab size"))?;
        let mut tokens = Vec::with_capacity(n_vocab);
        for _ in 0..n_vocab {
            tokens.push(next_line()?.to_owned());
        }
        let vocab = Vocab::from_tokens(tokens).map_err(|e| bad(e.to_string()))?;
        if vocab.hash() != vocab_hash {
            return Err(bad("vocab hash mismatch"));
        }
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut line = next_line()?;
        while let Some(rest) = line.strip_prefix("segment ") {
            let (name, dims) = rest.rsplit_once(' ').ok_or_else(|| bad(format!("bad segment `{line}`")))?;
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("bad shape `{dims}`")))?;
            let seg = Segment {
                name: name.to_owned(),
                shape,
                offset,
            };
            offset += seg.len();
            segments.push(seg);
            line = next_line()?;
        }
        let digest = line.strip_prefix("blob_sha256 ").ok_or_else(|| bad("missing blob digest"))?.to_owned();
        if next_line()? != "end" {
            return Err(bad("missing end of header"));
        }
        let blob = &bytes[pos..];
        if blob.len() != offset * 4 {
            return Err(bad(format!("expected {} parameter bytes, found {}", offset * 4, blob.len())));
        }
        if hex(&Sha256::digest(blob)) != digest {
            return Err(bad("parameter blob checksum mismatch"));
        }
        let values = blob
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Ok(Checkpoint {
            kind,
            meta,
            vocab,
            params: Params { values, segments },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless `kind` and the segment layout match `expected`.
    pub fn expect_layout(&self, kind: &str, expected: &Params) -> Result<()> {
        if self.kind != kind {
            return Err(bad(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)));
        }
        if self.params.segments != expected.segments {
            return Err(bad("parameter shapes do not match the architecture"));
        }
        Ok(())
    }
}

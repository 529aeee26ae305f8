//! Binary token-sequence files and their human-readable dump.
//!
//! Layout: 8-byte magic, little-endian `u32` header length, a JSON header
//! (hashes, sequence length, count, origins), then `count * seq_len`
//! little-endian `u32` ids.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Origin, TokenSequence, Vocabulary};

pub const TOKEN_FILE_MAGIC: &[u8; 8] = b"CANTOKS1";

#[derive(Debug, thiserror::Error)]
pub enum TokenFileError {
    #[error("token file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a token file (bad magic)")]
    BadMagic,
    #[error("token file header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("token file holds sequences of mixed length or provenance")]
    Heterogeneous,
    #[error("token file truncated: expected {expected} ids, found {found}")]
    Truncated { expected: usize, found: usize },
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_hash: String,
    vocab_hash: String,
    seq_len: usize,
    count: usize,
    origins: Vec<(String, String, f64)>,
}

pub fn write_token_file<W: Write>(seqs: &[TokenSequence], mut out: W) -> Result<(), TokenFileError> {
    let seq_len = seqs.first().map_or(0, |s| s.ids.len());
    let (schema_hash, vocab_hash) = seqs
        .first()
        .map(|s| (s.schema_hash.to_string(), s.vocab_hash.to_string()))
        .unwrap_or_default();
    if seqs.iter().any(|s| {
        s.ids.len() != seq_len || *s.schema_hash != *schema_hash || *s.vocab_hash != *vocab_hash
    }) {
        return Err(TokenFileError::Heterogeneous);
    }
    let header = Header {
        schema_hash,
        vocab_hash,
        seq_len,
        count: seqs.len(),
        origins: seqs
            .iter()
            .map(|s| {
                (
                    s.origin.vehicle_id.to_string(),
                    s.origin.trip_id.to_string(),
                    s.origin.start,
                )
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(TOKEN_FILE_MAGIC)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::with_capacity(seq_len * 4);
    for s in seqs {
        buf.clear();
        for id in &s.ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_token_file<R: Read>(mut input: R) -> Result<Vec<TokenSequence>, TokenFileError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != TOKEN_FILE_MAGIC {
        return Err(TokenFileError::BadMagic);
    }
    let mut len = [0u8; 4];
    input.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.origins.len() != header.count {
        return Err(TokenFileError::Heterogeneous);
    }
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    let expected = header.count * header.seq_len;
    if body.len() != expected * 4 {
        return Err(TokenFileError::Truncated {
            expected,
            found: body.len() / 4,
        });
    }
    let schema_hash: Arc<str> = Arc::from(header.schema_hash);
    let vocab_hash: Arc<str> = Arc::from(header.vocab_hash);
    let ids: Vec<u32> = body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut vehicles: Vec<Arc<str>> = Vec::new();
    let mut intern = |s: String| -> Arc<str> {
        match vehicles.iter().rev().find(|v| ***v == *s) {
            Some(v) => v.clone(),
            None => {
                let a: Arc<str> = Arc::from(s);
                vehicles.push(a.clone());
                a
            }
        }
    };
    Ok(header
        .origins
        .into_iter()
        .enumerate()
        .map(|(i, (v, t, start))| TokenSequence {
            ids: ids[i * header.seq_len..(i + 1) * header.seq_len].to_vec(),
            schema_hash: schema_hash.clone(),
            vocab_hash: vocab_hash.clone(),
            origin: Origin {
                vehicle_id: intern(v),
                trip_id: Arc::from(t),
                start,
            },
        })
        .collect())
}

/// One line per sequence: origin, a tab, then token names.
pub fn dump_text(seqs: &[TokenSequence], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&format!(
            "{} {} {}\t",
            s.origin.vehicle_id, s.origin.trip_id, s.origin.start
        ));
        for (i, &id) in s.ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(vocab.name(id).unwrap_or("<?>"));
        }
        out.push('\n');
    }
    out
}

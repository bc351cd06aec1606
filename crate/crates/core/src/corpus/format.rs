//! Binary corpus container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "CTCSTCRP"
//! header_len u32
//! header     JSON      {"version":"ctcst-corpus-v1","spec":..,"vocab":..,"index":[{"id":..,"split":..}]}
//! records    repeated, one per index entry:
//!   id_len u32, id (utf-8)
//!   split  u8   (0 sup, 1 unsup, 2 dev, 3 test)
//!   T u32, D u32, T*D f32 row-major
//!   has_labels u8, [L u32, L x u32 token indices]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, CorpusSpec, Split, UnlabeledSplit, Utterance, Vocabulary};
use crate::matrix::Matrix;

pub const CORPUS_VERSION: &str = "ctcst-corpus-v1";
const MAGIC: &[u8; 8] = b"CTCSTCRP";

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: String,
    spec: CorpusSpec,
    vocab: Vocabulary,
    index: Vec<IndexEntry>,
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_corpus(corpus, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_corpus(&bytes)
}

pub fn write_corpus<W: Write>(corpus: &Corpus, w: &mut W) -> Result<(), CorpusError> {
    let header = Header {
        version: CORPUS_VERSION.to_string(),
        spec: corpus.spec.clone(),
        vocab: corpus.vocab.clone(),
        index: corpus
            .all_records()
            .map(|(split, u)| IndexEntry { id: u.id.clone(), split })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CorpusError::Parse {
        location: "header".into(),
        message: e.to_string(),
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (split, u) in corpus.all_records() {
        w.write_all(&(u.id.len() as u32).to_le_bytes())?;
        w.write_all(u.id.as_bytes())?;
        w.write_all(&[split.code()])?;
        w.write_all(&(u.features.rows() as u32).to_le_bytes())?;
        w.write_all(&(u.features.cols() as u32).to_le_bytes())?;
        for &x in u.features.as_slice() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
        match &u.labels {
            None => w.write_all(&[0])?,
            Some(l) => {
                w.write_all(&[1])?;
                w.write_all(&(l.len() as u32).to_le_bytes())?;
                for &t in l {
                    w.write_all(&(t as u32).to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    location: String,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> CorpusError {
        CorpusError::Parse { location: self.location.clone(), message: message.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CorpusError> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated: need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CorpusError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CorpusError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Parses and validates a corpus container from memory.
pub fn read_corpus(bytes: &[u8]) -> Result<Corpus, CorpusError> {
    let mut cur = Cursor { buf: bytes, pos: 0, location: "magic".into() };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(cur.err("not a ctcst corpus file"));
    }
    cur.location = "header".into();
    let hlen = cur.u32()? as usize;
    let header: Header = serde_json::from_slice(cur.take(hlen)?).map_err(|e| cur.err(e.to_string()))?;
    if header.version != CORPUS_VERSION {
        return Err(cur.err(format!("unsupported version {:?}", header.version)));
    }
    header.spec.validate()?;
    header.vocab.validate()?;

    let mut splits: [Vec<Utterance>; 4] = Default::default();
    for (i, entry) in header.index.iter().enumerate() {
        cur.location = format!("record {i} ({:?})", entry.id);
        let id_len = cur.u32()? as usize;
        let id = std::str::from_utf8(cur.take(id_len)?)
            .map_err(|_| cur.err("id is not utf-8"))?
            .to_string();
        if id != entry.id {
            return Err(cur.err(format!("record id {id:?} does not match index")));
        }
        let split = Split::from_code(cur.u8()?).ok_or_else(|| cur.err("unknown split code"))?;
        if split != entry.split {
            return Err(cur.err("record split does not match index"));
        }
        let t = cur.u32()? as usize;
        let d = cur.u32()? as usize;
        let n = t.checked_mul(d).filter(|n| n.saturating_mul(4) <= cur.remaining());
        let n = n.ok_or_else(|| cur.err(format!("feature block {t}x{d} exceeds file size")))?;
        let raw = cur.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let labels = match cur.u8()? {
            0 => None,
            1 => {
                let l = cur.u32()? as usize;
                if l.saturating_mul(4) > cur.remaining() {
                    return Err(cur.err(format!("label block of {l} exceeds file size")));
                }
                let mut labels = Vec::with_capacity(l);
                for _ in 0..l {
                    labels.push(cur.u32()? as usize);
                }
                Some(labels)
            }
            other => return Err(cur.err(format!("invalid label flag {other}"))),
        };
        splits[usize::from(split.code())].push(Utterance { id, features: Matrix::from_vec(t, d, data), labels });
    }
    if cur.remaining() != 0 {
        cur.location = "trailer".into();
        return Err(cur.err(format!("{} trailing bytes", cur.remaining())));
    }
    let [supervised, unsup, dev, test] = splits;
    let corpus = Corpus {
        spec: header.spec,
        vocab: header.vocab,
        supervised,
        unsupervised: UnlabeledSplit::new(unsup),
        dev,
        test,
    };
    corpus.validate()?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_corpus;

    fn small() -> Corpus {
        let spec = CorpusSpec { n_supervised: 3, n_unsupervised: 3, n_dev: 2, n_test: 2, ..CorpusSpec::default() };
        generate_corpus(&spec, 17).unwrap()
    }

    fn encode(c: &Corpus) -> Vec<u8> {
        let mut buf = Vec::new();
        write_corpus(c, &mut buf).unwrap();
        buf
    }

    #[test]
    fn save_then_load_roundtrips() {
        let c = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        save_corpus(&c, &p).unwrap();
        assert_eq!(load_corpus(&p).unwrap(), c);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let buf = encode(&small());
        for cut in [0, 5, 12, buf.len() / 2, buf.len() - 1] {
            match read_corpus(&buf[..cut]) {
                Err(CorpusError::Parse { .. }) => {}
                other => panic!("cut {cut}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn error_names_offending_record() {
        let buf = encode(&small());
        let err = read_corpus(&buf[..buf.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("record 9"), "{err}");
    }

    #[test]
    fn blank_in_labels_fails_validation() {
        let mut c = small();
        c.supervised[1].labels = Some(vec![1, 0, 2]);
        let err = read_corpus(&encode(&c)).unwrap_err();
        match err {
            CorpusError::Validation { id, .. } => assert_eq!(id, c.supervised[1].id),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut buf = encode(&small());
        let needle = CORPUS_VERSION.as_bytes();
        let at = buf.windows(needle.len()).position(|w| w == needle).unwrap();
        buf[at + needle.len() - 1] = b'9';
        let err = read_corpus(&buf).unwrap_err().to_string();
        assert!(err.contains("unsupported version"), "{err}");
    }
}

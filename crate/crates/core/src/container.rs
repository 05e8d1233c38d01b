//! Little-endian tensor container shared by weight and cache files.
//!
//! Layout: 4 magic bytes, `u32` version (= 1), `u32` header length, the
//! UTF-8 header as `key=value` lines, then raw `f32` payload in an order
//! fixed by the file kind.

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Header {
    entries: Vec<(String, String)>,
}

impl Header {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Format {
            offset: 12,
            message: format!("header is missing key {key:?}"),
        })
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| Error::Format {
            offset: 12,
            message: format!("header key {key:?} has unparsable value {raw:?}"),
        })
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], header: &Header) -> Self {
        let text = header.render();
        let mut buf = Vec::with_capacity(12 + text.len());
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
        buf.extend_from_slice(text.as_bytes());
        Self { buf }
    }

    pub fn tensor(&mut self, values: &[f32]) {
        self.buf.reserve(values.len() * 4);
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    pub header: Header,
}

impl<'a> Reader<'a> {
    pub fn open(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Format {
                offset: bytes.len(),
                message: "file shorter than the fixed 12-byte preamble".into(),
            });
        }
        if &bytes[..4] != magic {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&bytes[..4]),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let end = 12usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format {
                offset: 8,
                message: format!("header length {header_len} runs past end of file"),
            })?;
        let text = std::str::from_utf8(&bytes[12..end]).map_err(|e| Error::Format {
            offset: 12 + e.valid_up_to(),
            message: "header is not valid UTF-8".into(),
        })?;
        let mut header = Header::new();
        let mut line_offset = 12;
        for line in text.lines() {
            if !line.is_empty() {
                let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                    offset: line_offset,
                    message: format!("header line {line:?} is not key=value"),
                })?;
                header.push(k.trim(), v.trim());
            }
            line_offset += line.len() + 1;
        }
        Ok(Self {
            bytes,
            pos: end,
            header,
        })
    }

    pub fn tensor(&mut self, len: usize, name: &str) -> Result<Vec<f32>> {
        let need = len * 4;
        if self.bytes.len() - self.pos < need {
            return Err(Error::Format {
                offset: self.pos,
                message: format!(
                    "truncated tensor {name}: need {need} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = self.bytes[self.pos..self.pos + need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos += need;
        Ok(out)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("{} trailing bytes after payload", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_payload_survive() {
        let mut h = Header::new();
        h.push("a", 3);
        h.push("name", "A+B");
        let mut w = Writer::new(b"TEST", &h);
        w.tensor(&[1.0, -2.5]);
        let bytes = w.finish();
        let mut r = Reader::open(&bytes, b"TEST").unwrap();
        assert_eq!(r.header, h);
        assert_eq!(r.tensor(2, "t").unwrap(), vec![1.0, -2.5]);
        r.finish().unwrap();
    }

    #[test]
    fn truncation_names_offset() {
        let w = Writer::new(b"TEST", &Header::new());
        let bytes = w.finish();
        let mut r = Reader::open(&bytes, b"TEST").unwrap();
        match r.tensor(4, "x") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn oversized_header_length_is_rejected() {
        let mut bytes = Writer::new(b"TEST", &Header::new()).finish();
        bytes[8..12].copy_from_slice(&1000u32.to_le_bytes());
        assert!(matches!(
            Reader::open(&bytes, b"TEST"),
            Err(Error::Format { offset: 8, .. })
        ));
    }
}

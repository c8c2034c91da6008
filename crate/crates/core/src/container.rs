//! Self-describing file container: a magic line, `key=value` header lines, a
//! blank line, then a little-endian binary payload.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

pub(crate) struct Header {
    entries: Vec<(String, String)>,
}

impl Header {
    pub fn new() -> Self {
        Header { entries: Vec::new() }
    }

    pub fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.entries.push((key.to_owned(), value.to_string()));
        self
    }

    pub fn encode(&self, magic: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(payload.len() + 256);
        out.extend_from_slice(magic.as_bytes());
        out.push(b'\n');
        for (k, v) in &self.entries {
            out.extend_from_slice(k.as_bytes());
            out.push(b'=');
            out.extend_from_slice(v.as_bytes());
            out.push(b'\n');
        }
        out.push(b'\n');
        out.extend_from_slice(payload);
        out
    }
}

pub(crate) struct Parsed<'a> {
    fields: BTreeMap<String, String>,
    pub payload: &'a [u8],
}

impl Parsed<'_> {
    pub fn raw(&self, key: &str) -> Result<&str> {
        self.fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("missing header field `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("bad value `{raw}` for header field `{key}`")))
    }

    pub fn check_version(&self, expected: u32) -> Result<()> {
        let found: u32 = self.get("version")?;
        if found != expected {
            return Err(Error::VersionMismatch { expected, found });
        }
        Ok(())
    }

    pub fn payload_exact(&self, expected: usize) -> Result<&[u8]> {
        if self.payload.len() != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes, header implies {expected}",
                self.payload.len()
            )));
        }
        Ok(self.payload)
    }
}

pub(crate) fn starts_with_magic(bytes: &[u8], magic: &str) -> bool {
    bytes.len() > magic.len() && bytes.starts_with(magic.as_bytes()) && bytes[magic.len()] == b'\n'
}

pub(crate) fn decode<'a>(bytes: &'a [u8], magic: &str) -> Result<Parsed<'a>> {
    if !starts_with_magic(bytes, magic) {
        return Err(Error::Format(format!("missing `{magic}` signature")));
    }
    let mut pos = magic.len() + 1;
    let mut fields = BTreeMap::new();
    loop {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::Format("header is not UTF-8".into()))?;
        pos += end + 1;
        if line.is_empty() {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("header line without `=`: {line}")))?;
        fields.insert(k.to_owned(), v.to_owned());
    }
    Ok(Parsed { fields, payload: &bytes[pos..] })
}

//! Little-endian helpers shared by the binary artifact formats.

use std::io::{self, Write};

use crate::error::{Error, Result};

pub(crate) fn write_meta<W: Write>(w: &mut W, meta: Option<&str>) -> io::Result<()> {
    let bytes = meta.unwrap_or("").as_bytes();
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Format(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    /// Optional trailing metadata block; absent or empty yields `None`.
    pub fn meta(&mut self) -> Result<Option<String>> {
        if self.is_empty() {
            return Ok(None);
        }
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        if !self.is_empty() {
            return Err(Error::Format("trailing bytes after metadata".into()));
        }
        if len == 0 {
            return Ok(None);
        }
        String::from_utf8(bytes.to_vec())
            .map(Some)
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))
    }
}

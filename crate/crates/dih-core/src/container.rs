//! Little-endian binary container helpers shared by the checkpoint and
//! dataset formats: magic bytes, fixed-width integers, raw doubles, and a
//! trailing CRC32 over everything that precedes it.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Appends the CRC32 of everything written so far and returns the buffer.
    pub fn finish_with_checksum(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }

    /// Returns the raw buffer without a trailing checksum (for nesting
    /// inside another container).
    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    declared_crc: u32,
}

impl<'a> ByteReader<'a> {
    /// Reader over a checksummed container. Structural reads happen first;
    /// call [`ByteReader::verify_checksum`] once parsing succeeds, so a
    /// truncated or mangled header reports as malformed rather than as a
    /// checksum failure.
    pub fn new_checked(bytes: &'a [u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::MalformedHeader(format!(
                "container of {} bytes is too short for a checksum",
                bytes.len()
            )));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 4);
        let declared = u32::from_le_bytes(tail.try_into().expect("4-byte tail"));
        Ok(ByteReader { buf: payload, pos: 0, declared_crc: declared })
    }

    /// Compares the declared trailing CRC32 against the payload.
    pub fn verify_checksum(&self) -> Result<()> {
        let actual = crc32fast::hash(self.buf);
        if self.declared_crc != actual {
            return Err(Error::ChecksumMismatch { expected: self.declared_crc, actual });
        }
        Ok(())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::MalformedHeader(format!(
                "truncated: wanted {n} bytes at offset {}, only {} remain",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let got = self.take(magic.len())?;
        if got != magic {
            return Err(Error::MalformedHeader(format!(
                "bad magic: expected {magic:?}, found {got:?}"
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn raw(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn read_exact_file(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}

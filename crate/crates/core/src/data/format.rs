//! PMSEG1: `b"PMSEG1\0"`, little-endian `u32` count, H, W, K, then per
//! sample `H·W·3` little-endian `f32` pixels followed by `H·W` `u8` labels
//! (255 = ignore).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{Dataset, SegSample, IGNORE_LABEL};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 7] = b"PMSEG1\0";
pub const HEADER_LEN: u64 = 7 + 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl Header {
    pub fn sample_bytes(&self) -> u64 {
        let px = (self.height * self.width) as u64;
        px * 12 + px
    }
}

/// Encoded bytes of one sample, exactly as stored in the file.
pub fn encode_sample(sample: &SegSample) -> Vec<u8> {
    let mut out = Vec::with_capacity(sample.image.len() * 4 + sample.labels.len());
    for v in &sample.image {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&sample.labels);
    out
}

/// Hex SHA-256 of a sample's stored bytes.
pub fn sample_digest(sample: &SegSample) -> String {
    hex::encode(Sha256::digest(encode_sample(sample)))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::contract(format!("{what} {v} does not fit in u32")))
}

/// Streaming writer; the sample count is patched into the header on `finish`.
pub struct DatasetWriter {
    path: PathBuf,
    out: BufWriter<File>,
    header: Header,
    digests: Vec<String>,
}

impl DatasetWriter {
    pub fn create(path: impl AsRef<Path>, height: usize, width: usize, num_classes: usize) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = Self {
            path,
            out: BufWriter::new(file),
            header: Header {
                count: 0,
                height,
                width,
                num_classes,
            },
            digests: Vec::new(),
        };
        w.write_header()?;
        Ok(w)
    }

    fn write_header(&mut self) -> Result<()> {
        let h = self.header;
        let mut buf = MAGIC.to_vec();
        for v in [
            to_u32(h.count, "count")?,
            to_u32(h.height, "height")?,
            to_u32(h.width, "width")?,
            to_u32(h.num_classes, "num_classes")?,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.out.write_all(&buf).map_err(|e| Error::io(&self.path, e))
    }

    /// Appends one sample and returns its digest.
    pub fn push(&mut self, sample: &SegSample) -> Result<String> {
        let h = self.header;
        if sample.height != h.height || sample.width != h.width {
            return Err(Error::Dimension {
                op: "write_dataset",
                lhs: vec![h.height, h.width],
                rhs: vec![sample.height, sample.width],
            });
        }
        sample.validate(h.num_classes)?;
        let bytes = encode_sample(sample);
        self.out.write_all(&bytes).map_err(|e| Error::io(&self.path, e))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        self.digests.push(digest.clone());
        self.header.count += 1;
        Ok(digest)
    }

    /// Finalizes the header and returns the per-sample digests.
    pub fn finish(mut self) -> Result<Vec<String>> {
        self.out.seek(SeekFrom::Start(0)).map_err(|e| Error::io(&self.path, e))?;
        self.write_header()?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.digests)
    }
}

/// Writes all samples; returns their digests in order.
pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<Vec<String>> {
    let mut w = DatasetWriter::create(path, dataset.height, dataset.width, dataset.num_classes)?;
    for s in &dataset.samples {
        w.push(s)?;
    }
    w.finish()
}

/// Sequential reader yielding one sample at a time. Each reader owns its
/// file handle, so any number may read the same file concurrently.
pub struct DatasetReader {
    path: PathBuf,
    input: BufReader<File>,
    header: Header,
    next: usize,
    offset: u64,
}

impl DatasetReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut input = BufReader::new(file);
        let mut head = [0u8; HEADER_LEN as usize];
        let got = read_full(&mut input, &mut head).map_err(|e| Error::io(&path, e))?;
        if got < MAGIC.len() || &head[..MAGIC.len()] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic (expected PMSEG1)".into(),
            });
        }
        if got < head.len() {
            return Err(Error::Format {
                offset: got as u64,
                message: "truncated header".into(),
            });
        }
        let field = |i: usize| u32::from_le_bytes(head[7 + 4 * i..11 + 4 * i].try_into().unwrap()) as usize;
        let header = Header {
            count: field(0),
            height: field(1),
            width: field(2),
            num_classes: field(3),
        };
        if header.num_classes < 2 || header.num_classes > 255 {
            return Err(Error::Format {
                offset: 19,
                message: format!("num_classes {} outside [2, 255]", header.num_classes),
            });
        }
        Ok(Self {
            path,
            input,
            header,
            next: 0,
            offset: HEADER_LEN,
        })
    }

    pub fn header(&self) -> Header {
        self.header
    }

    /// Positions the reader at sample `index`.
    pub fn seek_to(&mut self, index: usize) -> Result<()> {
        if index > self.header.count {
            return Err(Error::Index {
                index,
                len: self.header.count,
            });
        }
        self.offset = HEADER_LEN + index as u64 * self.header.sample_bytes();
        self.input
            .seek(SeekFrom::Start(self.offset))
            .map_err(|e| Error::io(&self.path, e))?;
        self.next = index;
        Ok(())
    }

    fn read_sample(&mut self) -> Result<SegSample> {
        let h = self.header;
        let px = h.height * h.width;
        let mut buf = vec![0u8; h.sample_bytes() as usize];
        let got = read_full(&mut self.input, &mut buf).map_err(|e| Error::io(&self.path, e))?;
        if got < buf.len() {
            return Err(Error::Format {
                offset: self.offset + got as u64,
                message: format!("truncated sample {} of {}", self.next, h.count),
            });
        }
        let (img, labels) = buf.split_at(px * 12);
        if let Some(pos) = labels
            .iter()
            .position(|&l| l != IGNORE_LABEL && l as usize >= h.num_classes)
        {
            return Err(Error::Format {
                offset: self.offset + (px * 12 + pos) as u64,
                message: format!("label {} outside [0, {}) and not ignore", labels[pos], h.num_classes),
            });
        }
        let image = img
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        self.offset += buf.len() as u64;
        self.next += 1;
        Ok(SegSample {
            height: h.height,
            width: h.width,
            image,
            labels: labels.to_vec(),
        })
    }
}

impl Iterator for DatasetReader {
    type Item = Result<SegSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.header.count {
            return None;
        }
        let r = self.read_sample();
        if r.is_err() {
            // stop after the first error
            self.next = self.header.count;
        }
        Some(r)
    }
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Reads a whole file; fails without returning partial data.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let reader = DatasetReader::open(path)?;
    let h = reader.header();
    let samples = reader.collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        height: h.height,
        width: h.width,
        num_classes: h.num_classes,
        samples,
    })
}

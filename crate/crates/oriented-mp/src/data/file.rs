//! On-disk dataset container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "OMPD"
//! version    u32      1
//! seed       u64      generator seed, echoed for reproducibility
//! n_records  u64
//! n_fields   u32
//! per field: name_len u32, name bytes (utf-8), ndims u32, dims u64 x ndims
//! payload:   records x fields, f64 little-endian, row-major
//! ```
//!
//! Every record shares the field schema. Reading back what was written is
//! bitwise exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"OMPD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl FieldSpec {
    pub fn new(name: &str, shape: &[usize]) -> Self {
        FieldSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub seed: u64,
    pub fields: Vec<FieldSpec>,
    /// `records[r][f]` holds the flat values of field `f` in record `r`.
    pub records: Vec<Vec<Vec<f64>>>,
}

impl DatasetFile {
    pub fn new(seed: u64, fields: Vec<FieldSpec>) -> Self {
        DatasetFile {
            seed,
            fields,
            records: Vec::new(),
        }
    }

    pub fn push_record(&mut self, values: Vec<Vec<f64>>) -> Result<()> {
        if values.len() != self.fields.len() {
            return Err(Error::shape(format!(
                "record has {} fields, schema has {}",
                values.len(),
                self.fields.len()
            )));
        }
        for (f, v) in self.fields.iter().zip(values.iter()) {
            if v.len() != f.len() {
                return Err(Error::shape(format!(
                    "field '{}' expects {} values, got {}",
                    f.name,
                    f.len(),
                    v.len()
                )));
            }
        }
        self.records.push(values);
        Ok(())
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn field(&self, record: usize, name: &str) -> Result<&[f64]> {
        let idx = self
            .field_index(name)
            .ok_or_else(|| Error::argument(format!("dataset has no field '{name}'")))?;
        Ok(&self.records[record][idx])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.fields.len() as u32).to_le_bytes());
        for f in &self.fields {
            out.extend_from_slice(&(f.name.len() as u32).to_le_bytes());
            out.extend_from_slice(f.name.as_bytes());
            out.extend_from_slice(&(f.shape.len() as u32).to_le_bytes());
            for &d in &f.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for rec in &self.records {
            for vals in rec {
                for v in vals {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<DatasetFile> {
        let mut c = Cursor { bytes, pos: 0 };
        let magic = c.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {:?}, expected {:?}", magic, MAGIC),
            });
        }
        let version_off = c.pos as u64;
        let version = c.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: version_off,
                message: format!("unsupported version {version}, expected {VERSION}"),
            });
        }
        let seed = c.u64("seed")?;
        let n_records = c.u64("record count")? as usize;
        let n_fields = c.u32("field count")? as usize;
        let mut fields = Vec::with_capacity(n_fields);
        for _ in 0..n_fields {
            let name_len = c.u32("field name length")? as usize;
            let name_off = c.pos as u64;
            let name_bytes = c.take(name_len, "field name")?;
            let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| Error::Format {
                offset: name_off,
                message: "field name is not valid utf-8".into(),
            })?;
            let ndims = c.u32("field rank")? as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(c.u64("field dim")? as usize);
            }
            fields.push(FieldSpec { name, shape });
        }
        let per_record: usize = fields.iter().map(|f| f.len()).sum();
        let expected = n_records * per_record * 8;
        let actual = bytes.len() - c.pos;
        if actual != expected {
            return Err(Error::Format {
                offset: c.pos as u64,
                message: format!("payload holds {actual} bytes, expected {expected}"),
            });
        }
        let mut records = Vec::with_capacity(n_records);
        for _ in 0..n_records {
            let mut rec = Vec::with_capacity(fields.len());
            for f in &fields {
                let mut vals = Vec::with_capacity(f.len());
                for _ in 0..f.len() {
                    vals.push(f64::from_le_bytes(
                        c.take(8, "payload")?.try_into().expect("8 bytes"),
                    ));
                }
                rec.push(vals);
            }
            records.push(rec);
        }
        Ok(DatasetFile {
            seed,
            fields,
            records,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<DatasetFile> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        DatasetFile::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_file() -> DatasetFile {
        let mut f = DatasetFile::new(
            42,
            vec![FieldSpec::new("a", &[2, 3]), FieldSpec::new("b", &[1])],
        );
        f.push_record(vec![vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![-1.5]])
            .unwrap();
        f.push_record(vec![vec![0.0; 6], vec![7.25]]).unwrap();
        f
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let f = sample_file();
        let bytes = f.to_bytes();
        let g = DatasetFile::from_bytes(&bytes).unwrap();
        assert_eq!(f, g);
        assert_eq!(bytes, g.to_bytes());
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut bytes = sample_file().to_bytes();
        bytes[0] = b'X';
        match DatasetFile::from_bytes(&bytes) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected format error at offset 0, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_names_expected_and_actual() {
        let bytes = sample_file().to_bytes();
        let cut = &bytes[..bytes.len() - 8];
        match DatasetFile::from_bytes(cut) {
            Err(Error::Format { message, .. }) => {
                assert!(message.contains("expected"), "message: {message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = sample_file().to_bytes();
        bytes[4] = 9;
        match DatasetFile::from_bytes(&bytes) {
            Err(Error::Format { offset: 4, .. }) => {}
            other => panic!("expected format error at offset 4, got {other:?}"),
        }
    }

    #[test]
    fn record_shape_validation() {
        let mut f = DatasetFile::new(1, vec![FieldSpec::new("a", &[3])]);
        assert!(f.push_record(vec![vec![1.0, 2.0]]).is_err());
        assert!(f.push_record(vec![vec![1.0, 2.0, 3.0], vec![4.0]]).is_err());
    }
}

//! Named-matrix model container.
//!
//! `u32` entry count, then per entry: `u16` name length, UTF-8 name bytes and
//! one LCDM-encoded matrix. Integers are little endian.

use std::fs;
use std::path::Path;

use crate::datamodel::lcdm::{read_exact_or_format, LcdmMatrix};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelContainer {
    entries: Vec<(String, LcdmMatrix)>,
}

impl ModelContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, m: LcdmMatrix) -> &mut Self {
        self.entries.push((name.to_string(), m));
        self
    }

    pub fn entries(&self) -> &[(String, LcdmMatrix)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Result<&LcdmMatrix> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Format(format!("model file lacks matrix {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::Format("too many entries".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, m) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("name {name:?} too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            m.write_to(&mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut n4 = [0u8; 4];
        read_exact_or_format(&mut cur, &mut n4, "entry count")?;
        let count = u32::from_le_bytes(n4);
        let mut entries = Vec::new();
        for _ in 0..count {
            let mut n2 = [0u8; 2];
            read_exact_or_format(&mut cur, &mut n2, "name length")?;
            let mut name = vec![0u8; u16::from_le_bytes(n2) as usize];
            read_exact_or_format(&mut cur, &mut name, "name")?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let m = LcdmMatrix::read_from(&mut cur)?;
            entries.push((name, m));
        }
        if !cur.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes in model file",
                cur.len()
            )));
        }
        Ok(ModelContainer { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

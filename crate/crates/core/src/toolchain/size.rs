//! Binary-size measurement with Berkeley `size` semantics.
//!
//! Allocated sections that are executable or read-only count as text,
//! allocated writable sections with contents count as data, and the remaining
//! allocated sections are bss. `.eh_frame` is therefore text, as the `size`
//! tool reports it.

use object::{Object, ObjectSection, SectionFlags, SectionKind};

use super::{BinarySize, ToolchainError};

const SHF_WRITE: u64 = 0x1;
const SHF_ALLOC: u64 = 0x2;
const SHF_EXECINSTR: u64 = 0x4;

/// Measures an ELF object in-process.
pub fn berkeley_size_of_elf(bytes: &[u8]) -> Result<BinarySize, ToolchainError> {
    let file = object::File::parse(bytes).map_err(|e| ToolchainError::BadObject(e.to_string()))?;
    let mut size = BinarySize::default();
    for section in file.sections() {
        let SectionFlags::Elf { sh_flags } = section.flags() else {
            return Err(ToolchainError::BadObject("not an ELF object".into()));
        };
        if sh_flags & SHF_ALLOC == 0 {
            continue;
        }
        let nobits = matches!(
            section.kind(),
            SectionKind::UninitializedData | SectionKind::UninitializedTls
        );
        if sh_flags & SHF_EXECINSTR != 0 || sh_flags & SHF_WRITE == 0 {
            size.text_bytes += section.size();
        } else if !nobits {
            size.data_bytes += section.size();
        }
    }
    Ok(size)
}

/// Parses `size --format=berkeley --radix=10` output for a single file.
pub fn parse_berkeley_output(stdout: &str) -> Result<BinarySize, ToolchainError> {
    let mut lines = stdout.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| ToolchainError::BadObject("empty `size` output".into()))?;
    let cols: Vec<&str> = header.split_whitespace().collect();
    if cols.len() < 3 || cols[0] != "text" || cols[1] != "data" || cols[2] != "bss" {
        return Err(ToolchainError::BadObject(format!(
            "unexpected `size` header: {header}"
        )));
    }
    let row = lines
        .next()
        .ok_or_else(|| ToolchainError::BadObject("missing `size` row".into()))?;
    let mut fields = row.split_whitespace();
    let mut num = |what: &str| -> Result<u64, ToolchainError> {
        fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| ToolchainError::BadObject(format!("bad {what} column in `{row}`")))
    };
    let text = num("text")?;
    let data = num("data")?;
    Ok(BinarySize::new(text, data))
}

/// Object format used by the mock and replay backends: a short text header
/// carrying section sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticObject {
    pub text: u64,
    pub data: u64,
    pub bss: u64,
}

const MAGIC: &str = "SYNTHOBJ";

impl SyntheticObject {
    pub fn encode(&self) -> Vec<u8> {
        format!("{MAGIC} text={} data={} bss={}\n", self.text, self.data, self.bss).into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ToolchainError> {
        let bad = || ToolchainError::BadObject("not a synthetic object".into());
        let text = std::str::from_utf8(bytes).map_err(|_| bad())?;
        let mut it = text.split_whitespace();
        if it.next() != Some(MAGIC) {
            return Err(bad());
        }
        let mut field = |key: &str| -> Result<u64, ToolchainError> {
            it.next()
                .and_then(|kv| kv.strip_prefix(key))
                .and_then(|v| v.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .ok_or_else(bad)
        };
        Ok(SyntheticObject {
            text: field("text")?,
            data: field("data")?,
            bss: field("bss")?,
        })
    }

    pub fn binary_size(&self) -> BinarySize {
        BinarySize::new(self.text, self.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_berkeley_table() {
        let out = "   text\t   data\t    bss\t    dec\t    hex\tfilename\n     53\t      0\t      0\t     53\t     35\toutput.o\n";
        assert_eq!(parse_berkeley_output(out).unwrap(), BinarySize::new(53, 0));
        assert!(parse_berkeley_output("").is_err());
        assert!(parse_berkeley_output("text data\n1 2\n").is_err());
        assert!(parse_berkeley_output("text data bss dec hex filename\nx 1 2 3 4 f\n").is_err());
    }

    #[test]
    fn synthetic_objects_round_trip_and_ignore_bss() {
        let o = SyntheticObject { text: 0, data: 0, bss: 64 };
        let back = SyntheticObject::decode(&o.encode()).unwrap();
        assert_eq!(back, o);
        assert_eq!(back.binary_size().total(), 0);
        assert!(SyntheticObject::decode(b"\x7fELF").is_err());
    }

    #[test]
    fn garbage_is_not_an_elf() {
        assert!(matches!(
            berkeley_size_of_elf(b"definitely not an object"),
            Err(ToolchainError::BadObject(_))
        ));
    }
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Configuration, PanelState, RpmItem, RuleSpec};

const MAGIC: &[u8; 4] = b"MRPM";
const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;
const PANELS_PER_ITEM: usize = 16;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic at byte {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported version {found} at byte {offset}")]
    BadVersion { offset: usize, found: u16 },
    #[error("bad header field {field} at byte {offset}: {detail}")]
    BadHeader {
        offset: usize,
        field: &'static str,
        detail: String,
    },
    #[error("truncated at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("item {item} at byte {offset}: checksum mismatch")]
    Checksum { item: usize, offset: usize },
    #[error("item {item} at byte {offset}: {detail}")]
    BadItem { item: usize, offset: usize, detail: String },
    #[error("{extra} trailing bytes after the last item at byte {offset}")]
    Trailing { offset: usize, extra: usize },
    #[error("items do not share one panel size ({expected} vs {got} at item {item})")]
    MixedPanelSize { item: usize, expected: usize, got: usize },
    #[error("sidecar line {line}: {detail}")]
    Sidecar { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The sidecar lives next to the dataset with a `.meta` extension.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

#[derive(Serialize, Deserialize)]
struct MetaRecord {
    id: usize,
    config: String,
    rules: Vec<String>,
    correct: u8,
    panels: Vec<PanelState>,
}

fn panel_size_of(items: &[RpmItem]) -> Result<usize, FormatError> {
    let size = items.first().map_or(0, |i| i.panel_size);
    for (item, it) in items.iter().enumerate() {
        if it.panel_size != size
            || it.panels.len() != PANELS_PER_ITEM
            || it.panels.iter().any(|p| p.len() != size * size)
        {
            return Err(FormatError::MixedPanelSize {
                item,
                expected: size,
                got: it.panel_size,
            });
        }
    }
    Ok(size)
}

pub fn encode_dataset(items: &[RpmItem]) -> Result<Vec<u8>, FormatError> {
    let size = panel_size_of(items)?;
    let mut out = Vec::with_capacity(HEADER_LEN + items.len() * (PANELS_PER_ITEM * size * size + 64));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for v in [size as u16, size as u16, 8, 8] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for item in items {
        let start = out.len();
        let rules = item.rules.iter().map(|r| r.to_string()).collect::<Vec<_>>().join("\n");
        out.push(item.correct);
        out.push(item.config.id());
        out.extend_from_slice(&(rules.len() as u16).to_le_bytes());
        out.extend_from_slice(rules.as_bytes());
        for p in &item.panels {
            out.extend_from_slice(p);
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let rest = self.bytes.len() - self.pos;
        if rest < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - rest,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a dataset file image. Items come back without attribute
/// annotations; those live in the sidecar.
pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<RpmItem>, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| FormatError::BadMagic { offset: 0 })? != MAGIC {
        return Err(FormatError::BadMagic { offset: 0 });
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(FormatError::BadVersion {
            offset: 4,
            found: version,
        });
    }
    let flags = r.u16()?;
    if flags != 0 {
        return Err(FormatError::BadHeader {
            offset: 6,
            field: "flags",
            detail: format!("expected 0, got {flags}"),
        });
    }
    let count = r.u32()? as usize;
    let (h, w) = (r.u16()? as usize, r.u16()? as usize);
    if h != w {
        return Err(FormatError::BadHeader {
            offset: 12,
            field: "panel_w",
            detail: format!("panels must be square, got {h}x{w}"),
        });
    }
    for (offset, field) in [(16, "n_context"), (18, "n_choices")] {
        let n = r.u16()?;
        if n != 8 {
            return Err(FormatError::BadHeader {
                offset,
                field,
                detail: format!("expected 8, got {n}"),
            });
        }
    }
    let mut items = Vec::with_capacity(count.min(1 << 16));
    for index in 0..count {
        let start = r.pos;
        let head = r.take(4)?;
        let (correct, config_id) = (head[0], head[1]);
        let rule_len = u16::from_le_bytes([head[2], head[3]]) as usize;
        let rule_bytes = r.take(rule_len)?;
        let pixels = r.take(PANELS_PER_ITEM * h * w)?;
        let body_end = r.pos;
        let crc = r.u32()?;
        if crc32fast::hash(&bytes[start..body_end]) != crc {
            return Err(FormatError::Checksum {
                item: index,
                offset: start,
            });
        }
        let bad = |detail: String| FormatError::BadItem {
            item: index,
            offset: start,
            detail,
        };
        if correct >= 8 {
            return Err(bad(format!("correct index {correct} out of range")));
        }
        let config = Configuration::from_id(config_id).ok_or_else(|| bad(format!("unknown config id {config_id}")))?;
        let text = std::str::from_utf8(rule_bytes).map_err(|e| bad(e.to_string()))?;
        let rules = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| l.parse::<RuleSpec>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| bad(e.to_string()))?;
        let panels = pixels.chunks_exact(h * w).map(<[u8]>::to_vec).collect();
        items.push(RpmItem {
            config,
            panel_size: h,
            rules,
            correct,
            panels,
            attributes: None,
        });
    }
    if r.pos != bytes.len() {
        return Err(FormatError::Trailing {
            offset: r.pos,
            extra: bytes.len() - r.pos,
        });
    }
    Ok(items)
}

/// Writes the dataset and, when every item carries attributes, its sidecar.
pub fn write_dataset(items: &[RpmItem], path: &Path) -> Result<(), FormatError> {
    fs::write(path, encode_dataset(items)?)?;
    let meta = sidecar_path(path);
    if items.iter().all(|i| i.attributes.is_some()) {
        let mut f = std::io::BufWriter::new(fs::File::create(&meta)?);
        for (id, item) in items.iter().enumerate() {
            let record = MetaRecord {
                id,
                config: item.config.name().into(),
                rules: item.rules.iter().map(|r| r.to_string()).collect(),
                correct: item.correct,
                panels: item.attributes.clone().unwrap_or_default(),
            };
            serde_json::to_writer(&mut f, &record).map_err(std::io::Error::from)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    } else if meta.exists() {
        fs::remove_file(meta)?;
    }
    Ok(())
}

/// Reads a dataset, attaching attributes from the sidecar when present.
pub fn read_dataset(path: &Path) -> Result<Vec<RpmItem>, FormatError> {
    let mut items = decode_dataset(&fs::read(path)?)?;
    let meta = sidecar_path(path);
    if meta.exists() {
        attach_sidecar(&mut items, &fs::read_to_string(meta)?)?;
    }
    Ok(items)
}

fn attach_sidecar(items: &mut [RpmItem], text: &str) -> Result<(), FormatError> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != items.len() {
        return Err(FormatError::Sidecar {
            line: lines.len().min(items.len()) + 1,
            detail: format!("{} records for {} items", lines.len(), items.len()),
        });
    }
    for (n, (line, item)) in lines.iter().zip(items.iter_mut()).enumerate() {
        let err = |detail: String| FormatError::Sidecar { line: n + 1, detail };
        let rec: MetaRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let rules: Vec<String> = item.rules.iter().map(|r| r.to_string()).collect();
        if rec.id != n || rec.config != item.config.name() || rec.rules != rules || rec.correct != item.correct {
            return Err(err("record disagrees with the dataset".into()));
        }
        if rec.panels.len() != PANELS_PER_ITEM {
            return Err(err(format!(
                "expected {PANELS_PER_ITEM} panels, got {}",
                rec.panels.len()
            )));
        }
        item.attributes = Some(rec.panels);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rpm::{generate_dataset, GeneratorOptions};

    fn items(n: usize) -> Vec<RpmItem> {
        generate_dataset(&Configuration::SHIPPED, n, 5, 16, &GeneratorOptions::default()).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mrpm");
        let original = items(10);
        write_dataset(&original, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, original);
        assert_eq!(encode_dataset(&back).unwrap(), fs::read(&path).unwrap());
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let bytes = encode_dataset(&[]).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert!(decode_dataset(&bytes).unwrap().is_empty());
    }

    #[test]
    fn flipped_payload_byte_names_the_item() {
        let data = items(3);
        let mut bytes = encode_dataset(&data).unwrap();
        // the header has a fixed length, so two items end where the third starts
        let start = encode_dataset(&data[..2]).unwrap().len();
        bytes[start + 100] ^= 0x40;
        match decode_dataset(&bytes) {
            Err(FormatError::Checksum { item, offset }) => {
                assert_eq!(item, 2);
                assert_eq!(offset, start);
            }
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn header_errors_carry_offsets() {
        let mut bytes = encode_dataset(&items(1)).unwrap();
        assert!(matches!(
            decode_dataset(b"MRP"),
            Err(FormatError::BadMagic { offset: 0 })
        ));
        bytes[4] = 2;
        assert!(matches!(
            decode_dataset(&bytes),
            Err(FormatError::BadVersion { offset: 4, found: 2 })
        ));
        bytes[4] = 1;
        let cut = bytes.len() - 10;
        match decode_dataset(&bytes[..cut]) {
            Err(FormatError::Truncated { offset, needed }) => {
                assert!(offset <= cut);
                assert!(needed > 0);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }
}

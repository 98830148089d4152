use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::generate::{DatasetBundle, Dims, Split, SplitCounts};
use super::rules::RuleSpec;
use super::schema::Schema;
use crate::error::{NcvError, Result};

pub const MAGIC: &[u8; 4] = b"NCVD";
pub const VERSION: u16 = 1;

/// Header fields mirrored into the JSON sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingHeader {
    pub magic: String,
    pub version: u16,
    pub dims: Dims,
    pub num_classes: usize,
    pub samples: usize,
    pub confounded: usize,
}

impl EncodingHeader {
    pub fn of(split: &Split) -> Self {
        EncodingHeader {
            magic: "NCVD".into(),
            version: VERSION,
            dims: split.dims,
            num_classes: split.num_classes,
            samples: split.len(),
            confounded: split.confounded_count(),
        }
    }
}

pub fn encode_split(split: &Split) -> Vec<u8> {
    let f = split.dims.features();
    let mut out = Vec::with_capacity(32 + split.len() * (5 + 8 * f));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    match split.dims {
        Dims::Flat { width } => {
            out.push(0);
            out.extend_from_slice(&(split.num_classes as u32).to_le_bytes());
            out.extend_from_slice(&(width as u32).to_le_bytes());
        }
        Dims::Slot { slots, width } => {
            out.push(1);
            out.extend_from_slice(&(split.num_classes as u32).to_le_bytes());
            out.extend_from_slice(&(slots as u32).to_le_bytes());
            out.extend_from_slice(&(width as u32).to_le_bytes());
        }
    }
    out.extend_from_slice(&(split.len() as u64).to_le_bytes());
    for i in 0..split.len() {
        out.extend_from_slice(&(split.labels[i] as u32).to_le_bytes());
        out.push(split.confounded[i] as u8);
        for v in split.row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    record: Option<u64>,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(NcvError::format(self.record, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_split(bytes: &[u8]) -> Result<Split> {
    let mut r = Reader { bytes, pos: 0, record: None };
    if r.take(4, "magic")? != MAGIC {
        return Err(NcvError::format(None, "bad magic, expected NCVD"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(NcvError::format(None, format!("unsupported version {version}")));
    }
    let kind = r.u8("kind")?;
    let k = r.u32("class count")? as usize;
    let dims = match kind {
        0 => Dims::Flat {
            width: r.u32("width")? as usize,
        },
        1 => Dims::Slot {
            slots: r.u32("slot count")? as usize,
            width: r.u32("slot width")? as usize,
        },
        other => return Err(NcvError::format(None, format!("unknown kind {other}"))),
    };
    if k == 0 || dims.features() == 0 {
        return Err(NcvError::format(None, "zero class count or width"));
    }
    let n = r.u64("sample count")?;
    let f = dims.features();
    let record_len = 5 + 8 * f as u64;
    let remaining = (bytes.len() - r.pos) as u64;
    if remaining != n.saturating_mul(record_len) {
        let whole = remaining / record_len;
        if whole < n {
            return Err(NcvError::format(Some(whole), "truncated record"));
        }
        return Err(NcvError::format(Some(n), "trailing bytes after last record"));
    }
    let mut split = Split::empty(dims, k);
    split.features.reserve(n as usize * f);
    for i in 0..n {
        r.record = Some(i);
        let label = r.u32("label")? as usize;
        if label >= k {
            return Err(NcvError::format(Some(i), format!("label {label} >= class count {k}")));
        }
        let confounded = match r.u8("confounded flag")? {
            0 => false,
            1 => true,
            other => return Err(NcvError::format(Some(i), format!("confounded flag {other}"))),
        };
        for _ in 0..f {
            let v = f64::from_le_bytes(r.take(8, "payload")?.try_into().unwrap());
            split.features.push(v);
        }
        split.labels.push(label);
        split.confounded.push(confounded);
    }
    Ok(split)
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the binary file and its `.json` sidecar.
pub fn save_encodings(split: &Split, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&encode_split(split))?;
    w.flush()?;
    let header = serde_json::to_string_pretty(&EncodingHeader::of(split))?;
    fs::write(sidecar_path(path), header + "\n")?;
    Ok(())
}

pub fn load_encodings(path: &Path) -> Result<Split> {
    decode_split(&fs::read(path)?)
}

/// Metadata stored next to the three split files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BundleMeta {
    #[serde(default)]
    pub preset: Option<String>,
    pub seed: u64,
    pub clean_ratio: f64,
    pub counts: SplitCounts,
    #[serde(default)]
    pub schema: Option<Schema>,
    #[serde(default)]
    pub rules: Option<RuleSpec>,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

pub fn save_bundle(bundle: &DatasetBundle, dir: &Path, preset: Option<&str>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for name in SPLIT_NAMES {
        let path = dir.join(format!("{name}.ncvd"));
        save_encodings(bundle.split(name)?, &path)?;
        written.push(sidecar_path(&path));
        written.push(path);
    }
    let meta = BundleMeta {
        preset: preset.map(str::to_owned),
        seed: bundle.seed,
        clean_ratio: bundle.clean_ratio,
        counts: SplitCounts::new(bundle.train.len(), bundle.val.len(), bundle.test.len()),
        schema: bundle.schema.clone(),
        rules: bundle.rules.clone(),
    };
    let meta_path = dir.join("dataset.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")?;
    written.push(meta_path);
    Ok(written)
}

pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let meta_path = dir.join("dataset.json");
    let meta: Option<BundleMeta> = if meta_path.exists() {
        Some(serde_json::from_str(&fs::read_to_string(&meta_path)?)?)
    } else {
        None
    };
    let train = load_encodings(&dir.join("train.ncvd"))?;
    let val = load_encodings(&dir.join("val.ncvd"))?;
    let test = load_encodings(&dir.join("test.ncvd"))?;
    for other in [&val, &test] {
        if other.dims != train.dims || other.num_classes != train.num_classes {
            return Err(NcvError::format(None, "splits disagree on geometry or class count"));
        }
    }
    Ok(DatasetBundle {
        train,
        val,
        test,
        clean_ratio: meta.as_ref().map_or(f64::NAN, |m| m.clean_ratio),
        seed: meta.as_ref().map_or(0, |m| m.seed),
        schema: meta.as_ref().and_then(|m| m.schema.clone()),
        rules: meta.and_then(|m| m.rules),
    })
}

//! PCV1 binary point-cloud files, OFF meshes, and dataset directories.
//!
//! PCV1 layout (all integers and floats little-endian):
//!
//! ```text
//! "PCV1" | u32 N | u32 d | u8 label_mode | u32 K_or_M | u32 category
//!        | N·d f32 (row-major) | labels (1 u32 when mode 0, N u32 when mode 1)
//! ```
//!
//! `category` is `0xFFFFFFFF` when absent.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Dataset, Label, LabeledCloud, PointCloud, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"PCV1";
const HEADER_LEN: usize = 4 + 4 + 4 + 1 + 4 + 4;
pub const NO_CATEGORY: u32 = 0xFFFF_FFFF;

pub fn encode_cloud<T: Scalar>(cloud: &LabeledCloud<T>) -> Vec<u8> {
    let (n, d) = (cloud.cloud.len(), cloud.cloud.dim());
    let labels = match &cloud.label {
        Label::Class(_) => 1,
        Label::PerPoint(_) => n,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (n * d + labels));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.push(u8::from(cloud.label.is_per_point()));
    out.extend_from_slice(&cloud.num_labels.to_le_bytes());
    out.extend_from_slice(&cloud.category.unwrap_or(NO_CATEGORY).to_le_bytes());
    for v in cloud.cloud.data() {
        out.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    match &cloud.label {
        Label::Class(c) => out.extend_from_slice(&c.to_le_bytes()),
        Label::PerPoint(ls) => ls.iter().for_each(|l| out.extend_from_slice(&l.to_le_bytes())),
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated buffer".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_cloud<T: Scalar>(buf: &[u8]) -> Result<LabeledCloud<T>> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected PCV1".into()));
    }
    let mut r = Reader { buf, pos: 4 };
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let mode = r.take(1)?[0];
    let num_labels = r.u32()?;
    let category = match r.u32()? {
        NO_CATEGORY => None,
        c => Some(c),
    };
    let values = n
        .checked_mul(d)
        .filter(|&v| v.checked_mul(4).is_some())
        .ok_or_else(|| Error::Format("N·d overflows".into()))?;
    let label_count = match mode {
        0 => 1,
        1 => n,
        m => return Err(Error::Format(format!("unknown label mode {m}"))),
    };
    let expected = values
        .checked_add(label_count)
        .and_then(|w| w.checked_mul(4))
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("N·d overflows".into()))?;
    if buf.len() < expected {
        return Err(Error::Format(format!(
            "truncated buffer: {} bytes, header implies {expected}",
            buf.len()
        )));
    }
    if buf.len() > expected {
        return Err(Error::Format("trailing bytes after labels".into()));
    }
    if n == 0 || d < 3 {
        return Err(Error::Format(format!("invalid cloud size N={n}, d={d}")));
    }
    let mut data = Vec::with_capacity(values);
    for _ in 0..values {
        data.push(T::lit(r.f32()? as f64));
    }
    let label = if mode == 0 {
        Label::Class(r.u32()?)
    } else {
        Label::PerPoint((0..n).map(|_| r.u32()).collect::<Result<_>>()?)
    };
    let cloud = PointCloud::new(d, data).map_err(|e| Error::Format(e.to_string()))?;
    LabeledCloud::new(cloud, label, num_labels, category)
}

pub fn save_cloud<T: Scalar>(cloud: &LabeledCloud<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_cloud(cloud))?;
    Ok(())
}

pub fn load_cloud<T: Scalar>(path: impl AsRef<Path>) -> Result<LabeledCloud<T>> {
    decode_cloud(&fs::read(path)?)
}

/// Parses an OFF mesh. Faces with more than three vertices are fan-triangulated.
pub fn parse_off(text: &str) -> Result<(Vec<[f64; 3]>, Vec<[usize; 3]>)> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    let header = tokens
        .next()
        .ok_or_else(|| Error::Format("empty OFF file".into()))?;
    // Some exporters glue the counts to the header ("OFF1024 2000 0").
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| Error::Format("missing OFF header".into()))?;
    let mut glued = if rest.is_empty() { None } else { Some(rest) };
    let mut next_num = |what: &str| -> Result<f64> {
        let tok = glued
            .take()
            .or_else(|| tokens.next())
            .ok_or_else(|| Error::Format(format!("OFF ended before {what}")))?;
        tok.parse::<f64>()
            .map_err(|_| Error::Format(format!("bad {what} '{tok}'")))
    };
    let nv = next_num("vertex count")? as usize;
    let nf = next_num("face count")? as usize;
    let _edges = next_num("edge count")?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        vertices.push([
            next_num("vertex")?,
            next_num("vertex")?,
            next_num("vertex")?,
        ]);
    }
    let mut triangles = Vec::with_capacity(nf);
    for _ in 0..nf {
        let k = next_num("face size")? as usize;
        if k < 3 {
            return Err(Error::Format(format!("face with {k} vertices")));
        }
        let idx: Vec<usize> = (0..k)
            .map(|_| next_num("face index").map(|v| v as usize))
            .collect::<Result<_>>()?;
        for j in 1..k - 1 {
            triangles.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    Ok((vertices, triangles))
}

pub fn read_off(path: impl AsRef<Path>) -> Result<(Vec<[f64; 3]>, Vec<[usize; 3]>)> {
    parse_off(&fs::read_to_string(path)?)
}

/// Text manifest describing a dataset directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub segmentation: bool,
    pub class_names: Vec<String>,
    pub num_labels: u32,
    pub part_sets: Vec<Vec<u32>>,
    pub train_files: Vec<String>,
    pub test_files: Vec<String>,
    pub train_histogram: Vec<usize>,
    pub test_histogram: Vec<usize>,
    /// Free-form provenance lines (`key = value`) carried through verbatim.
    pub extra: Vec<(String, String)>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::from("# rcnet dataset manifest\n");
        let mode = if self.segmentation { "segment" } else { "classify" };
        writeln!(s, "mode = {mode}").unwrap();
        writeln!(s, "classes = {}", self.class_names.join(",")).unwrap();
        writeln!(s, "num_labels = {}", self.num_labels).unwrap();
        let parts: Vec<String> = self
            .part_sets
            .iter()
            .map(|p| p.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "))
            .collect();
        writeln!(s, "part_sets = {}", parts.join(";")).unwrap();
        for (k, v) in &self.extra {
            writeln!(s, "{k} = {v}").unwrap();
        }
        writeln!(s, "train_count = {}", self.train_files.len()).unwrap();
        writeln!(s, "test_count = {}", self.test_files.len()).unwrap();
        writeln!(s, "train_histogram = {}", join(&self.train_histogram)).unwrap();
        writeln!(s, "test_histogram = {}", join(&self.test_histogram)).unwrap();
        for f in self.train_files.iter().chain(&self.test_files) {
            writeln!(s, "file = {f}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = DatasetManifest {
            segmentation: false,
            class_names: Vec::new(),
            num_labels: 0,
            part_sets: Vec::new(),
            train_files: Vec::new(),
            test_files: Vec::new(),
            train_histogram: Vec::new(),
            test_histogram: Vec::new(),
            extra: Vec::new(),
        };
        let nums = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .filter(|t| !t.trim().is_empty())
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|_| Error::Format(format!("bad count '{t}'")))
                })
                .collect()
        };
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line without '=': {line}")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "mode" => m.segmentation = v == "segment",
                "classes" => {
                    m.class_names = v
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                }
                "num_labels" => {
                    m.num_labels = v
                        .parse()
                        .map_err(|_| Error::Format(format!("bad num_labels '{v}'")))?
                }
                "part_sets" => {
                    m.part_sets = v
                        .split(';')
                        .filter(|s| !s.trim().is_empty())
                        .map(|p| {
                            p.split_whitespace()
                                .map(|x| {
                                    x.parse()
                                        .map_err(|_| Error::Format(format!("bad part '{x}'")))
                                })
                                .collect::<Result<Vec<u32>>>()
                        })
                        .collect::<Result<_>>()?
                }
                "train_histogram" => m.train_histogram = nums(v)?,
                "test_histogram" => m.test_histogram = nums(v)?,
                "train_count" | "test_count" => {}
                "file" => {
                    if v.starts_with("train/") {
                        m.train_files.push(v.to_string());
                    } else if v.starts_with("test/") {
                        m.test_files.push(v.to_string());
                    } else {
                        return Err(Error::Format(format!("file outside train/ and test/: {v}")));
                    }
                }
                _ => m.extra.push((k.to_string(), v.to_string())),
            }
        }
        Ok(m)
    }
}

/// Writes `train/` and `test/` PCV1 files plus `manifest.txt` under `dir`.
pub fn save_dataset_dir<T: Scalar>(
    dir: impl AsRef<Path>,
    train: &Dataset<T>,
    test: &Dataset<T>,
    extra: Vec<(String, String)>,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let mut files = [Vec::new(), Vec::new()];
    for (slot, ds) in files.iter_mut().zip([train, test]) {
        let sub = ds.split.as_str();
        fs::create_dir_all(dir.join(sub))?;
        for (i, c) in ds.clouds.iter().enumerate() {
            let rel = format!("{sub}/{i:05}.pcv");
            save_cloud(c, dir.join(&rel))?;
            slot.push(rel);
        }
    }
    let [train_files, test_files] = files;
    let manifest = DatasetManifest {
        segmentation: train.is_segmentation(),
        class_names: train.class_names.clone(),
        num_labels: train.num_labels,
        part_sets: train.part_sets.clone(),
        train_files,
        test_files,
        train_histogram: train.class_histogram(),
        test_histogram: test.class_histogram(),
        extra,
    };
    fs::write(dir.join("manifest.txt"), manifest.to_text())?;
    Ok(manifest)
}

/// Loads one split of a dataset directory written by [`save_dataset_dir`].
pub fn load_dataset_dir<T: Scalar>(dir: impl AsRef<Path>, split: Split) -> Result<Dataset<T>> {
    let dir = dir.as_ref();
    let manifest = DatasetManifest::parse(&fs::read_to_string(dir.join("manifest.txt"))?)?;
    let files = match split {
        Split::Train => &manifest.train_files,
        Split::Test => &manifest.test_files,
    };
    let clouds = files
        .iter()
        .map(|f| load_cloud(dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset {
        clouds,
        split,
        num_labels: manifest.num_labels,
        class_names: manifest.class_names,
        part_sets: manifest.part_sets,
    };
    ds.validate()?;
    Ok(ds)
}

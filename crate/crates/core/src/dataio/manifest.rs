//! Frame manifests: one frame per line, tab-separated columns
//!
//! ```text
//! id  split  category  camera  rgb  cloud  calib  zyx  gt
//! ```
//!
//! `split` is `train`, `val` or `test`; `category` is `um`, `umm`, `uu` or
//! `challenging`; `camera` is the calibration key of the projection matrix.
//! Absent paths are written as `-`. Blank lines and lines starting with `#`
//! are skipped. Relative paths are resolved against the data root.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{io_error, DataError};

pub const HEADER: &str = "# id\tsplit\tcategory\tcamera\trgb\tcloud\tcalib\tzyx\tgt";
pub const DATA_ROOT_ENV: &str = "LIDCAM_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Um,
    Umm,
    Uu,
    Challenging,
}

macro_rules! text_enum {
    ($t:ty, $what:literal, $($v:path => $s:literal),+) => {
        impl $t {
            pub fn as_str(self) -> &'static str {
                match self { $($v => $s),+ }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s { $($s => Ok($v),)+ _ => Err(format!("unknown {} {s:?}", $what)) }
            }
        }
    };
}

text_enum!(Split, "split", Split::Train => "train", Split::Val => "val", Split::Test => "test");
text_enum!(Category, "category", Category::Um => "um", Category::Umm => "umm", Category::Uu => "uu",
    Category::Challenging => "challenging");

impl Category {
    /// The three urban categories together form the benchmark's "urban" set.
    pub fn is_urban(self) -> bool {
        self != Category::Challenging
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameRecord {
    pub id: String,
    pub split: Split,
    pub category: Category,
    pub camera: String,
    pub rgb: Option<PathBuf>,
    pub cloud: Option<PathBuf>,
    pub calib: Option<PathBuf>,
    pub zyx: Option<PathBuf>,
    pub gt: Option<PathBuf>,
}

impl FrameRecord {
    pub fn new(id: impl Into<String>, split: Split, category: Category) -> Self {
        Self {
            id: id.into(),
            split,
            category,
            camera: super::calib::DEFAULT_CAMERA_KEY.into(),
            rgb: None,
            cloud: None,
            calib: None,
            zyx: None,
            gt: None,
        }
    }

    fn paths(&self) -> [(&'static str, &Option<PathBuf>); 5] {
        [
            ("rgb", &self.rgb),
            ("cloud", &self.cloud),
            ("calib", &self.calib),
            ("zyx", &self.zyx),
            ("gt", &self.gt),
        ]
    }
}

fn path_field(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or_else(|| "-".to_string(), |p| p.display().to_string())
}

pub fn format_manifest(records: &[FrameRecord]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in records {
        let mut fields = vec![
            r.id.clone(),
            r.split.to_string(),
            r.category.to_string(),
            r.camera.clone(),
        ];
        fields.extend(r.paths().iter().map(|(_, p)| path_field(p)));
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<FrameRecord>, DataError> {
    let mut out = vec![];
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: String| DataError::Manifest {
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(bad(format!(
                "expected 9 tab-separated fields, found {}",
                f.len()
            )));
        }
        if f[0].is_empty() || f[0] == "-" {
            return Err(bad("empty frame id".into()));
        }
        let path = |s: &str| (s != "-" && !s.is_empty()).then(|| PathBuf::from(s));
        out.push(FrameRecord {
            id: f[0].to_string(),
            split: f[1].parse().map_err(bad)?,
            category: f[2].parse().map_err(bad)?,
            camera: f[3].to_string(),
            rgb: path(f[4]),
            cloud: path(f[5]),
            calib: path(f[6]),
            zyx: path(f[7]),
            gt: path(f[8]),
        });
    }
    Ok(out)
}

/// Records plus the directory their relative paths are resolved against.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<FrameRecord>,
    pub root: PathBuf,
}

impl Manifest {
    /// Reads a manifest. Relative paths resolve against `data_root` when
    /// given, otherwise against the manifest's own directory.
    pub fn read(path: &Path, data_root: Option<&Path>) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        let records = parse_manifest(&text).map_err(|e| e.at(path))?;
        let root = match data_root {
            Some(r) => r.to_path_buf(),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        Ok(Self { records, root })
    }

    pub fn write(path: &Path, records: &[FrameRecord]) -> Result<(), DataError> {
        std::fs::write(path, format_manifest(records)).map_err(io_error(path))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Names of referenced files that do not exist, per frame.
    pub fn missing_files(&self, record: &FrameRecord) -> Vec<String> {
        record
            .paths()
            .iter()
            .filter_map(|(name, p)| {
                let p = p.as_ref()?;
                (!self.resolve(p).exists()).then(|| format!("{name} {}", p.display()))
            })
            .collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &FrameRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

//! Plain-text annotation files: one `frame ped_id x y` row per line.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The five sources of the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Eth,
    Hotel,
    Univ,
    Zara1,
    Zara2,
}

impl DatasetId {
    pub const ALL: [DatasetId; 5] = [DatasetId::Eth, DatasetId::Hotel, DatasetId::Univ, DatasetId::Zara1, DatasetId::Zara2];

    pub fn name(self) -> &'static str {
        match self {
            DatasetId::Eth => "eth",
            DatasetId::Hotel => "hotel",
            DatasetId::Univ => "univ",
            DatasetId::Zara1 => "zara1",
            DatasetId::Zara2 => "zara2",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown dataset code {code}")))
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown dataset id '{s}' (expected eth, hotel, univ, zara1, zara2)")))
    }
}

/// One annotated position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackPoint {
    pub frame_id: i64,
    pub x: f64,
    pub y: f64,
}

/// All annotations of one pedestrian, frames strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTrack {
    pub ped_id: i64,
    pub points: Vec<TrackPoint>,
}

/// One annotation file.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub name: String,
    pub tracks: Vec<RawTrack>,
}

/// Every recording of one benchmark source.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub id: DatasetId,
    pub recordings: Vec<Recording>,
}

impl Dataset {
    pub fn pedestrian_count(&self) -> usize {
        self.recordings.iter().map(|r| r.tracks.len()).sum()
    }
}

fn parse_integral(field: &str) -> Option<i64> {
    let v: f64 = field.parse().ok()?;
    (v.is_finite() && v.fract() == 0.0).then_some(v as i64)
}

/// Parses annotation text. `origin` only labels diagnostics.
pub fn parse_tracks(text: &str, origin: &Path) -> Result<Vec<RawTrack>> {
    let err = |line: usize, msg: String| Error::Parse { path: origin.to_path_buf(), line, msg };
    let mut by_ped: BTreeMap<i64, Vec<TrackPoint>> = BTreeMap::new();
    let mut seen = HashSet::new();
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(err(lineno, format!("expected 4 fields (frame ped x y), found {}", fields.len())));
        }
        let frame = parse_integral(fields[0]).ok_or_else(|| err(lineno, format!("bad frame id '{}'", fields[0])))?;
        let ped = parse_integral(fields[1]).ok_or_else(|| err(lineno, format!("bad pedestrian id '{}'", fields[1])))?;
        let coord = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(lineno, format!("bad coordinate '{s}'")))
        };
        let (x, y) = (coord(fields[2])?, coord(fields[3])?);
        if !seen.insert((frame, ped)) {
            return Err(err(lineno, format!("duplicate annotation for frame {frame}, pedestrian {ped}")));
        }
        by_ped.entry(ped).or_default().push(TrackPoint { frame_id: frame, x, y });
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data(format!("{}: no annotation rows", origin.display())));
    }
    Ok(by_ped
        .into_iter()
        .map(|(ped_id, mut points)| {
            points.sort_by_key(|p| p.frame_id);
            RawTrack { ped_id, points }
        })
        .collect())
}

pub fn load_tracks(path: &Path) -> Result<Vec<RawTrack>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tracks(&text, path)
}

/// Files making up `id` under `root`: either `root/<id>.txt` or every `.txt`
/// file inside `root/<id>/`, sorted by name.
pub fn dataset_files(root: &Path, id: DatasetId) -> Result<Vec<PathBuf>> {
    let file = root.join(format!("{}.txt", id.name()));
    if file.is_file() {
        return Ok(vec![file]);
    }
    let dir = root.join(id.name());
    if dir.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        if !files.is_empty() {
            return Ok(files);
        }
    }
    Err(Error::Data(format!("no annotation files for {id} under {}", root.display())))
}

/// Loads every recording of dataset `id` found under `root`.
pub fn load_dataset(root: &Path, id: DatasetId) -> Result<Dataset> {
    let recordings = dataset_files(root, id)?
        .into_iter()
        .map(|path| {
            let tracks = load_tracks(&path)?;
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(Recording { name, tracks })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { id, recordings })
}

pub fn load_all(root: &Path) -> Result<Vec<Dataset>> {
    DatasetId::ALL.into_iter().map(|id| load_dataset(root, id)).collect()
}

/// Serialises tracks in the interchange layout, ordered by frame then pedestrian.
pub fn format_tracks(tracks: &[RawTrack]) -> String {
    let mut rows: Vec<(i64, i64, f64, f64)> = tracks
        .iter()
        .flat_map(|t| t.points.iter().map(move |p| (p.frame_id, t.ped_id, p.x, p.y)))
        .collect();
    rows.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut out = String::with_capacity(rows.len() * 32);
    for (f, p, x, y) in rows {
        out.push_str(&format!("{f}.0\t{p}.0\t{x:.4}\t{y:.4}\n"));
    }
    out
}

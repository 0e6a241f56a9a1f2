//! Catalog, rating and MOS data model with its on-disk formats.
//!
//! * `catalog.csv`: `id,source,width,height,favorites,views,legacy_mos,legacy_scale`
//!   followed by any number of `attr:<name>` columns and any other columns,
//!   which are carried through untouched.
//! * `mos.csv`: `image_id,tier,mos,var,n`.
//! * `ratings.jsonl`: one [`RatingEvent`] per line.
//!
//! All scores are on the internal 1..=100 scale. Legacy scores keep their
//! declared native scale in the catalog and are rescaled on use.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCORE_MIN: f64 = 1.0;
pub const SCORE_MAX: f64 = 100.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("row {row}: field `{field}`: {message}")]
    Row {
        row: usize,
        field: String,
        message: String,
    },
    #[error("duplicate image id `{0}`")]
    DuplicateId(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("invalid tier geometry: {0}")]
    Geometry(String),
    #[error("{key}: {count} ratings for one participant (at most 2 repetitions)")]
    TooManyRepetitions { key: String, count: usize },
    #[error("validation failed on `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

fn row_err(row: usize, field: &str, message: impl Into<String>) -> DatasetError {
    DatasetError::Row {
        row,
        field: field.to_owned(),
        message: message.into(),
    }
}

// ---------------------------------------------------------------------------
// Resolution tiers

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TierName {
    S,
    M,
    L,
}

impl TierName {
    pub const ALL: [TierName; 3] = [TierName::S, TierName::M, TierName::L];

    pub fn as_str(self) -> &'static str {
        match self {
            TierName::S => "S",
            TierName::M => "M",
            TierName::L => "L",
        }
    }

    /// Per-axis downscale factor relative to tier L.
    pub fn downscale_factor(self) -> u32 {
        match self {
            TierName::S => 4,
            TierName::M => 2,
            TierName::L => 1,
        }
    }
}

impl fmt::Display for TierName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TierName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "S" | "s" => Ok(TierName::S),
            "M" | "m" => Ok(TierName::M),
            "L" | "l" => Ok(TierName::L),
            other => Err(format!("unknown tier `{other}` (expected S, M or L)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResolutionTier {
    pub name: TierName,
    pub width: u32,
    pub height: u32,
}

impl ResolutionTier {
    pub fn geometry(&self) -> (u32, u32) {
        (self.width, self.height)
    }
}

/// The three presentation tiers. Always 4:3, each tier twice the previous
/// one per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierSet {
    tiers: [ResolutionTier; 3],
}

impl Default for TierSet {
    /// 512x384, 1024x768, 2048x1536.
    fn default() -> Self {
        Self::from_base(512, 384).expect("default tiers are valid")
    }
}

impl TierSet {
    /// Builds S = base, M = 2*base, L = 4*base.
    pub fn from_base(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(DatasetError::Geometry("zero-sized base tier".into()));
        }
        if u64::from(width) * 3 != u64::from(height) * 4 {
            return Err(DatasetError::Geometry(format!(
                "{width}x{height} is not exactly 4:3"
            )));
        }
        let tier = |name: TierName, f: u32| ResolutionTier {
            name,
            width: width * f,
            height: height * f,
        };
        Ok(Self {
            tiers: [tier(TierName::S, 1), tier(TierName::M, 2), tier(TierName::L, 4)],
        })
    }

    pub fn get(&self, name: TierName) -> ResolutionTier {
        self.tiers[name as usize]
    }

    pub fn iter(&self) -> impl Iterator<Item = ResolutionTier> + '_ {
        self.tiers.iter().copied()
    }

    pub fn by_geometry(&self, width: u32, height: u32) -> Option<TierName> {
        self.tiers
            .iter()
            .find(|t| t.width == width && t.height == height)
            .map(|t| t.name)
    }

    pub fn largest(&self) -> ResolutionTier {
        self.tiers[2]
    }
}

// ---------------------------------------------------------------------------
// Catalog

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    FlickrKoniq,
    Pixabay,
    Synthetic,
}

impl ImageSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ImageSource::FlickrKoniq => "flickr_koniq",
            ImageSource::Pixabay => "pixabay",
            ImageSource::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for ImageSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ImageSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "flickr_koniq" => Ok(ImageSource::FlickrKoniq),
            "pixabay" => Ok(ImageSource::Pixabay),
            "synthetic" => Ok(ImageSource::Synthetic),
            other => Err(format!("unknown source `{other}`")),
        }
    }
}

/// Native scale of a legacy score, e.g. `1:5` for a five-point ACR MOS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreScale {
    pub lo: f64,
    pub hi: f64,
}

impl ScoreScale {
    pub const INTERNAL: ScoreScale = ScoreScale {
        lo: SCORE_MIN,
        hi: SCORE_MAX,
    };

    /// Linear map onto the internal 1..=100 scale.
    pub fn to_internal(&self, v: f64) -> f64 {
        SCORE_MIN + (SCORE_MAX - SCORE_MIN) * (v - self.lo) / (self.hi - self.lo)
    }
}

impl fmt::Display for ScoreScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.lo, self.hi)
    }
}

impl FromStr for ScoreScale {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (lo, hi) = s
            .split_once(':')
            .ok_or_else(|| format!("expected `lo:hi`, got `{s}`"))?;
        let lo: f64 = lo.trim().parse().map_err(|e| format!("lo: {e}"))?;
        let hi: f64 = hi.trim().parse().map_err(|e| format!("hi: {e}"))?;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(format!("empty or non-finite scale `{s}`"));
        }
        Ok(ScoreScale { lo, hi })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub source: ImageSource,
    pub native_width: u32,
    pub native_height: u32,
    /// Discrete attribute levels keyed by attribute name (without the
    /// `attr:` prefix). Absent entries are stored as empty cells.
    pub attributes: BTreeMap<String, String>,
    pub legacy_mos: Option<f64>,
    pub legacy_scale: Option<ScoreScale>,
    pub favorites: u64,
    pub views: u64,
    /// Columns the catalog does not interpret, such as `path`.
    pub extra: BTreeMap<String, String>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, source: ImageSource, width: u32, height: u32) -> Self {
        Self {
            id: id.into(),
            source,
            native_width: width,
            native_height: height,
            attributes: BTreeMap::new(),
            legacy_mos: None,
            legacy_scale: None,
            favorites: 0,
            views: 0,
            extra: BTreeMap::new(),
        }
    }

    /// Legacy MOS on the internal scale. A missing scale means the value is
    /// already internal.
    pub fn legacy_mos_internal(&self) -> Option<f64> {
        let v = self.legacy_mos?;
        Some(self.legacy_scale.unwrap_or(ScoreScale::INTERNAL).to_internal(v))
    }
}

const CATALOG_FIXED: [&str; 8] = [
    "id",
    "source",
    "width",
    "height",
    "favorites",
    "views",
    "legacy_mos",
    "legacy_scale",
];
const ATTR_PREFIX: &str = "attr:";

/// An ordered set of image records plus the column layout it was read with.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    pub records: Vec<ImageRecord>,
    /// Attribute column names (without prefix), in file order.
    pub attribute_columns: Vec<String>,
    /// Uninterpreted column names, in file order.
    pub extra_columns: Vec<String>,
}

impl Catalog {
    pub fn new(records: Vec<ImageRecord>) -> Result<Self> {
        let mut attribute_columns: Vec<String> = Vec::new();
        let mut extra_columns: Vec<String> = Vec::new();
        for r in &records {
            for k in r.attributes.keys() {
                if !attribute_columns.contains(k) {
                    attribute_columns.push(k.clone());
                }
            }
            for k in r.extra.keys() {
                if !extra_columns.contains(k) {
                    extra_columns.push(k.clone());
                }
            }
        }
        let catalog = Self {
            records,
            attribute_columns,
            extra_columns,
        };
        catalog.check_unique()?;
        Ok(catalog)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(DatasetError::DuplicateId(r.id.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Keeps the column layout, replaces the records.
    pub fn with_records(&self, records: Vec<ImageRecord>) -> Result<Self> {
        let mut out = Self::new(records)?;
        let mut attrs = self.attribute_columns.clone();
        attrs.extend(
            out.attribute_columns
                .drain(..)
                .filter(|c| !self.attribute_columns.contains(c)),
        );
        let mut extra = self.extra_columns.clone();
        extra.extend(
            out.extra_columns
                .drain(..)
                .filter(|c| !self.extra_columns.contains(c)),
        );
        out.attribute_columns = attrs;
        out.extra_columns = extra;
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(File::open(path)?)
    }

    pub fn store(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers()?.clone();
        let names: Vec<&str> = header.iter().collect();
        if names.len() < CATALOG_FIXED.len() || names[..CATALOG_FIXED.len()] != CATALOG_FIXED {
            return Err(DatasetError::Header(format!(
                "catalog must start with `{}`",
                CATALOG_FIXED.join(",")
            )));
        }
        let mut attribute_columns = Vec::new();
        let mut extra_columns = Vec::new();
        for name in &names[CATALOG_FIXED.len()..] {
            match name.strip_prefix(ATTR_PREFIX) {
                Some(a) => attribute_columns.push(a.to_owned()),
                None => extra_columns.push((*name).to_owned()),
            }
        }

        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec?;
            let field = |idx: usize| rec.get(idx).unwrap_or("");
            let id = field(0).to_owned();
            if id.is_empty() {
                return Err(row_err(row, "id", "empty id"));
            }
            let source = field(1)
                .parse::<ImageSource>()
                .map_err(|e| row_err(row, "source", e))?;
            let parse_u32 = |idx: usize, name: &str| {
                field(idx)
                    .parse::<u32>()
                    .map_err(|e| row_err(row, name, format!("`{}`: {e}", field(idx))))
            };
            let parse_u64 = |idx: usize, name: &str| {
                field(idx)
                    .parse::<u64>()
                    .map_err(|e| row_err(row, name, format!("`{}`: {e}", field(idx))))
            };
            let width = parse_u32(2, "width")?;
            let height = parse_u32(3, "height")?;
            let favorites = parse_u64(4, "favorites")?;
            let views = parse_u64(5, "views")?;
            let legacy_mos = match field(6) {
                "" => None,
                s => {
                    let v: f64 = s
                        .parse()
                        .map_err(|e| row_err(row, "legacy_mos", format!("`{s}`: {e}")))?;
                    if !v.is_finite() {
                        return Err(row_err(row, "legacy_mos", "not finite"));
                    }
                    Some(v)
                }
            };
            let legacy_scale = match field(7) {
                "" => None,
                s => Some(
                    s.parse::<ScoreScale>()
                        .map_err(|e| row_err(row, "legacy_scale", e))?,
                ),
            };
            let mut attributes = BTreeMap::new();
            let mut extra = BTreeMap::new();
            let mut a = 0;
            let mut x = 0;
            for (idx, name) in names.iter().enumerate().skip(CATALOG_FIXED.len()) {
                let v = field(idx);
                if name.starts_with(ATTR_PREFIX) {
                    if !v.is_empty() {
                        attributes.insert(attribute_columns[a].clone(), v.to_owned());
                    }
                    a += 1;
                } else {
                    if !v.is_empty() {
                        extra.insert(extra_columns[x].clone(), v.to_owned());
                    }
                    x += 1;
                }
            }
            if !seen.insert(id.clone()) {
                return Err(DatasetError::DuplicateId(id));
            }
            records.push(ImageRecord {
                id,
                source,
                native_width: width,
                native_height: height,
                attributes,
                legacy_mos,
                legacy_scale,
                favorites,
                views,
                extra,
            });
        }
        Ok(Self {
            records,
            attribute_columns,
            extra_columns,
        })
    }

    pub fn write_to<W: Write>(&self, writer: W) -> Result<()> {
        self.check_unique()?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        let mut header: Vec<String> = CATALOG_FIXED.iter().map(|s| (*s).to_owned()).collect();
        header.extend(self.attribute_columns.iter().map(|a| format!("{ATTR_PREFIX}{a}")));
        header.extend(self.extra_columns.iter().cloned());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.id.clone(),
                r.source.to_string(),
                r.native_width.to_string(),
                r.native_height.to_string(),
                r.favorites.to_string(),
                r.views.to_string(),
                r.legacy_mos.map(|v| v.to_string()).unwrap_or_default(),
                r.legacy_scale.map(|s| s.to_string()).unwrap_or_default(),
            ];
            for a in &self.attribute_columns {
                row.push(r.attributes.get(a).cloned().unwrap_or_default());
            }
            for x in &self.extra_columns {
                row.push(r.extra.get(x).cloned().unwrap_or_default());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Ratings

/// Visible image area at time `t` (ms), in tier pixel coordinates,
/// half-open `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewportSample {
    pub t: u64,
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingEvent {
    pub participant_id: String,
    pub image_id: String,
    pub tier: TierName,
    pub batch_id: String,
    pub repetition: u8,
    pub value: f64,
    /// Milliseconds since the Unix epoch.
    pub submitted_at: u64,
    #[serde(default)]
    pub viewport_trace: Vec<ViewportSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_maximized: Option<bool>,
}

impl RatingEvent {
    pub fn validate(&self, tiers: &TierSet) -> Result<()> {
        let fail = |field: &str, message: String| DatasetError::Validation {
            field: field.to_owned(),
            message,
        };
        if !(self.value.is_finite() && (SCORE_MIN..=SCORE_MAX).contains(&self.value)) {
            return Err(fail("value", format!("{} outside [1, 100]", self.value)));
        }
        if !matches!(self.repetition, 1 | 2) {
            return Err(fail(
                "repetition",
                format!("{} is not 1 or 2", self.repetition),
            ));
        }
        if self.participant_id.is_empty() {
            return Err(fail("participant_id", "empty".into()));
        }
        if self.image_id.is_empty() {
            return Err(fail("image_id", "empty".into()));
        }
        let tier = tiers.get(self.tier);
        for (i, v) in self.viewport_trace.iter().enumerate() {
            if v.x0 > v.x1 || v.y0 > v.y1 || v.x1 > tier.width || v.y1 > tier.height {
                return Err(fail(
                    "viewport_trace",
                    format!(
                        "sample {i} ({},{})-({},{}) outside {}x{}",
                        v.x0, v.y0, v.x1, v.y1, tier.width, tier.height
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Reads and validates a line-delimited rating log. Blank lines are skipped;
/// row numbers are 1-based line numbers.
pub fn read_ratings<R: Read>(reader: R, tiers: &TierSet) -> Result<Vec<RatingEvent>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let row = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: RatingEvent = serde_json::from_str(&line).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("field"))
                .unwrap_or("json")
                .to_owned();
            DatasetError::Row {
                row,
                field,
                message: msg,
            }
        })?;
        ev.validate(tiers).map_err(|e| match e {
            DatasetError::Validation { field, message } => DatasetError::Row {
                row,
                field,
                message,
            },
            other => other,
        })?;
        out.push(ev);
    }
    Ok(out)
}

pub fn load_ratings(path: impl AsRef<Path>, tiers: &TierSet) -> Result<Vec<RatingEvent>> {
    read_ratings(File::open(path)?, tiers)
}

pub fn write_ratings<W: Write>(mut writer: W, events: &[RatingEvent]) -> Result<()> {
    for ev in events {
        serde_json::to_writer(&mut writer, ev).map_err(std::io::Error::other)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// MOS

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosRow {
    pub image_id: String,
    pub tier: TierName,
    pub mos: f64,
    /// Unbiased (n-1) sample variance of the per-participant scores.
    pub var: f64,
    pub n: usize,
}

impl MosRow {
    /// Largest unbiased variance that `n` scores on [1, 100] with mean `mos`
    /// can have: the population bound (mos-1)(100-mos) times n/(n-1).
    pub fn variance_bound(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        (self.mos - SCORE_MIN) * (SCORE_MAX - self.mos) * n / (n - 1.0)
    }

    /// Variance rescaled to the population (1/n) convention; this is the
    /// quantity bounded by (mos-1)(100-mos).
    pub fn population_var(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.var * (self.n as f64 - 1.0) / self.n as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MosTable {
    pub rows: Vec<MosRow>,
}

const MOS_HEADER: [&str; 5] = ["image_id", "tier", "mos", "var", "n"];

impl MosTable {
    pub fn tiers(&self) -> Vec<TierName> {
        let mut t: Vec<TierName> = self.rows.iter().map(|r| r.tier).collect();
        t.sort();
        t.dedup();
        t
    }

    pub fn for_tier(&self, tier: TierName) -> impl Iterator<Item = &MosRow> {
        self.rows.iter().filter(move |r| r.tier == tier)
    }

    pub fn get(&self, image_id: &str, tier: TierName) -> Option<&MosRow> {
        self.rows
            .iter()
            .find(|r| r.tier == tier && r.image_id == image_id)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.rows.iter().enumerate() {
            let row = i + 1;
            if !(SCORE_MIN..=SCORE_MAX).contains(&r.mos) {
                return Err(row_err(row, "mos", format!("{} outside [1, 100]", r.mos)));
            }
            if r.n == 0 {
                return Err(row_err(row, "n", "no contributing participants"));
            }
            if !(r.var >= 0.0) || r.var > r.variance_bound() + 1e-9 {
                return Err(row_err(
                    row,
                    "var",
                    format!("{} outside [0, {}]", r.var, r.variance_bound()),
                ));
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != MOS_HEADER {
            return Err(DatasetError::Header(format!(
                "mos table header must be `{}`",
                MOS_HEADER.join(",")
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec?;
            let f = |idx: usize| rec.get(idx).unwrap_or("");
            let parse_f = |idx: usize, name: &str| {
                f(idx)
                    .parse::<f64>()
                    .map_err(|e| row_err(row, name, format!("`{}`: {e}", f(idx))))
            };
            rows.push(MosRow {
                image_id: f(0).to_owned(),
                tier: f(1).parse().map_err(|e: String| row_err(row, "tier", e))?,
                mos: parse_f(2, "mos")?,
                var: parse_f(3, "var")?,
                n: f(4)
                    .parse()
                    .map_err(|e| row_err(row, "n", format!("`{}`: {e}", f(4))))?,
            });
        }
        let table = Self { rows };
        table.validate()?;
        Ok(table)
    }

    pub fn write_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(MOS_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.image_id.clone(),
                r.tier.to_string(),
                r.mos.to_string(),
                r.var.to_string(),
                r.n.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(File::open(path)?)
    }

    pub fn store(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }
}

/// Per-participant, repetition-averaged scores for one (image, tier), keyed
/// by participant id.
pub type ParticipantScores = BTreeMap<String, f64>;

/// Groups ratings by (image, tier) and averages each participant's
/// repetitions.
pub fn participant_scores(
    ratings: &[RatingEvent],
) -> Result<BTreeMap<(String, TierName), ParticipantScores>> {
    let mut grouped: BTreeMap<(String, TierName), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for ev in ratings {
        grouped
            .entry((ev.image_id.clone(), ev.tier))
            .or_default()
            .entry(ev.participant_id.clone())
            .or_default()
            .push(ev.value);
    }
    let mut out = BTreeMap::new();
    for ((image, tier), per_participant) in grouped {
        let mut scores = BTreeMap::new();
        for (participant, mut values) in per_participant {
            if values.len() > 2 {
                return Err(DatasetError::TooManyRepetitions {
                    key: format!("{participant}/{image}/{tier}"),
                    count: values.len(),
                });
            }
            // order-independent: a+b == b+a, but sort anyway so the reduction
            // order never depends on input order
            values.sort_by(f64::total_cmp);
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            scores.insert(participant, mean);
        }
        out.insert((image, tier), scores);
    }
    Ok(out)
}

/// Aggregates ratings into a MOS table: repetitions are averaged per
/// participant first, then scores are averaged across participants.
/// Rows are ordered by (image id, tier).
pub fn compute_mos(ratings: &[RatingEvent]) -> Result<MosTable> {
    let grouped = participant_scores(ratings)?;
    let rows = grouped
        .into_iter()
        .map(|((image_id, tier), scores)| {
            let n = scores.len();
            let mos = scores.values().sum::<f64>() / n as f64;
            let var = if n > 1 {
                scores.values().map(|s| (s - mos).powi(2)).sum::<f64>() / (n as f64 - 1.0)
            } else {
                0.0
            };
            MosRow {
                image_id,
                tier,
                mos,
                var,
                n,
            }
        })
        .collect();
    Ok(MosTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(p: &str, img: &str, rep: u8, value: f64) -> RatingEvent {
        RatingEvent {
            participant_id: p.into(),
            image_id: img.into(),
            tier: TierName::M,
            batch_id: "b0".into(),
            repetition: rep,
            value,
            submitted_at: 1_700_000_000_000,
            viewport_trace: vec![],
            window_maximized: None,
        }
    }

    fn sample_catalog() -> Catalog {
        let mut a = ImageRecord::new("a", ImageSource::Pixabay, 4000, 3000);
        a.attributes.insert("camera".into(), "canon".into());
        a.favorites = 10;
        a.views = 1000;
        a.extra.insert("path".into(), "raw/a.jpg".into());
        let mut b = ImageRecord::new("b", ImageSource::FlickrKoniq, 2048, 1536);
        b.legacy_mos = Some(3.25);
        b.legacy_scale = Some(ScoreScale { lo: 1.0, hi: 5.0 });
        b.attributes.insert("tag".into(), "beach, sunset".into());
        let c = ImageRecord::new("c", ImageSource::Synthetic, 2100, 1600);
        Catalog::new(vec![a, b, c]).unwrap()
    }

    #[test]
    fn default_tiers() {
        let t = TierSet::default();
        assert_eq!(t.get(TierName::S).geometry(), (512, 384));
        assert_eq!(t.get(TierName::M).geometry(), (1024, 768));
        assert_eq!(t.get(TierName::L).geometry(), (2048, 1536));
        assert!(TierSet::from_base(500, 384).is_err());
        assert_eq!(t.by_geometry(1024, 768), Some(TierName::M));
    }

    #[test]
    fn empty_catalog_roundtrip() {
        let mut buf = Vec::new();
        Catalog::default().write_to(&mut buf).unwrap();
        let back = Catalog::read_from(&buf[..]).unwrap();
        assert!(back.is_empty());
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn catalog_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("catalog.csv");
        let cat = sample_catalog();
        cat.store(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let back = Catalog::load(&path).unwrap();
        assert_eq!(back, cat);
        assert_eq!(back.len(), 3);
        back.store(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn unknown_columns_survive() {
        let text = "id,source,width,height,favorites,views,legacy_mos,legacy_scale,attr:x,owner,path\n\
                    i1,pixabay,3000,2000,1,2,,,lv,bob,/a.png\n";
        let cat = Catalog::read_from(text.as_bytes()).unwrap();
        assert_eq!(cat.extra_columns, vec!["owner", "path"]);
        assert_eq!(cat.records[0].extra["owner"], "bob");
        let mut out = Vec::new();
        cat.write_to(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn malformed_row_names_row_and_field() {
        let text = "id,source,width,height,favorites,views,legacy_mos,legacy_scale\n\
                    i1,pixabay,3000,2000,1,2,,\n\
                    i2,pixabay,wide,2000,1,2,,\n";
        match Catalog::read_from(text.as_bytes()) {
            Err(DatasetError::Row { row, field, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(field, "width");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = "id,source,width,height,favorites,views,legacy_mos,legacy_scale\n\
                    i1,pixabay,3000,2000,1,2,,\n\
                    i1,pixabay,3000,2000,1,2,,\n";
        assert!(matches!(
            Catalog::read_from(text.as_bytes()),
            Err(DatasetError::DuplicateId(id)) if id == "i1"
        ));
        let r = ImageRecord::new("x", ImageSource::Pixabay, 1, 1);
        assert!(Catalog::new(vec![r.clone(), r]).is_err());
    }

    #[test]
    fn legacy_scores_rescale_to_internal() {
        let cat = sample_catalog();
        let b = cat.get("b").unwrap();
        // 3.25 on [1,5] -> 1 + 99 * 2.25/4
        assert!((b.legacy_mos_internal().unwrap() - 56.6875).abs() < 1e-12);
        assert_eq!(cat.get("a").unwrap().legacy_mos_internal(), None);
    }

    #[test]
    fn rating_value_out_of_range_cites_value() {
        let good = serde_json::to_string(&ev("p", "i", 1, 50.0)).unwrap();
        let bad = serde_json::to_string(&ev("p", "i", 1, 101.0)).unwrap();
        let text = format!("{good}\n{bad}\n");
        match read_ratings(text.as_bytes(), &TierSet::default()) {
            Err(DatasetError::Row { row, field, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(field, "value");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_timestamp_rejected() {
        let line = r#"{"participant_id":"p","image_id":"i","tier":"M","batch_id":"b","repetition":1,"value":50,"submitted_at":"yesterday","viewport_trace":[]}"#;
        assert!(read_ratings(line.as_bytes(), &TierSet::default()).is_err());
        let neg = line.replace("\"yesterday\"", "-5");
        assert!(read_ratings(neg.as_bytes(), &TierSet::default()).is_err());
    }

    #[test]
    fn viewport_must_lie_inside_tier() {
        let mut e = ev("p", "i", 1, 50.0);
        e.viewport_trace.push(ViewportSample {
            t: 0,
            x0: 0,
            y0: 0,
            x1: 1024,
            y1: 768,
        });
        assert!(e.validate(&TierSet::default()).is_ok());
        e.viewport_trace[0].x1 = 1025;
        assert!(e.validate(&TierSet::default()).is_err());
        let mut e = ev("p", "i", 3, 50.0);
        e.viewport_trace.clear();
        assert!(e.validate(&TierSet::default()).is_err());
    }

    #[test]
    fn ratings_roundtrip() {
        let events = vec![ev("p1", "a", 1, 12.0), ev("p1", "a", 2, 14.5)];
        let mut buf = Vec::new();
        write_ratings(&mut buf, &events).unwrap();
        assert_eq!(read_ratings(&buf[..], &TierSet::default()).unwrap(), events);
    }

    #[test]
    fn mos_single_rater_average() {
        let t = compute_mos(&[ev("p", "a", 1, 40.0), ev("p", "a", 2, 60.0)]).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!((t.rows[0].mos, t.rows[0].var, t.rows[0].n), (50.0, 0.0, 1));
    }

    #[test]
    fn mos_constant_panel() {
        let evs: Vec<_> = ["p1", "p2", "p3"]
            .iter()
            .flat_map(|p| [ev(p, "a", 1, 70.0), ev(p, "a", 2, 70.0)])
            .collect();
        let t = compute_mos(&evs).unwrap();
        assert_eq!((t.rows[0].mos, t.rows[0].var, t.rows[0].n), (70.0, 0.0, 3));
    }

    #[test]
    fn mos_unbiased_variance() {
        // participant means 40, 50, 60
        let evs = vec![
            ev("p1", "a", 1, 35.0),
            ev("p1", "a", 2, 45.0),
            ev("p2", "a", 1, 50.0),
            ev("p3", "a", 1, 60.0),
            ev("p3", "a", 2, 60.0),
        ];
        let t = compute_mos(&evs).unwrap();
        assert_eq!(t.rows[0].mos, 50.0);
        assert!((t.rows[0].var - 100.0).abs() < 1e-12);
        assert_eq!(t.rows[0].n, 3);
    }

    #[test]
    fn mos_errors() {
        assert!(compute_mos(&[]).unwrap().rows.is_empty());
        let evs = vec![ev("p", "a", 1, 1.0), ev("p", "a", 2, 2.0), ev("p", "a", 2, 3.0)];
        assert!(matches!(
            compute_mos(&evs),
            Err(DatasetError::TooManyRepetitions { count: 3, .. })
        ));
    }

    #[test]
    fn mos_table_csv_roundtrip() {
        let evs = vec![ev("p1", "a", 1, 35.0), ev("p2", "a", 1, 50.0)];
        let t = compute_mos(&evs).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(MosTable::read_from(&buf[..]).unwrap(), t);
    }

    #[test]
    fn extreme_pair_exceeds_population_bound_but_not_unbiased_bound() {
        let t = compute_mos(&[ev("p1", "a", 1, 1.0), ev("p2", "a", 1, 100.0)]).unwrap();
        let r = &t.rows[0];
        let population_bound = (r.mos - 1.0) * (100.0 - r.mos);
        assert!(r.var > population_bound);
        assert!(r.population_var() <= population_bound + 1e-9);
        t.validate().unwrap();
    }

    fn arb_ratings() -> impl Strategy<Value = Vec<RatingEvent>> {
        // (participant, image, two values, has second repetition)
        prop::collection::vec(
            (0usize..6, 0usize..4, 1u32..=100, 1u32..=100, any::<bool>()),
            1..40,
        )
        .prop_map(|cells| {
            let mut seen = HashSet::new();
            let mut out = Vec::new();
            for (p, i, v1, v2, twice) in cells {
                if !seen.insert((p, i)) {
                    continue;
                }
                out.push(ev(&format!("p{p}"), &format!("i{i}"), 1, v1 as f64));
                if twice {
                    out.push(ev(&format!("p{p}"), &format!("i{i}"), 2, v2 as f64));
                }
            }
            out
        })
    }

    proptest! {
        #[test]
        fn mos_is_permutation_invariant(evs in arb_ratings(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut shuffled = evs.clone();
            shuffled.shuffle(&mut crate::rng::seeded(seed));
            prop_assert_eq!(compute_mos(&evs).unwrap(), compute_mos(&shuffled).unwrap());
        }

        #[test]
        fn mos_rows_respect_range_bounds(evs in arb_ratings()) {
            let t = compute_mos(&evs).unwrap();
            for r in &t.rows {
                prop_assert!((1.0..=100.0).contains(&r.mos));
                prop_assert!(r.var >= 0.0);
                prop_assert!(r.population_var() <= (r.mos - 1.0) * (100.0 - r.mos) + 1e-9);
                prop_assert!(r.var <= r.variance_bound() + 1e-9);
            }
            prop_assert!(t.validate().is_ok());
        }
    }
}
